//! Training loop, evaluation, and per-epoch metrics.
//!
//! The run is fully determined by (seed, config, dataset): parameter init
//! comes from the build seed, and epoch `e` shuffles with a fresh RNG seeded
//! by `splitmix64_at(seed, e)`, so a resumed run walks the same batch order
//! as an uninterrupted one.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{pixels_to_chw, read_ppm, splitmix64_at, Dataset};
use crate::losses::{iou, is_correct, total_loss, BoxCwh};
use crate::model::{forward_batch, ForwardOpts, Model};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::Graph;
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::{Result, VgqcError};

/// Global gradient L2-norm ceiling.
pub const CLIP_NORM: f64 = 1.0;

/// Optimization knobs; model topology lives in [`crate::model::ModelConfig`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// First epoch index to run; nonzero when resuming from a checkpoint.
    pub start_epoch: usize,
    /// Forces one candidate kernel, as (stage id 1..=4, kernel index), for
    /// every forward pass of the run.
    pub forced_kernel: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            start_epoch: 0,
            forced_kernel: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate used at full scale; everything else keeps the defaults.
    pub fn paper() -> Self {
        TrainConfig {
            lr: 2e-4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(VgqcError::validation("lr must be positive and finite"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(VgqcError::validation("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(VgqcError::validation("batch_size must be >= 1"));
        }
        if self.start_epoch > self.epochs {
            return Err(VgqcError::validation(format!(
                "start_epoch {} exceeds epochs {}",
                self.start_epoch, self.epochs
            )));
        }
        Ok(())
    }
}

/// Epoch index at which the learning rate drops, floor(2/3) of the run.
pub fn decay_epoch(epochs: usize) -> usize {
    epochs * 2 / 3
}

/// Step schedule: base rate before the decay epoch, exactly 0.1x after.
pub fn lr_at(base: f64, epochs: usize, epoch: usize) -> f64 {
    if epochs > 0 && epoch >= decay_epoch(epochs) {
        base * 0.1
    } else {
        base
    }
}

/// One line of the JSONL metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_mean_iou: f64,
    pub lr: f64,
}

/// One evaluated sample, in manifest order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub query: String,
    pub pred: [f64; 4],
    pub gt: [f64; 4],
    pub iou: f64,
    pub correct: bool,
}

/// Split-level evaluation result.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Fraction of samples with IoU > 0.5.
    pub accuracy: f64,
    pub mean_iou: f64,
    pub records: Vec<SampleRecord>,
}

/// A split held in memory: raw pixels (converted to planes per batch),
/// pre-tokenized queries, and ground-truth boxes.
pub struct LoadedSplit {
    pub image_size: usize,
    pub max_len: usize,
    pub pixels: Vec<Vec<u8>>,
    pub token_ids: Vec<Vec<usize>>,
    pub queries: Vec<String>,
    pub boxes: Vec<BoxCwh>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Reads every image and tokenizes every query of one split.
pub fn load_split(
    data: &Dataset,
    vocab: &Vocab,
    max_len: usize,
    split: &str,
) -> Result<LoadedSplit> {
    let entries = data.manifest.split(split)?;
    let size = data.manifest.config.image_size;
    let mut out = LoadedSplit {
        image_size: size,
        max_len,
        pixels: Vec::with_capacity(entries.len()),
        token_ids: Vec::with_capacity(entries.len()),
        queries: Vec::with_capacity(entries.len()),
        boxes: Vec::with_capacity(entries.len()),
    };
    for entry in entries {
        let (px, got) = read_ppm(&data.dir.join(&entry.image))?;
        if got != size {
            return Err(VgqcError::validation(format!(
                "{}: image size {} does not match manifest {}",
                entry.image, got, size
            )));
        }
        out.pixels.push(px);
        out.token_ids.push(vocab.tokenize(&entry.query, max_len)?);
        out.queries.push(entry.query.clone());
        out.boxes.push(BoxCwh::from_slice(&entry.box_cwh));
    }
    Ok(out)
}

/// Stacks the selected samples into an image tensor, flat token ids, and a
/// flat [b, 4] ground-truth buffer.
fn assemble_batch(split: &LoadedSplit, idxs: &[usize]) -> (Tensor<f32>, Vec<usize>, Vec<f32>) {
    let s = split.image_size;
    let b = idxs.len();
    let mut images = Vec::with_capacity(b * 3 * s * s);
    let mut ids = Vec::with_capacity(b * split.max_len);
    let mut gt = Vec::with_capacity(b * 4);
    for &i in idxs {
        images.extend_from_slice(&pixels_to_chw(&split.pixels[i], s));
        ids.extend_from_slice(&split.token_ids[i]);
        let bx = &split.boxes[i];
        gt.extend_from_slice(&[bx.cx as f32, bx.cy as f32, bx.w as f32, bx.h as f32]);
    }
    (Tensor::new(vec![b, 3, s, s], images), ids, gt)
}

fn check_image_size(model: &Model<f32>, data: &Dataset) -> Result<()> {
    let want = model.config.image_size;
    let got = data.manifest.config.image_size;
    if want != got {
        return Err(VgqcError::validation(format!(
            "dataset image size {got} does not match model config {want}"
        )));
    }
    Ok(())
}

/// Runs one split through the model in eval mode.
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    split: &str,
    forced: Option<(usize, usize)>,
) -> Result<EvalReport> {
    check_image_size(model, data)?;
    let loaded = load_split(data, &model.vocab, model.config.max_len, split)?;
    if loaded.is_empty() {
        return Err(VgqcError::validation(format!("split '{split}' is empty")));
    }
    evaluate_loaded(model, &loaded, forced)
}

/// Evaluation core shared by [`evaluate`] and the per-epoch loop.
pub fn evaluate_loaded(
    model: &Model<f32>,
    split: &LoadedSplit,
    forced: Option<(usize, usize)>,
) -> Result<EvalReport> {
    let opts = ForwardOpts {
        forced,
        ..ForwardOpts::default()
    };
    let mut records = Vec::with_capacity(split.len());
    let idxs: Vec<usize> = (0..split.len()).collect();
    for chunk in idxs.chunks(EVAL_BATCH) {
        let (images, ids, _) = assemble_batch(split, chunk);
        let mut g = Graph::new(&model.store, false);
        let out = forward_batch(model, &mut g, &images, &ids, &opts)?;
        let pred = g.tape.data(out.pred);
        for (row, &i) in chunk.iter().enumerate() {
            let p = BoxCwh::from_f32_slice(&pred[row * 4..row * 4 + 4]);
            let gt = &split.boxes[i];
            let iou_v = iou(&p, gt);
            records.push(SampleRecord {
                index: i,
                query: split.queries[i].clone(),
                pred: [p.cx, p.cy, p.w, p.h],
                gt: [gt.cx, gt.cy, gt.w, gt.h],
                iou: iou_v,
                correct: is_correct(&p, gt),
            });
        }
    }
    let n = records.len() as f64;
    let accuracy = records.iter().filter(|r| r.correct).count() as f64 / n;
    let mean_iou = records.iter().map(|r| r.iou).sum::<f64>() / n;
    Ok(EvalReport {
        accuracy,
        mean_iou,
        records,
    })
}

const EVAL_BATCH: usize = 32;

/// Trains in place, writes the final checkpoint, and returns one metrics row
/// per epoch. `metrics_path`, when given, receives the same rows as JSONL;
/// `log` echoes them to stdout.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    ckpt_path: &Path,
    metrics_path: Option<&Path>,
    log: bool,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_image_size(model, data)?;
    if let Some((stage, kernel)) = cfg.forced_kernel {
        // Surfaces a bad stage/kernel id before any data is read.
        let block = model.backbone.qcm_block(stage).ok_or_else(|| {
            VgqcError::validation(format!("stage {stage} has no query-conditioned block"))
        })?;
        if kernel >= block.kcount() {
            return Err(VgqcError::validation(format!(
                "kernel index {kernel} out of range for stage {stage} (K = {})",
                block.kcount()
            )));
        }
    }

    let mut metrics = Vec::new();
    let mut metrics_file = match metrics_path {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };

    if cfg.start_epoch < cfg.epochs {
        let train_split = load_split(data, &model.vocab, model.config.max_len, "train")?;
        let val_split = load_split(data, &model.vocab, model.config.max_len, "val")?;
        if train_split.is_empty() {
            return Err(VgqcError::validation("train split is empty"));
        }
        if val_split.is_empty() {
            return Err(VgqcError::validation("val split is empty"));
        }

        let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
        for epoch in cfg.start_epoch..cfg.epochs {
            let lr = lr_at(cfg.lr, cfg.epochs, epoch);
            opt.lr = lr;

            let mut order: Vec<usize> = (0..train_split.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64_at(cfg.seed, epoch as u64));
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let loss = train_step(model, &mut opt, &train_split, chunk, cfg.forced_kernel)
                    .map_err(|e| match e {
                        VgqcError::Numeric(msg) => VgqcError::numeric(format!(
                            "epoch {epoch} batch {bi} (lr {lr:e}): {msg}"
                        )),
                        other => other,
                    })?;
                loss_sum += loss * chunk.len() as f64;
            }
            let train_loss = loss_sum / train_split.len() as f64;

            let report = evaluate_loaded(model, &val_split, cfg.forced_kernel)?;
            let row = EpochMetrics {
                epoch,
                train_loss,
                val_acc: report.accuracy,
                val_mean_iou: report.mean_iou,
                lr,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&row)?)?;
            }
            if log {
                println!(
                    "epoch {:>3}  loss {:.4}  val_acc {:.4}  val_iou {:.4}  lr {:e}",
                    row.epoch, row.train_loss, row.val_acc, row.val_mean_iou, row.lr
                );
            }
            metrics.push(row);
        }
    }

    save_checkpoint(ckpt_path, model, cfg.epochs as u64)?;
    Ok(metrics)
}

/// One optimizer step over one batch; returns the batch loss.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    split: &LoadedSplit,
    idxs: &[usize],
    forced: Option<(usize, usize)>,
) -> Result<f64> {
    let (images, ids, gt) = assemble_batch(split, idxs);
    let opts = ForwardOpts {
        forced,
        ..ForwardOpts::default()
    };
    let (loss_val, mut grads) = {
        let mut g = Graph::new(&model.store, true);
        let out = forward_batch(model, &mut g, &images, &ids, &opts)?;
        let gt_t = g.tape.constant(vec![idxs.len(), 4], gt);
        let loss = total_loss(&mut g.tape, out.pred, gt_t).map_err(VgqcError::from)?;
        let loss_val = g.tape.data(loss)[0] as f64;
        if !loss_val.is_finite() {
            return Err(VgqcError::numeric(format!("loss is {loss_val}")));
        }
        let grads = g.tape.backward(loss).map_err(VgqcError::from)?;
        let owned: Vec<Option<Vec<f32>>> = model
            .store
            .ids()
            .map(|pid| {
                g.bound_id(pid)
                    .and_then(|tid| grads.get(tid))
                    .map(|s| s.to_vec())
            })
            .collect();
        (loss_val, owned)
    };
    clip_global_norm(&mut grads, CLIP_NORM)?;
    opt.step(&mut model.store, &grads)?;
    Ok(loss_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, SceneConfig};
    use crate::model::{build_model, ModelConfig, Pipeline};
    use crate::qcm::AttentionSource;
    use rand::Rng;

    fn words() -> Vec<String> {
        crate::data::query_words().iter().map(|s| s.to_string()).collect()
    }

    /// Small model over 32px images: downsample 16 leaves a 2x2 token grid.
    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::toy(words());
        cfg.image_size = 32;
        cfg.stage_channels = [2, 3, 4, 4];
        cfg.stage_strides = [1, 2, 2, 1];
        cfg.qcm_stages = vec![4];
        cfg.kcount = 2;
        cfg.attention_source = AttentionSource::Query;
        cfg.c_q = 8;
        cfg.c_v = 8;
        cfg.c_r = 8;
        cfg.text_layers = 1;
        cfg.enc_layers = 1;
        cfg.fusion_layers = 1;
        cfg.heads = 2;
        cfg.ffn_mult = 2;
        cfg.pipeline = Pipeline::Fusion;
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_dataset(dir: &Path, n_train: usize, n_val: usize) -> Dataset {
        let scene = SceneConfig {
            image_size: 32,
            ..SceneConfig::default()
        };
        build_dataset(900, n_train, n_val, 1, &scene, dir).unwrap();
        Dataset::open(dir).unwrap()
    }

    #[test]
    fn lr_schedule_decays_once_at_two_thirds() {
        assert_eq!(decay_epoch(30), 20);
        for e in 0..20 {
            assert_eq!(lr_at(1e-3, 30, e), 1e-3);
        }
        for e in 20..30 {
            assert_eq!(lr_at(1e-3, 30, e), 1e-3 * 0.1);
        }
        assert_eq!(decay_epoch(3), 2);
        assert_eq!(lr_at(1.0, 3, 1), 1.0);
        assert_eq!(lr_at(1.0, 3, 2), 0.1);
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&tmp.path().join("data"), 2, 1);
        let cfg = tiny_config();
        let mut model = build_model::<f32>(&cfg, 11).unwrap();
        let reference = build_model::<f32>(&cfg, 11).unwrap();

        let ckpt_path = tmp.path().join("init.ckpt");
        let tcfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let rows = train(&mut model, &data, &tcfg, &ckpt_path, None, false).unwrap();
        assert!(rows.is_empty());

        let ckpt = crate::checkpoint::load_checkpoint(&ckpt_path).unwrap();
        assert_eq!(ckpt.epoch, 0);
        let loaded = crate::checkpoint::model_from_checkpoint(&ckpt).unwrap();
        for pid in reference.store.ids() {
            let a = reference.store.get(pid).data();
            let b = loaded.store.get(pid).data();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_schedule() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&tmp.path().join("data"), 6, 3);
        let cfg = tiny_config();
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };

        let run = |tag: &str| {
            let ckpt = tmp.path().join(format!("{tag}.ckpt"));
            let log = tmp.path().join(format!("{tag}.jsonl"));
            let mut model = build_model::<f32>(&cfg, 5).unwrap();
            let rows = train(&mut model, &data, &tcfg, &ckpt, Some(&log), false).unwrap();
            (
                std::fs::read(&ckpt).unwrap(),
                std::fs::read(&log).unwrap(),
                rows,
            )
        };
        let (ckpt_a, log_a, rows) = run("a");
        let (ckpt_b, log_b, _) = run("b");
        assert_eq!(ckpt_a, ckpt_b);
        assert_eq!(log_a, log_b);

        assert_eq!(rows.len(), 3);
        for (e, row) in rows.iter().enumerate() {
            assert_eq!(row.epoch, e);
            assert_eq!(row.lr, lr_at(tcfg.lr, tcfg.epochs, e));
            assert!(row.train_loss.is_finite());
            assert!((0.0..=1.0).contains(&row.val_acc));
            assert!((0.0..=1.0).contains(&row.val_mean_iou));
        }

        let parsed: Vec<EpochMetrics> = String::from_utf8(log_a)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[2].epoch, 2);
    }

    #[test]
    fn single_sample_overfit_reaches_low_loss() {
        let mut cfg = tiny_config();
        cfg.image_size = 16;
        cfg.stage_strides = [1, 1, 1, 1];
        cfg.validate().unwrap();
        let mut model = build_model::<f32>(&cfg, 3).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let px: Vec<u8> = (0..16 * 16 * 3)
            .map(|_| rng.gen_range(0..=255u8))
            .collect();
        let split = LoadedSplit {
            image_size: 16,
            max_len: cfg.max_len,
            pixels: vec![px],
            token_ids: vec![model.vocab.tokenize("red circle", cfg.max_len).unwrap()],
            queries: vec!["red circle".into()],
            boxes: vec![BoxCwh::new(0.4, 0.55, 0.3, 0.2)],
        };

        let mut opt = AdamW::new(&model.store, 1e-2, 0.0);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = train_step(&mut model, &mut opt, &split, &[0], None).unwrap();
            if last < 0.05 {
                break;
            }
        }
        assert!(last < 0.05, "loss stuck at {last}");
    }

    #[test]
    fn untrained_accuracy_is_near_chance_and_eval_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&tmp.path().join("data"), 1, 40);
        let model = build_model::<f32>(&tiny_config(), 77).unwrap();

        let a = evaluate(&model, &data, "val", None).unwrap();
        assert_eq!(a.records.len(), 40);
        assert!(a.accuracy < 0.2, "untrained accuracy {}", a.accuracy);

        let b = evaluate(&model, &data, "val", None).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.mean_iou, b.mean_iou);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.pred, y.pred);
            assert_eq!(x.iou, y.iou);
        }
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&tmp.path().join("data"), 2, 1);
        let cfg = tiny_config();
        let mut model = build_model::<f32>(&cfg, 1).unwrap();
        let pid = model.store.by_name("head.fc2.w").unwrap();
        model.store.get_mut(pid).data_mut()[0] = f32::NAN;

        let tcfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = train(
            &mut model,
            &data,
            &tcfg,
            &tmp.path().join("x.ckpt"),
            None,
            false,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("epoch 0"), "missing diagnostics: {msg}");
    }

    #[test]
    fn bad_forced_kernel_is_rejected_before_training() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tiny_dataset(&tmp.path().join("data"), 2, 1);
        let mut model = build_model::<f32>(&tiny_config(), 1).unwrap();
        let tcfg = TrainConfig {
            epochs: 1,
            forced_kernel: Some((4, 9)),
            ..TrainConfig::default()
        };
        let err = train(
            &mut model,
            &data,
            &tcfg,
            &tmp.path().join("x.ckpt"),
            None,
            false,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
