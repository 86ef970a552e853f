//! Post-hoc inspection of checkpoints: kernel mixing weights, aggregated
//! kernel geometry, channel-averaged feature maps, REG attention grids, and
//! the forced-kernel accuracy sweep. Everything emits plain data (CSV via the
//! helpers below); plotting is left to external tools.

use crate::data::Dataset;
use crate::model::{forward_batch, ForwardOpts, Model, Pipeline};
use crate::params::Graph;
use crate::qcm::AttentionSource;
use crate::tensor::Tensor;
use crate::train::{evaluate_loaded, load_split};
use crate::{Result, VgqcError};

/// Mixing weights of one query at one stage.
#[derive(Clone, Debug)]
pub struct AttentionRow {
    pub query: String,
    /// Query with out-of-vocabulary words replaced by `[UNK]`.
    pub resolved: String,
    pub flagged: bool,
    pub stage: usize,
    pub alpha: Vec<f64>,
}

/// Channel-averaged final feature map for one query.
#[derive(Clone, Debug)]
pub struct FeatureMapSummary {
    pub query: String,
    pub h: usize,
    pub w: usize,
    /// Row-major grid, mean of the backbone output over channels.
    pub grid: Vec<f64>,
}

/// Head-averaged REG attention over visual positions at one layer.
#[derive(Clone, Debug)]
pub struct RegAttention {
    pub layer: usize,
    pub h: usize,
    pub w: usize,
    pub grid: Vec<f64>,
}

/// One line of the forced-kernel sweep table.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub mode: String,
    pub accuracy: f64,
    pub mean_iou: f64,
}

/// Maps "stage1".."stage4" to the stage index.
pub fn parse_block_id(s: &str) -> Result<usize> {
    match s {
        "stage1" => Ok(1),
        "stage2" => Ok(2),
        "stage3" => Ok(3),
        "stage4" => Ok(4),
        other => Err(VgqcError::validation(format!(
            "unknown block id '{other}' (expected stage1..stage4)"
        ))),
    }
}

pub fn block_name(stage: usize) -> String {
    format!("stage{stage}")
}

fn qcm_block<'m>(model: &'m Model<f32>, stage: usize) -> Result<&'m crate::qcm::QcmBlockP> {
    model.backbone.qcm_block(stage).ok_or_else(|| {
        VgqcError::validation(format!(
            "{} has no query-conditioned block",
            block_name(stage)
        ))
    })
}

fn reject_featmap_source(model: &Model<f32>, what: &str) -> Result<()> {
    if model.config.attention_source == AttentionSource::Featmap {
        return Err(VgqcError::validation(format!(
            "{what} needs mixing weights that depend only on the query, but this \
             checkpoint derives them from the image; use the feature-map summary instead"
        )));
    }
    Ok(())
}

fn resolve_words(model: &Model<f32>, query: &str) -> Result<(String, bool)> {
    let words: Vec<&str> = query.split_whitespace().collect();
    if words.is_empty() {
        return Err(VgqcError::validation("query has no words"));
    }
    let mut flagged = false;
    let resolved: Vec<&str> = words
        .iter()
        .map(|w| {
            if model.vocab.is_known(w) {
                *w
            } else {
                flagged = true;
                "[UNK]"
            }
        })
        .collect();
    Ok((resolved.join(" "), flagged))
}

/// Mixing weights per query-conditioned stage, from the text branch alone
/// (no image is involved; the featmap source is rejected).
pub fn stage_alphas(model: &Model<f32>, query: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    reject_featmap_source(model, "attention dump")?;
    let mut g = Graph::new(&model.store, false);
    let fq = match model.config.attention_source {
        AttentionSource::Query => {
            let ids = model.vocab.tokenize(query, model.config.max_len)?;
            let text = model.text.forward(&mut g, &ids).map_err(VgqcError::from)?;
            Some(text.f_query)
        }
        _ => None,
    };
    // Never read by the query or learnable sources.
    let dummy = g.tape.constant(vec![1, 1, 1, 1], vec![0.0]);
    let mut out = Vec::new();
    for stage in model.backbone.qcm_stage_ids() {
        let block = qcm_block(model, stage)?;
        let a = block
            .alpha(&mut g, fq, dummy, 1, None)
            .map_err(VgqcError::from)?;
        out.push((stage, g.tape.data(a).iter().map(|&v| v as f64).collect()));
    }
    Ok(out)
}

/// One row per (query, query-conditioned stage).
pub fn dump_attention(model: &Model<f32>, queries: &[String]) -> Result<Vec<AttentionRow>> {
    if model.backbone.qcm_stage_ids().is_empty() {
        return Err(VgqcError::validation(
            "model has no query-conditioned blocks",
        ));
    }
    let mut rows = Vec::new();
    for q in queries {
        let (resolved, flagged) = resolve_words(model, q)?;
        for (stage, alpha) in stage_alphas(model, q)? {
            rows.push(AttentionRow {
                query: q.clone(),
                resolved: resolved.clone(),
                flagged,
                stage,
                alpha,
            });
        }
    }
    Ok(rows)
}

/// Flattened sum of candidate kernels weighted by `alpha`, in f64.
pub fn mixed_kernel(model: &Model<f32>, stage: usize, alpha: &[f64]) -> Result<Vec<f64>> {
    let block = qcm_block(model, stage)?;
    if alpha.len() != block.kcount() {
        return Err(VgqcError::validation(format!(
            "alpha has {} entries for K = {}",
            alpha.len(),
            block.kcount()
        )));
    }
    let n = model.store.get(block.candidates[0]).data().len();
    let mut out = vec![0.0f64; n];
    for (k, &a) in alpha.iter().enumerate() {
        for (o, &c) in out.iter_mut().zip(model.store.get(block.candidates[k]).data()) {
            *o += a * c as f64;
        }
    }
    Ok(out)
}

/// `1 - cos(a, b)`; identical buffers short-circuit to exactly 0.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len());
    if a == b {
        if a.iter().all(|&v| v == 0.0) {
            return Err(VgqcError::numeric("aggregated kernel has zero norm"));
        }
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(VgqcError::numeric("aggregated kernel has zero norm"));
    }
    Ok(1.0 - dot / (na * nb))
}

fn alpha_at_stage(model: &Model<f32>, query: &str, stage: usize) -> Result<Vec<f64>> {
    stage_alphas(model, query)?
        .into_iter()
        .find(|(s, _)| *s == stage)
        .map(|(_, a)| a)
        .ok_or_else(|| {
            VgqcError::validation(format!(
                "{} has no query-conditioned block",
                block_name(stage)
            ))
        })
}

/// Cosine distance between the aggregated kernels two queries would use at
/// one stage.
pub fn kernel_cosine_distance(
    model: &Model<f32>,
    query_a: &str,
    query_b: &str,
    stage: usize,
) -> Result<f64> {
    let wa = mixed_kernel(model, stage, &alpha_at_stage(model, query_a, stage)?)?;
    let wb = mixed_kernel(model, stage, &alpha_at_stage(model, query_b, stage)?)?;
    cosine_distance(&wa, &wb)
}

/// Cosine distance between a query's aggregated kernel and the equal-weight
/// reference (the mean of the candidates). Always 0 when K = 1.
pub fn reference_kernel_distance(model: &Model<f32>, query: &str, stage: usize) -> Result<f64> {
    let block = qcm_block(model, stage)?;
    let k = block.kcount();
    if k == 1 {
        return Ok(0.0);
    }
    let wq = mixed_kernel(model, stage, &alpha_at_stage(model, query, stage)?)?;
    let wref = mixed_kernel(model, stage, &vec![1.0 / k as f64; k])?;
    cosine_distance(&wq, &wref)
}

fn image_tensor(model: &Model<f32>, image: &[f32]) -> Result<Tensor<f32>> {
    let s = model.config.image_size;
    if image.len() != 3 * s * s {
        return Err(VgqcError::validation(format!(
            "image has {} values, config wants 3x{s}x{s} = {}",
            image.len(),
            3 * s * s
        )));
    }
    Ok(Tensor::new(vec![1, 3, s, s], image.to_vec()))
}

/// Channel mean of the final backbone map for each query on one image.
pub fn feature_map_summary(
    model: &Model<f32>,
    image: &[f32],
    queries: &[String],
) -> Result<Vec<FeatureMapSummary>> {
    let images = image_tensor(model, image)?;
    let opts = ForwardOpts {
        collect: true,
        ..ForwardOpts::default()
    };
    let mut out = Vec::new();
    for q in queries {
        let ids = model.vocab.tokenize(q, model.config.max_len)?;
        let mut g = Graph::new(&model.store, false);
        let fwd = forward_batch(model, &mut g, &images, &ids, &opts)?;
        let inter = fwd.inter.expect("collect flag set");
        let shape = g.tape.shape(inter.feat_map).to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let data = g.tape.data(inter.feat_map);
        let mut grid = vec![0.0f64; h * w];
        for ci in 0..c {
            for (cell, &v) in grid.iter_mut().zip(&data[ci * h * w..(ci + 1) * h * w]) {
                *cell += v as f64 / c as f64;
            }
        }
        out.push(FeatureMapSummary {
            query: q.clone(),
            h,
            w,
            grid,
        });
    }
    Ok(out)
}

/// Per-layer REG-to-visual attention, averaged over heads, as spatial grids.
/// Uses the fusion layers when present, the visual encoder's REG otherwise.
pub fn reg_attention_maps(
    model: &Model<f32>,
    image: &[f32],
    query: &str,
) -> Result<Vec<RegAttention>> {
    let images = image_tensor(model, image)?;
    let ids = model.vocab.tokenize(query, model.config.max_len)?;
    let opts = ForwardOpts {
        collect: true,
        ..ForwardOpts::default()
    };
    let mut g = Graph::new(&model.store, false);
    let fwd = forward_batch(model, &mut g, &images, &ids, &opts)?;
    let inter = fwd.inter.expect("collect flag set");

    let layers = match model.config.pipeline {
        Pipeline::Fusion => &inter.fusion_attn,
        Pipeline::NoFusion => &inter.visual_attn,
    };
    let side = model.config.image_size / model.config.downsample();
    let nv = side * side;
    let mut out = Vec::new();
    for (li, &attn) in layers.iter().enumerate() {
        let shape = g.tape.shape(attn).to_vec();
        let (heads, t) = (shape[1], shape[2]);
        let avg = crate::layers::mean_heads(g.tape.data(attn), 1, heads, t, t);
        // REG sits at sequence position 0, visual tokens right after it.
        let grid: Vec<f64> = avg[1..1 + nv].to_vec();
        out.push(RegAttention {
            layer: li,
            h: side,
            w: side,
            grid,
        });
    }
    Ok(out)
}

/// Evaluates a split once normally and once per forced candidate kernel.
pub fn force_kernel_sweep(
    model: &Model<f32>,
    data: &Dataset,
    split: &str,
    stage: usize,
) -> Result<Vec<SweepRow>> {
    let k = qcm_block(model, stage)?.kcount();
    let loaded = load_split(data, &model.vocab, model.config.max_len, split)?;
    if loaded.is_empty() {
        return Err(VgqcError::validation(format!("split '{split}' is empty")));
    }
    let mut rows = Vec::with_capacity(k + 1);
    let all = evaluate_loaded(model, &loaded, None)?;
    rows.push(SweepRow {
        mode: "all".into(),
        accuracy: all.accuracy,
        mean_iou: all.mean_iou,
    });
    for i in 0..k {
        let forced = evaluate_loaded(model, &loaded, Some((stage, i)))?;
        rows.push(SweepRow {
            mode: format!("kernel{i}"),
            accuracy: forced.accuracy,
            mean_iou: forced.mean_iou,
        });
    }
    Ok(rows)
}

/// Six-decimal float format shared by all CSV emitters.
pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with one row per (query, stage): query, resolved, flagged, block, alphas.
pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let k = rows.first().map_or(0, |r| r.alpha.len());
    let mut s = String::from("query,resolved,flagged,block");
    for i in 0..k {
        s.push_str(&format!(",alpha{i}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}",
            csv_escape(&r.query),
            csv_escape(&r.resolved),
            r.flagged,
            block_name(r.stage)
        ));
        for a in &r.alpha {
            s.push(',');
            s.push_str(&fmt6(*a));
        }
        s.push('\n');
    }
    s
}

/// CSV grid with a column-index header; one line per grid row.
pub fn grid_csv(h: usize, w: usize, grid: &[f64]) -> String {
    assert_eq!(grid.len(), h * w);
    let mut s = (0..w)
        .map(|x| format!("c{x}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for y in 0..h {
        let row = (0..w)
            .map(|x| fmt6(grid[y * w + x]))
            .collect::<Vec<_>>()
            .join(",");
        s.push_str(&row);
        s.push('\n');
    }
    s
}

/// CSV table for the forced-kernel sweep.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("mode,accuracy,mean_iou\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{}\n",
            r.mode,
            fmt6(r.accuracy),
            fmt6(r.mean_iou)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, SceneConfig};
    use crate::model::{build_model, ModelConfig};

    fn words() -> Vec<String> {
        crate::data::query_words().iter().map(|s| s.to_string()).collect()
    }

    fn tiny_config(source: AttentionSource) -> ModelConfig {
        let mut cfg = ModelConfig::toy(words());
        cfg.image_size = 32;
        cfg.stage_channels = [2, 3, 4, 4];
        cfg.stage_strides = [1, 2, 2, 1];
        cfg.qcm_stages = vec![3, 4];
        cfg.kcount = 3;
        cfg.attention_source = source;
        cfg.c_q = 8;
        cfg.c_v = 8;
        cfg.c_r = 8;
        cfg.text_layers = 1;
        cfg.enc_layers = 1;
        cfg.fusion_layers = 1;
        cfg.heads = 2;
        cfg.ffn_mult = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn rand_image(seed: u64, s: usize) -> Vec<f32> {
        let mut x = seed;
        (0..3 * s * s)
            .map(|_| {
                x = crate::data::splitmix64_at(x, 1);
                (x % 256) as f32 / 255.0
            })
            .collect()
    }

    #[test]
    fn attention_rows_are_simplex_and_repeatable() {
        let model = build_model::<f32>(&tiny_config(AttentionSource::Query), 9).unwrap();
        let qs = vec!["red circle".to_string(), "blue square".to_string()];
        let a = dump_attention(&model, &qs).unwrap();
        let b = dump_attention(&model, &qs).unwrap();
        assert_eq!(a.len(), 4);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.alpha, rb.alpha);
            let sum: f64 = ra.alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(ra.alpha.iter().all(|&v| v >= 0.0));
            assert!(!ra.flagged);
        }
        // Distinct queries get distinct weights under the query source.
        assert_ne!(a[0].alpha, a[2].alpha);
    }

    #[test]
    fn learnable_source_shares_alpha_across_queries() {
        let model = build_model::<f32>(&tiny_config(AttentionSource::Learnable), 9).unwrap();
        let qs = vec!["red circle".to_string(), "large yellow triangle".to_string()];
        let rows = dump_attention(&model, &qs).unwrap();
        assert_eq!(rows[0].alpha, rows[2].alpha);
        assert_eq!(rows[1].alpha, rows[3].alpha);
    }

    #[test]
    fn unknown_words_are_flagged_and_featmap_source_is_rejected() {
        let model = build_model::<f32>(&tiny_config(AttentionSource::Query), 9).unwrap();
        let rows = dump_attention(&model, &["red dragon".to_string()]).unwrap();
        assert!(rows[0].flagged);
        assert_eq!(rows[0].resolved, "red [UNK]");

        let fm = build_model::<f32>(&tiny_config(AttentionSource::Featmap), 9).unwrap();
        let err = dump_attention(&fm, &["red circle".to_string()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn kernel_distance_is_zero_on_self_and_symmetric() {
        let model = build_model::<f32>(&tiny_config(AttentionSource::Query), 10).unwrap();
        let d_self = kernel_cosine_distance(&model, "red circle", "red circle", 4).unwrap();
        assert_eq!(d_self, 0.0);

        let ab = kernel_cosine_distance(&model, "red circle", "blue square", 4).unwrap();
        let ba = kernel_cosine_distance(&model, "blue square", "red circle", 4).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=2.0).contains(&ab));

        let err = kernel_cosine_distance(&model, "red circle", "blue square", 1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn one_hot_mixes_on_orthogonal_candidates_are_maximally_distant() {
        let mut model = build_model::<f32>(&tiny_config(AttentionSource::Query), 11).unwrap();
        let cands = model.backbone.qcm_block(4).unwrap().candidates.clone();
        for (i, pid) in cands.iter().enumerate() {
            let t = model.store.get_mut(*pid);
            for v in t.data_mut().iter_mut() {
                *v = 0.0;
            }
            t.data_mut()[i] = 1.0;
        }
        let e0 = mixed_kernel(&model, 4, &[1.0, 0.0, 0.0]).unwrap();
        let e1 = mixed_kernel(&model, 4, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cosine_distance(&e0, &e1).unwrap(), 1.0);

        let zero = vec![0.0; e0.len()];
        assert_eq!(cosine_distance(&zero, &e0).unwrap_err().exit_code(), 3);
        assert_eq!(cosine_distance(&zero, &zero).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn reference_distance_is_zero_for_uniform_alpha_and_k1() {
        let mut cfg = tiny_config(AttentionSource::Query);
        cfg.kcount = 2;
        let mut model = build_model::<f32>(&cfg, 12).unwrap();
        // Zeroed scoring layer makes the softmax exactly uniform.
        for name in ["backbone.stage4.conv1.phi2.w", "backbone.stage4.conv1.phi2.b"] {
            let pid = model.store.by_name(name).unwrap();
            for v in model.store.get_mut(pid).data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        assert_eq!(reference_kernel_distance(&model, "red circle", 4).unwrap(), 0.0);

        let mut k1 = tiny_config(AttentionSource::Query);
        k1.kcount = 1;
        let m1 = build_model::<f32>(&k1, 12).unwrap();
        assert_eq!(reference_kernel_distance(&m1, "red circle", 4).unwrap(), 0.0);
    }

    #[test]
    fn reference_distance_grows_toward_one_hot() {
        let model = build_model::<f32>(&tiny_config(AttentionSource::Query), 13).unwrap();
        let k = 3;
        let uniform = vec![1.0 / k as f64; k];
        let wref = mixed_kernel(&model, 4, &uniform).unwrap();
        let mut prev = -1.0;
        for step in 0..=4 {
            let t = step as f64 / 4.0;
            let alpha: Vec<f64> = (0..k)
                .map(|i| (1.0 - t) / k as f64 + if i == 0 { t } else { 0.0 })
                .collect();
            let w = mixed_kernel(&model, 4, &alpha).unwrap();
            let d = cosine_distance(&w, &wref).unwrap();
            assert!(d > prev, "distance not increasing at t = {t}");
            prev = d;
        }
    }

    #[test]
    fn feature_map_summary_is_query_invariant_for_learnable_source() {
        let cfg = tiny_config(AttentionSource::Learnable);
        let model = build_model::<f32>(&cfg, 14).unwrap();
        let img = rand_image(3, cfg.image_size);
        let qs = vec![
            "red circle".to_string(),
            "blue square".to_string(),
            "red circle".to_string(),
        ];
        let maps = feature_map_summary(&model, &img, &qs).unwrap();
        let side = cfg.image_size / cfg.downsample();
        for m in &maps {
            assert_eq!((m.h, m.w), (side, side));
            assert!(m.grid.iter().all(|v| v.is_finite()));
        }
        let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&maps[0].grid), bits(&maps[1].grid));
        assert_eq!(bits(&maps[0].grid), bits(&maps[2].grid));
    }

    #[test]
    fn reg_attention_grids_cover_all_layers_in_both_pipelines() {
        for pipeline in [Pipeline::Fusion, Pipeline::NoFusion] {
            let mut cfg = tiny_config(AttentionSource::Query);
            cfg.pipeline = pipeline;
            if pipeline == Pipeline::NoFusion {
                cfg.fusion_layers = 0;
            }
            cfg.validate().unwrap();
            let model = build_model::<f32>(&cfg, 15).unwrap();
            let img = rand_image(8, cfg.image_size);
            let maps = reg_attention_maps(&model, &img, "red circle").unwrap();
            let expect_layers = match pipeline {
                Pipeline::Fusion => cfg.fusion_layers,
                Pipeline::NoFusion => cfg.enc_layers,
            };
            assert_eq!(maps.len(), expect_layers);
            let side = cfg.image_size / cfg.downsample();
            for m in &maps {
                assert_eq!((m.h, m.w), (side, side));
                let mass: f64 = m.grid.iter().sum();
                assert!(m.grid.iter().all(|&v| v >= 0.0));
                assert!(mass <= 1.0 + 1e-6, "REG visual mass {mass}");
            }
        }
    }

    #[test]
    fn force_sweep_has_all_row_matching_plain_evaluate() {
        let tmp = tempfile::tempdir().unwrap();
        let scene = SceneConfig {
            image_size: 32,
            ..SceneConfig::default()
        };
        build_dataset(41, 1, 10, 1, &scene, tmp.path()).unwrap();
        let data = Dataset::open(tmp.path()).unwrap();
        let cfg = tiny_config(AttentionSource::Query);
        let model = build_model::<f32>(&cfg, 16).unwrap();

        let rows = force_kernel_sweep(&model, &data, "val", 4).unwrap();
        assert_eq!(rows.len(), cfg.kcount + 1);
        assert_eq!(rows[0].mode, "all");
        let plain = crate::train::evaluate(&model, &data, "val", None).unwrap();
        assert_eq!(rows[0].accuracy, plain.accuracy);
        assert_eq!(rows[0].mean_iou, plain.mean_iou);
        for r in &rows {
            assert!(r.accuracy.is_finite() && r.mean_iou.is_finite());
        }
        assert!(force_kernel_sweep(&model, &data, "val", 2).is_err());
    }

    #[test]
    fn block_ids_parse_and_csv_emitters_format_six_decimals() {
        assert_eq!(parse_block_id("stage1").unwrap(), 1);
        assert_eq!(parse_block_id("stage4").unwrap(), 4);
        assert!(parse_block_id("stage0").is_err());
        assert!(parse_block_id("stage5").is_err());
        assert!(parse_block_id("resnet3").is_err());

        let rows = vec![AttentionRow {
            query: "red circle".into(),
            resolved: "red circle".into(),
            flagged: false,
            stage: 4,
            alpha: vec![0.25, 0.75],
        }];
        let csv = attention_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "query,resolved,flagged,block,alpha0,alpha1");
        assert_eq!(
            lines.next().unwrap(),
            "red circle,red circle,false,stage4,0.250000,0.750000"
        );

        let g = grid_csv(2, 2, &[0.0, 0.5, 1.0, 0.125]);
        assert_eq!(g, "c0,c1\n0.000000,0.500000\n1.000000,0.125000\n");

        let s = sweep_csv(&[SweepRow {
            mode: "all".into(),
            accuracy: 0.9,
            mean_iou: 0.5,
        }]);
        assert_eq!(s, "mode,accuracy,mean_iou\nall,0.900000,0.500000\n");
    }
}
