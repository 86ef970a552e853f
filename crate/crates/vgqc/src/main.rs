//! Command-line entry point: dataset generation, training, evaluation, and
//! checkpoint analysis. Exit codes: 0 success, 2 invalid input, 3 numeric
//! failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use vgqc::analysis;
use vgqc::checkpoint::{load_checkpoint, model_from_checkpoint};
use vgqc::data::{build_dataset, Dataset, SceneConfig};
use vgqc::model::{build_model, Model, ModelConfig, Pipeline};
use vgqc::qcm::AttentionSource;
use vgqc::train::{evaluate, train, TrainConfig};
use vgqc::{Result, VgqcError};

#[derive(Parser)]
#[command(name = "vgqc", version, about = "Query-conditioned visual grounding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset with train/val/test splits.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a JSONL metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Inspect a checkpoint: mixing weights, kernels, feature maps.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: usize,
    #[arg(long)]
    n_val: usize,
    #[arg(long)]
    n_test: usize,
    /// Scene config overrides as JSON, e.g. '{"image_size": 64}'.
    #[arg(long)]
    config: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Toy,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Fusion,
    Nofusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Query,
    Learnable,
    Featmap,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    preset: PresetArg,
    #[arg(long, value_enum, default_value = "fusion")]
    pipeline: PipelineArg,
    #[arg(long, value_enum, default_value = "query")]
    attention: AttentionArg,
    /// Comma-separated stage ids that get query-conditioned kernels;
    /// "none" for the static baseline.
    #[arg(long, default_value = "1,2,3,4")]
    qcm_stages: String,
    /// Candidate kernels per query-conditioned block.
    #[arg(long = "K", default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Fusion depth override (ignored by the nofusion pipeline).
    #[arg(long)]
    fusion_layers: Option<usize>,
    /// Metrics JSONL path; defaults to the checkpoint path + ".metrics.jsonl".
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzeMode {
    /// Kernel mixing weights per query and block.
    Attention,
    /// Pairwise aggregated-kernel cosine distances between queries.
    Kernels,
    /// Distance of each query's aggregated kernel to the equal-weight mix.
    RefKernel,
    /// Channel-averaged final feature map per query on one image.
    Featmap,
    /// Per-layer REG-to-visual attention grids.
    RegAttn,
    /// Accuracy with each candidate kernel forced in one block.
    ForceKernel,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    mode: AnalyzeMode,
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset dir; needed for featmap, reg-attn, and force-kernel.
    #[arg(long)]
    data: Option<PathBuf>,
    /// File with one query per line.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Block id, stage1..stage4; defaults to the last query-conditioned one.
    #[arg(long)]
    block: Option<String>,
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Sample index within the split used as the probe image.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Analyze(a) => run_analyze(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let config: SceneConfig = match &a.config {
        Some(json) => serde_json::from_str(json)?,
        None => SceneConfig::default(),
    };
    let manifest = build_dataset(a.seed, a.n_train, a.n_val, a.n_test, &config, &a.out)?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_qcm_stages(s: &str) -> Result<Vec<usize>> {
    let t = s.trim();
    if t.is_empty() || t == "none" {
        return Ok(Vec::new());
    }
    t.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| VgqcError::validation(format!("bad stage id '{p}' in --qcm-stages")))
        })
        .collect()
}

fn run_train(a: TrainArgs) -> Result<()> {
    let data = Dataset::open(&a.data)?;
    let words = data.vocab()?.words().to_vec();

    let mut mcfg = match a.preset {
        PresetArg::Toy => ModelConfig::toy(words),
        PresetArg::Paper => ModelConfig::paper(words),
    };
    mcfg.pipeline = match a.pipeline {
        PipelineArg::Fusion => Pipeline::Fusion,
        PipelineArg::Nofusion => Pipeline::NoFusion,
    };
    mcfg.attention_source = match a.attention {
        AttentionArg::Query => AttentionSource::Query,
        AttentionArg::Learnable => AttentionSource::Learnable,
        AttentionArg::Featmap => AttentionSource::Featmap,
    };
    mcfg.qcm_stages = parse_qcm_stages(&a.qcm_stages)?;
    mcfg.kcount = a.k;
    mcfg.image_size = data.manifest.config.image_size;
    if let Some(fl) = a.fusion_layers {
        mcfg.fusion_layers = fl;
    }
    mcfg.validate()?;

    let mut tcfg = match a.preset {
        PresetArg::Toy => TrainConfig::default(),
        PresetArg::Paper => TrainConfig::paper(),
    };
    tcfg.seed = a.seed;
    if let Some(v) = a.epochs {
        tcfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        tcfg.lr = v;
    }
    if let Some(v) = a.weight_decay {
        tcfg.weight_decay = v;
    }

    let mut model = build_model::<f32>(&mcfg, a.seed)?;
    println!(
        "model: {} parameters, pipeline {:?}, attention {:?}, stages {:?}, K {}",
        model.store.scalar_count(),
        mcfg.pipeline,
        mcfg.attention_source,
        mcfg.qcm_stages,
        mcfg.kcount
    );

    let metrics = a.metrics.unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let rows = train(&mut model, &data, &tcfg, &a.out, Some(&metrics), true)?;
    if let Some(last) = rows.last() {
        println!(
            "done: val_acc {:.4}, val_mean_iou {:.4}",
            last.val_acc, last.val_mean_iou
        );
    }
    println!("checkpoint: {}", a.out.display());
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let ckpt = load_checkpoint(path)?;
    model_from_checkpoint(&ckpt)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    let report = evaluate(&model, &data, &a.split, None)?;
    println!(
        "{}",
        serde_json::json!({
            "split": a.split,
            "n": report.records.len(),
            "accuracy": report.accuracy,
            "mean_iou": report.mean_iou,
        })
    );
    Ok(())
}

fn read_queries(path: Option<&Path>, what: &str) -> Result<Vec<String>> {
    let path = path.ok_or_else(|| {
        VgqcError::validation(format!("analyze {what} needs --queries FILE"))
    })?;
    let text = std::fs::read_to_string(path)?;
    let queries: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if queries.is_empty() {
        return Err(VgqcError::validation(format!(
            "{} has no queries",
            path.display()
        )));
    }
    Ok(queries)
}

fn open_data(path: Option<&Path>, what: &str) -> Result<Dataset> {
    let path =
        path.ok_or_else(|| VgqcError::validation(format!("analyze {what} needs --data DIR")))?;
    Dataset::open(path)
}

fn pick_block(model: &Model<f32>, arg: Option<&str>) -> Result<usize> {
    match arg {
        Some(s) => analysis::parse_block_id(s),
        None => model
            .backbone
            .qcm_stage_ids()
            .last()
            .copied()
            .ok_or_else(|| VgqcError::validation("model has no query-conditioned blocks")),
    }
}

fn probe_image(data: &Dataset, split: &str, index: usize) -> Result<(Vec<f32>, String)> {
    let entries = data.manifest.split(split)?;
    let entry = entries.get(index).ok_or_else(|| {
        VgqcError::validation(format!(
            "index {index} out of range for split '{split}' ({} samples)",
            entries.len()
        ))
    })?;
    Ok((data.load_image(entry)?, entry.query.clone()))
}

fn write_csv(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn run_analyze(a: AnalyzeArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    match a.mode {
        AnalyzeMode::Attention => {
            let queries = read_queries(a.queries.as_deref(), "attention")?;
            let rows = analysis::dump_attention(&model, &queries)?;
            write_csv(&a.out, "attention.csv", &analysis::attention_csv(&rows))?;
        }
        AnalyzeMode::Kernels => {
            let queries = read_queries(a.queries.as_deref(), "kernels")?;
            let stage = pick_block(&model, a.block.as_deref())?;
            let mut body = String::from("query_a,query_b,block,cosine_distance\n");
            for i in 0..queries.len() {
                for j in i + 1..queries.len() {
                    let d =
                        analysis::kernel_cosine_distance(&model, &queries[i], &queries[j], stage)?;
                    body.push_str(&format!(
                        "{},{},{},{}\n",
                        queries[i],
                        queries[j],
                        analysis::block_name(stage),
                        analysis::fmt6(d)
                    ));
                }
            }
            write_csv(&a.out, "kernel_distances.csv", &body)?;
        }
        AnalyzeMode::RefKernel => {
            let queries = read_queries(a.queries.as_deref(), "ref-kernel")?;
            let stage = pick_block(&model, a.block.as_deref())?;
            let mut body = String::from("query,block,cosine_distance\n");
            for q in &queries {
                let d = analysis::reference_kernel_distance(&model, q, stage)?;
                body.push_str(&format!(
                    "{},{},{}\n",
                    q,
                    analysis::block_name(stage),
                    analysis::fmt6(d)
                ));
            }
            write_csv(&a.out, "ref_kernel.csv", &body)?;
        }
        AnalyzeMode::Featmap => {
            let queries = read_queries(a.queries.as_deref(), "featmap")?;
            let data = open_data(a.data.as_deref(), "featmap")?;
            let (image, _) = probe_image(&data, &a.split, a.index)?;
            let maps = analysis::feature_map_summary(&model, &image, &queries)?;
            for (i, m) in maps.iter().enumerate() {
                let name = format!("featmap_q{i}.csv");
                let mut body = format!("# query: {}\n", m.query);
                body.push_str(&analysis::grid_csv(m.h, m.w, &m.grid));
                write_csv(&a.out, &name, &body)?;
            }
        }
        AnalyzeMode::RegAttn => {
            let data = open_data(a.data.as_deref(), "reg-attn")?;
            let (image, sample_query) = probe_image(&data, &a.split, a.index)?;
            let queries = match a.queries.as_deref() {
                Some(p) => read_queries(Some(p), "reg-attn")?,
                None => vec![sample_query],
            };
            for (qi, q) in queries.iter().enumerate() {
                let maps = analysis::reg_attention_maps(&model, &image, q)?;
                for m in &maps {
                    let name = format!("reg_attn_q{qi}_layer{}.csv", m.layer);
                    let mut body = format!("# query: {q}\n");
                    body.push_str(&analysis::grid_csv(m.h, m.w, &m.grid));
                    write_csv(&a.out, &name, &body)?;
                }
            }
        }
        AnalyzeMode::ForceKernel => {
            let data = open_data(a.data.as_deref(), "force-kernel")?;
            let stage = pick_block(&model, a.block.as_deref())?;
            let rows = analysis::force_kernel_sweep(&model, &data, &a.split, stage)?;
            write_csv(&a.out, "force_kernel.csv", &analysis::sweep_csv(&rows))?;
        }
    }
    Ok(())
}
