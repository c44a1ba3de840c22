//! Command-line surface binding the library into reproducible workflows.
//!
//! Every command is a pure function of its input files, flags and seeds; the
//! data artifacts it writes are byte-identical across reruns (the run
//! manifest additionally records a wall-clock timestamp). Flags may also be
//! supplied through a JSON config file (`--config`), keyed by command name;
//! explicit flags win over the file, the file wins over built-in defaults.
//!
//! Exit codes: 0 success, 1 config/validation/IO, 2 numerical abort,
//! 3 gradient-check failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::ablation::{ablation_csv, run_ablation};
use crate::dataset::{
    build_fingerprint, gen_masks, gen_synthetic, load_csv, read_fingerprint, write_fingerprint,
    write_labels_csv, write_matrix_csv, MultiViewDataset,
};
use crate::evaluation::{clustering_metrics, consensus_embedding, infer_missing_views, kmeans};
use crate::model::ModelParams;
use crate::neural::grad_check;
use crate::objective::{ObjectiveConfig, ObjectiveKind, PriorMode, SampleNoise};
use crate::permutation::make_bundle;
use crate::rng::Rng;
use crate::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "permvae",
    about = "Incomplete multi-view representation learning with permutation-prior VAEs",
    version
)]
pub struct Cli {
    /// JSON config file keyed by command name; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic clustered multi-view dataset (CSV per view).
    GenData(GenDataArgs),
    /// Generate missing-view masks and the permutation fingerprint file.
    GenMasks(GenMasksArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Cluster the consensus embedding and report ACC/NMI/ARI.
    Eval(EvalArgs),
    /// Reconstruct all views for every sample from its observed views.
    Infer(InferArgs),
    /// Finite-difference check of the objective gradients on a small model.
    Gradcheck(GradcheckArgs),
    /// Train over a grid of prior modes and seeds; emit a summary CSV.
    Ablate(AblateArgs),
}

/// Run the CLI and return the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let file = match cli.config.as_deref().map(ConfigFile::load).transpose() {
        Ok(file) => file.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match execute(cli.command, &file) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn execute(command: Command, file: &ConfigFile) -> Result<i32> {
    match command {
        Command::GenData(args) => cmd_gen_data(args, file),
        Command::GenMasks(args) => cmd_gen_masks(args, file),
        Command::Train(args) => cmd_train(args, file),
        Command::Eval(args) => cmd_eval(args, file),
        Command::Infer(args) => cmd_infer(args, file),
        Command::Gradcheck(args) => cmd_gradcheck(args, file),
        Command::Ablate(args) => cmd_ablate(args, file),
    }
}

// ---------------------------------------------------------------------------
// config file

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(rename = "gen-data")]
    gen_data: GenDataFile,
    #[serde(rename = "gen-masks")]
    gen_masks: GenMasksFile,
    train: TrainFile,
    eval: EvalFile,
    infer: InferFile,
    gradcheck: GradcheckFile,
    ablate: AblateFile,
}

impl ConfigFile {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(serde::Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_digest: String,
    seed: u64,
    timestamp_unix: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn canonical_json(value: &serde_json::Value, out: &mut String) {
    match value {
        serde_json::Value::Object(map) => {
            let sorted: BTreeMap<_, _> = map.iter().collect();
            out.push('{');
            for (i, (key, v)) in sorted.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{key:?}:"));
                canonical_json(v, out);
            }
            out.push('}');
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_json(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// FNV-1a over the canonical (key-sorted) JSON encoding of the resolved
/// config, so the digest is stable under field reordering.
fn config_digest<T: serde::Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let mut canonical = String::new();
    canonical_json(&value, &mut canonical);
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in canonical.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{hash:016x}"))
}

fn write_manifest<T: serde::Serialize>(
    command: &str,
    config: &T,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
    path: &Path,
) -> Result<()> {
    let manifest = RunManifest {
        command,
        config_digest: config_digest(config)?,
        seed,
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// shared data-directory helpers

fn view_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for i in 1.. {
        let path = dir.join(format!("view_{i}.csv"));
        if path.exists() {
            paths.push(path);
        } else {
            break;
        }
    }
    if paths.len() < 2 {
        return Err(Error::Config(format!(
            "{} holds {} view_<i>.csv files; need at least 2",
            dir.display(),
            paths.len()
        )));
    }
    Ok(paths)
}

fn load_data_dir(dir: &Path, zscore: bool, need_labels: bool) -> Result<MultiViewDataset> {
    let paths = view_paths(dir)?;
    let label_path = dir.join("labels.csv");
    let labels = if label_path.exists() {
        Some(label_path)
    } else if need_labels {
        return Err(Error::Config(format!("{} has no labels.csv", dir.display())));
    } else {
        None
    };
    load_csv(&paths, labels.as_deref(), false, zscore)
}

fn check_view_dims(model: &ModelParams<f64>, dataset: &MultiViewDataset) -> Result<()> {
    let data_dims = dataset.view_dims();
    for (v, (&want, &got)) in model.view_dims().iter().zip(&data_dims).enumerate() {
        if want != got {
            return Err(Error::dim(format!(
                "view {}: checkpoint expects {want} features, dataset has {got}",
                v + 1
            )));
        }
    }
    if model.view_dims().len() != data_dims.len() {
        return Err(Error::dim(format!(
            "checkpoint has {} views, dataset has {}",
            model.view_dims().len(),
            data_dims.len()
        )));
    }
    Ok(())
}

fn parse_modes(items: &[String]) -> Result<Vec<PriorMode>> {
    items.iter().map(|s| PriorMode::from_str(s)).collect()
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Samples to generate.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Number of views L (>= 2).
    #[arg(long)]
    views: Option<usize>,
    /// Per-view feature dims; one value is replicated across views.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Observation noise scale.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (view_<i>.csv, labels.csv, manifest.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataFile {
    n: Option<usize>,
    clusters: Option<usize>,
    views: Option<usize>,
    dims: Option<Vec<usize>>,
    noise: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct GenDataResolved {
    n: usize,
    clusters: usize,
    views: usize,
    dims: Vec<usize>,
    noise: f64,
    seed: u64,
    out: PathBuf,
}

fn cmd_gen_data(args: GenDataArgs, file: &ConfigFile) -> Result<i32> {
    let f = &file.gen_data;
    let views = pick(args.views, f.views, 3);
    let mut dims = pick(args.dims, f.dims.clone(), vec![10]);
    if dims.len() == 1 {
        dims = vec![dims[0]; views];
    }
    if dims.len() != views {
        return Err(Error::Config(format!("{} dims supplied for {views} views", dims.len())));
    }
    let resolved = GenDataResolved {
        n: pick(args.n, f.n, 600),
        clusters: pick(args.clusters, f.clusters, 3),
        views,
        dims,
        noise: pick(args.noise, f.noise, 0.1),
        seed: pick(args.seed, f.seed, 0),
        out: pick(args.out, f.out.clone(), PathBuf::from("data")),
    };
    let dataset = gen_synthetic(
        resolved.n,
        resolved.clusters,
        resolved.views,
        &resolved.dims,
        resolved.noise,
        resolved.seed,
    )?;
    std::fs::create_dir_all(&resolved.out)?;
    let mut outputs = Vec::new();
    for (v, matrix) in dataset.views.iter().enumerate() {
        let path = resolved.out.join(format!("view_{}.csv", v + 1));
        write_matrix_csv(matrix, &path)?;
        outputs.push(path);
    }
    let labels_path = resolved.out.join("labels.csv");
    write_labels_csv(dataset.labels.as_ref().expect("synthetic data is labeled"), &labels_path)?;
    outputs.push(labels_path);
    let manifest_path = resolved.out.join("manifest.json");
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest("gen-data", &resolved, resolved.seed, &[], &output_refs, &manifest_path)?;
    println!("wrote {} samples x {} views to {}", resolved.n, resolved.views, resolved.out.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// gen-masks

#[derive(Args, Debug)]
pub struct GenMasksArgs {
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Missing rate in [0, 1].
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fingerprint file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenMasksFile {
    data: Option<PathBuf>,
    eta: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct GenMasksResolved {
    data: PathBuf,
    eta: f64,
    seed: u64,
    out: PathBuf,
}

fn cmd_gen_masks(args: GenMasksArgs, file: &ConfigFile) -> Result<i32> {
    let f = &file.gen_masks;
    let data = pick(args.data, f.data.clone(), PathBuf::from("data"));
    let resolved = GenMasksResolved {
        out: pick(args.out, f.out.clone(), data.join("fingerprint.jsonl")),
        eta: pick(args.eta, f.eta, 0.5),
        seed: pick(args.seed, f.seed, 0),
        data,
    };
    if !(0.0..=1.0).contains(&resolved.eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {}", resolved.eta)));
    }
    let dataset = load_data_dir(&resolved.data, false, false)?;
    let masks = gen_masks(dataset.len(), dataset.view_count(), resolved.eta, resolved.seed)?;
    let fp = build_fingerprint(&masks, resolved.eta, resolved.seed)?;
    write_fingerprint(&fp, &resolved.out)?;
    let manifest_path = manifest_sibling(&resolved.out);
    write_manifest(
        "gen-masks",
        &resolved,
        resolved.seed,
        &[&resolved.data],
        &[&resolved.out],
        &manifest_path,
    )?;
    let incomplete = fp.records.iter().filter(|r| r.mask.iter().any(|&m| !m)).count();
    println!(
        "wrote fingerprint for {} samples ({} incomplete) to {}",
        fp.records.len(),
        incomplete,
        resolved.out.display()
    );
    Ok(0)
}

fn manifest_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

// ---------------------------------------------------------------------------
// train

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fingerprint: Option<PathBuf>,
    /// Latent dimension d.
    #[arg(long)]
    d: Option<usize>,
    /// Shared (consensus) dimension k <= d.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "beta-z")]
    beta_z: Option<f64>,
    #[arg(long = "beta-omega")]
    beta_omega: Option<f64>,
    /// Warm-up epochs on the basic objective.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "prior-mode")]
    prior_mode: Option<String>,
    /// Permutation bundles per sample, cycled across epochs.
    #[arg(long = "perm-pool")]
    perm_pool: Option<usize>,
    /// Encoder hidden widths, comma separated.
    #[arg(long = "enc-hidden", value_delimiter = ',')]
    enc_hidden: Option<Vec<usize>>,
    /// Correspondence hidden widths, comma separated.
    #[arg(long = "corr-hidden", value_delimiter = ',')]
    corr_hidden: Option<Vec<usize>>,
    /// Standardize features at load time.
    #[arg(long, default_value_t = false)]
    zscore: bool,
    /// Expected missing rate; warns if the fingerprint header disagrees.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    data: Option<PathBuf>,
    fingerprint: Option<PathBuf>,
    d: Option<usize>,
    k: Option<usize>,
    beta_z: Option<f64>,
    beta_omega: Option<f64>,
    warmup: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    prior_mode: Option<String>,
    perm_pool: Option<usize>,
    enc_hidden: Option<Vec<usize>>,
    corr_hidden: Option<Vec<usize>>,
    zscore: Option<bool>,
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct TrainResolved {
    data: PathBuf,
    fingerprint: PathBuf,
    config: TrainConfig,
    zscore: bool,
    out: PathBuf,
}

fn resolve_train(args: TrainArgs, f: &TrainFile) -> Result<TrainResolved> {
    let defaults = TrainConfig::default();
    let data = pick(args.data, f.data.clone(), PathBuf::from("data"));
    let prior_mode = match pick(args.prior_mode, f.prior_mode.clone(), "cyclic".to_string()) {
        s => PriorMode::from_str(&s)?,
    };
    let config = TrainConfig {
        d: pick(args.d, f.d, defaults.d),
        k: pick(args.k, f.k, defaults.k),
        beta_z: pick(args.beta_z, f.beta_z, defaults.beta_z),
        beta_omega: pick(args.beta_omega, f.beta_omega, defaults.beta_omega),
        warmup_epochs: pick(args.warmup, f.warmup, defaults.warmup_epochs),
        epochs: pick(args.epochs, f.epochs, defaults.epochs),
        batch_size: pick(args.batch_size, f.batch, defaults.batch_size),
        lr: pick(args.lr, f.lr, defaults.lr),
        seed: pick(args.seed, f.seed, defaults.seed),
        prior_mode,
        perm_pool: pick(args.perm_pool, f.perm_pool, defaults.perm_pool),
        warmup_betas: defaults.warmup_betas,
        enc_hidden: pick(args.enc_hidden, f.enc_hidden.clone(), defaults.enc_hidden),
        corr_hidden: pick(args.corr_hidden, f.corr_hidden.clone(), defaults.corr_hidden),
    };
    Ok(TrainResolved {
        fingerprint: pick(args.fingerprint, f.fingerprint.clone(), data.join("fingerprint.jsonl")),
        out: pick(args.out, f.out.clone(), PathBuf::from("run")),
        zscore: args.zscore || f.zscore.unwrap_or(false),
        data,
        config,
    })
}

fn warn_on_eta_mismatch(flag: Option<f64>, header_eta: f64) {
    if let Some(eta) = flag {
        if (eta - header_eta).abs() > 1e-12 {
            eprintln!(
                "warning: --eta {eta} differs from fingerprint header eta {header_eta}; the file wins"
            );
        }
    }
}

fn cmd_train(args: TrainArgs, file: &ConfigFile) -> Result<i32> {
    let eta_flag = args.eta;
    let resolved = resolve_train(args, &file.train)?;
    resolved.config.validate()?;
    let mut dataset = load_data_dir(&resolved.data, resolved.zscore, false)?;
    let fingerprint = read_fingerprint(&resolved.fingerprint)?;
    warn_on_eta_mismatch(eta_flag, fingerprint.eta);
    dataset.apply_fingerprint(&fingerprint)?;

    let (model, log) = train(&dataset, &fingerprint, &resolved.config)?;

    std::fs::create_dir_all(&resolved.out)?;
    let ckpt_path = resolved.out.join("checkpoint.bin");
    save_checkpoint(&model, &ckpt_path)?;
    let log_path = resolved.out.join("train_log.jsonl");
    log.write_jsonl(&log_path)?;
    write_manifest(
        "train",
        &resolved,
        resolved.config.seed,
        &[&resolved.data, &resolved.fingerprint],
        &[&ckpt_path, &log_path],
        &resolved.out.join("manifest.json"),
    )?;
    if let Some(last) = log.epochs.last() {
        println!(
            "trained {} epochs (recon {:.4}, kl_z {:.4}, kl_omega {:.4}, total {:.4})",
            last.epoch, last.recon, last.kl_z, last.kl_omega, last.total
        );
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fingerprint: Option<PathBuf>,
    /// Label CSV (defaults to labels.csv inside the data directory).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = false)]
    zscore: bool,
    /// Expected missing rate; warns if the fingerprint header disagrees.
    #[arg(long)]
    eta: Option<f64>,
    /// Metrics JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFile {
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    fingerprint: Option<PathBuf>,
    labels: Option<PathBuf>,
    seed: Option<u64>,
    zscore: Option<bool>,
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct EvalResolved {
    checkpoint: PathBuf,
    data: PathBuf,
    fingerprint: PathBuf,
    labels: PathBuf,
    seed: u64,
    zscore: bool,
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct MetricsReport {
    acc: f64,
    nmi: f64,
    ari: f64,
    eta: f64,
    seed: u64,
    config_digest: String,
}

fn cmd_eval(args: EvalArgs, file: &ConfigFile) -> Result<i32> {
    let f = &file.eval;
    let data = pick(args.data, f.data.clone(), PathBuf::from("data"));
    let resolved = EvalResolved {
        checkpoint: pick(args.checkpoint, f.checkpoint.clone(), PathBuf::from("run/checkpoint.bin")),
        fingerprint: pick(args.fingerprint, f.fingerprint.clone(), data.join("fingerprint.jsonl")),
        labels: pick(args.labels, f.labels.clone(), data.join("labels.csv")),
        seed: pick(args.seed, f.seed, 0),
        zscore: args.zscore || f.zscore.unwrap_or(false),
        out: pick(args.out, f.out.clone(), PathBuf::from("metrics.json")),
        data,
    };
    if !resolved.labels.exists() {
        return Err(Error::Config(format!("label file {} not found", resolved.labels.display())));
    }
    let paths = view_paths(&resolved.data)?;
    let mut dataset = load_csv(&paths, Some(&resolved.labels), false, resolved.zscore)?;
    let fingerprint = read_fingerprint(&resolved.fingerprint)?;
    warn_on_eta_mismatch(args.eta, fingerprint.eta);
    dataset.apply_fingerprint(&fingerprint)?;
    let (model, _) = load_checkpoint(&resolved.checkpoint)?;
    check_view_dims(&model, &dataset)?;

    let labels = dataset.labels.clone().expect("labels loaded");
    let clusters = 1 + *labels.iter().max().unwrap();
    let embedding = consensus_embedding(&dataset, &model, model.shared_dim())?;
    let assignment = kmeans(&embedding, clusters, 10, 300, 1e-4, resolved.seed)?;
    let report = clustering_metrics(&labels, &assignment)?;

    let metrics = MetricsReport {
        acc: report.acc,
        nmi: report.nmi,
        ari: report.ari,
        eta: fingerprint.eta,
        seed: resolved.seed,
        config_digest: config_digest(&resolved)?,
    };
    std::fs::write(&resolved.out, serde_json::to_string_pretty(&metrics)? + "\n")?;
    write_manifest(
        "eval",
        &resolved,
        resolved.seed,
        &[&resolved.checkpoint, &resolved.data, &resolved.fingerprint],
        &[&resolved.out],
        &manifest_sibling(&resolved.out),
    )?;
    println!("acc {:.4}  nmi {:.4}  ari {:.4}", report.acc, report.nmi, report.ari);
    Ok(0)
}

// ---------------------------------------------------------------------------
// infer

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fingerprint: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    zscore: bool,
    /// Output directory (recon_view_<i>.csv + mse.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferFile {
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    fingerprint: Option<PathBuf>,
    zscore: Option<bool>,
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct InferResolved {
    checkpoint: PathBuf,
    data: PathBuf,
    fingerprint: PathBuf,
    zscore: bool,
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct MseReport {
    per_view_all: Vec<f64>,
    per_view_missing: Vec<Option<f64>>,
    missing_overall: Option<f64>,
}

fn cmd_infer(args: InferArgs, file: &ConfigFile) -> Result<i32> {
    let f = &file.infer;
    let data = pick(args.data, f.data.clone(), PathBuf::from("data"));
    let resolved = InferResolved {
        checkpoint: pick(args.checkpoint, f.checkpoint.clone(), PathBuf::from("run/checkpoint.bin")),
        fingerprint: pick(args.fingerprint, f.fingerprint.clone(), data.join("fingerprint.jsonl")),
        zscore: args.zscore || f.zscore.unwrap_or(false),
        out: pick(args.out, f.out.clone(), PathBuf::from("inferred")),
        data,
    };
    let mut dataset = load_data_dir(&resolved.data, resolved.zscore, false)?;
    let fingerprint = read_fingerprint(&resolved.fingerprint)?;
    dataset.apply_fingerprint(&fingerprint)?;
    let (model, _) = load_checkpoint(&resolved.checkpoint)?;
    check_view_dims(&model, &dataset)?;

    let l = dataset.view_count();
    let dims = dataset.view_dims();
    let mut reconstructed: Vec<Vec<Vec<f64>>> = (0..l).map(|_| Vec::new()).collect();
    let mut sq_all = vec![0.0f64; l];
    let mut count_all = vec![0usize; l];
    let mut sq_missing = vec![0.0f64; l];
    let mut count_missing = vec![0usize; l];
    for i in 0..dataset.len() {
        let views = dataset.sample_views(i);
        let rec = infer_missing_views(&views, &dataset.masks[i], &model, model.shared_dim())?;
        for v in 0..l {
            for j in 0..dims[v] {
                let err = (rec[v][j] - dataset.views[v][i][j]).powi(2);
                sq_all[v] += err;
                count_all[v] += 1;
                if !dataset.masks[i][v] {
                    sq_missing[v] += err;
                    count_missing[v] += 1;
                }
            }
            reconstructed[v].push(rec[v].clone());
        }
    }

    std::fs::create_dir_all(&resolved.out)?;
    let mut outputs = Vec::new();
    for v in 0..l {
        let path = resolved.out.join(format!("recon_view_{}.csv", v + 1));
        write_matrix_csv(&reconstructed[v], &path)?;
        outputs.push(path);
    }
    let report = MseReport {
        per_view_all: (0..l).map(|v| sq_all[v] / count_all[v].max(1) as f64).collect(),
        per_view_missing: (0..l)
            .map(|v| {
                if count_missing[v] > 0 {
                    Some(sq_missing[v] / count_missing[v] as f64)
                } else {
                    None
                }
            })
            .collect(),
        missing_overall: if count_missing.iter().sum::<usize>() > 0 {
            Some(sq_missing.iter().sum::<f64>() / count_missing.iter().sum::<usize>() as f64)
        } else {
            None
        },
    };
    let mse_path = resolved.out.join("mse.json");
    std::fs::write(&mse_path, serde_json::to_string_pretty(&report)? + "\n")?;
    outputs.push(mse_path);
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(
        "infer",
        &resolved,
        0,
        &[&resolved.checkpoint, &resolved.data, &resolved.fingerprint],
        &output_refs,
        &resolved.out.join("manifest.json"),
    )?;
    println!("reconstructions in {}", resolved.out.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckFile {
    d: Option<usize>,
    k: Option<usize>,
    views: Option<usize>,
    seed: Option<u64>,
}

fn cmd_gradcheck(args: GradcheckArgs, file: &ConfigFile) -> Result<i32> {
    let f = &file.gradcheck;
    let d = pick(args.d, f.d, 4);
    let k = pick(args.k, f.k, d.min(2));
    let views = pick(args.views, f.views, 2);
    let seed = pick(args.seed, f.seed, 0);
    let report = gradcheck_model(d, k, views, seed, 1e-5, 1e-4)?;
    println!(
        "gradcheck: {} parameters, max relative error {:.3e} at {}",
        report.checked, report.max_rel_err, report.worst_path
    );
    if report.passed {
        println!("gradcheck: PASS");
        Ok(0)
    } else {
        eprintln!(
            "gradcheck: FAIL ({} parameters over tolerance; worst {} analytic {:.6e} numeric {:.6e})",
            report.failures, report.worst_path, report.worst_analytic, report.worst_numeric
        );
        Ok(3)
    }
}

/// Gradient check of the combined objective on a freshly initialized model
/// with hidden widths of 8, random data and frozen noise.
pub struct ModelGradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_path: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub failures: usize,
    pub passed: bool,
}

pub fn gradcheck_model(
    d: usize,
    k: usize,
    views: usize,
    seed: u64,
    h: f64,
    tolerance: f64,
) -> Result<ModelGradCheck> {
    let view_dims: Vec<usize> = (0..views).map(|v| 3 + v).collect();
    let arch = crate::model::ModelArch::uniform(8);
    let model = ModelParams::<f64>::init(views, &view_dims, d, k, arch, seed)?;

    let mut rng = Rng::with_stream(seed, 0x47434b31); // "GCK1"
    let sample: Vec<Vec<f64>> = view_dims
        .iter()
        .map(|&dv| (0..dv).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let observed: Vec<usize> = (1..=views).collect();
    let bundle = make_bundle(views, &observed, &mut rng)?;
    let noise = SampleNoise::<f64>::draw(views, d, k, &mut rng);
    let cfg = ObjectiveConfig::default();

    let params = model.flatten_params();
    let mut analytic = vec![0.0; params.len()];
    model.elbo(&sample, &observed, &bundle, &noise, &cfg, ObjectiveKind::Combined, Some(&mut analytic))?;

    let cell = std::cell::RefCell::new(model);
    let value = |p: &[f64]| -> f64 {
        let mut m = cell.borrow_mut();
        m.load_flat(p).expect("sized buffer");
        m.elbo(&sample, &observed, &bundle, &noise, &cfg, ObjectiveKind::Combined, None)
            .expect("finite objective")
            .total
    };
    let report = grad_check(value, &params, &analytic, h, tolerance);
    let model = cell.into_inner();
    Ok(ModelGradCheck {
        checked: report.checked,
        max_rel_err: report.max_rel_err,
        worst_path: model.param_path(report.worst_index),
        worst_analytic: report.worst_analytic,
        worst_numeric: report.worst_numeric,
        failures: report.failures.len(),
        passed: report.passed(),
    })
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fingerprint: Option<PathBuf>,
    /// Prior modes, comma separated.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "enc-hidden", value_delimiter = ',')]
    enc_hidden: Option<Vec<usize>>,
    #[arg(long = "corr-hidden", value_delimiter = ',')]
    corr_hidden: Option<Vec<usize>>,
    #[arg(long, default_value_t = false)]
    zscore: bool,
    /// Summary CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateFile {
    data: Option<PathBuf>,
    fingerprint: Option<PathBuf>,
    modes: Option<Vec<String>>,
    seeds: Option<Vec<u64>>,
    d: Option<usize>,
    k: Option<usize>,
    warmup: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    enc_hidden: Option<Vec<usize>>,
    corr_hidden: Option<Vec<usize>>,
    zscore: Option<bool>,
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct AblateResolved {
    data: PathBuf,
    fingerprint: PathBuf,
    modes: Vec<String>,
    seeds: Vec<u64>,
    config: TrainConfig,
    zscore: bool,
    out: PathBuf,
}

fn cmd_ablate(args: AblateArgs, file: &ConfigFile) -> Result<i32> {
    let f = &file.ablate;
    let defaults = TrainConfig::default();
    let data = pick(args.data, f.data.clone(), PathBuf::from("data"));
    let mode_names = pick(
        args.modes,
        f.modes.clone(),
        vec!["cyclic".into(), "standard_normal".into(), "random_perm".into()],
    );
    let modes = parse_modes(&mode_names)?;
    let config = TrainConfig {
        d: pick(args.d, f.d, defaults.d),
        k: pick(args.k, f.k, defaults.k),
        warmup_epochs: pick(args.warmup, f.warmup, defaults.warmup_epochs),
        epochs: pick(args.epochs, f.epochs, defaults.epochs),
        batch_size: pick(args.batch_size, f.batch, defaults.batch_size),
        lr: pick(args.lr, f.lr, defaults.lr),
        enc_hidden: pick(args.enc_hidden, f.enc_hidden.clone(), defaults.enc_hidden.clone()),
        corr_hidden: pick(args.corr_hidden, f.corr_hidden.clone(), defaults.corr_hidden.clone()),
        ..defaults
    };
    let resolved = AblateResolved {
        fingerprint: pick(args.fingerprint, f.fingerprint.clone(), data.join("fingerprint.jsonl")),
        modes: mode_names,
        seeds: pick(args.seeds, f.seeds.clone(), vec![0, 1, 2, 3, 4]),
        zscore: args.zscore || f.zscore.unwrap_or(false),
        out: pick(args.out, f.out.clone(), PathBuf::from("ablation.csv")),
        data,
        config,
    };
    resolved.config.validate()?;

    let mut dataset = load_data_dir(&resolved.data, resolved.zscore, true)?;
    let fingerprint = read_fingerprint(&resolved.fingerprint)?;
    dataset.apply_fingerprint(&fingerprint)?;
    let rows = run_ablation(&dataset, &fingerprint, &modes, &resolved.seeds, &resolved.config)?;
    let csv = ablation_csv(&rows);
    std::fs::write(&resolved.out, &csv)?;
    write_manifest(
        "ablate",
        &resolved,
        resolved.config.seed,
        &[&resolved.data, &resolved.fingerprint],
        &[&resolved.out],
        &manifest_sibling(&resolved.out),
    )?;
    print!("{csv}");
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_under_field_reordering() {
        let a: serde_json::Value = serde_json::json!({"x": 1, "y": [1, 2], "z": {"b": 2, "a": 1}});
        let b: serde_json::Value = serde_json::json!({"z": {"a": 1, "b": 2}, "y": [1, 2], "x": 1});
        assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
        let c: serde_json::Value = serde_json::json!({"x": 2, "y": [1, 2], "z": {"a": 1, "b": 2}});
        assert_ne!(config_digest(&a).unwrap(), config_digest(&c).unwrap());
    }

    #[test]
    fn prior_mode_parsing() {
        assert_eq!(PriorMode::from_str("cyclic").unwrap(), PriorMode::Cyclic);
        assert!(PriorMode::from_str("nonsense").is_err());
        assert_eq!(
            parse_modes(&["cyclic".into(), "fusion".into()]).unwrap(),
            vec![PriorMode::Cyclic, PriorMode::Fusion]
        );
    }
}
