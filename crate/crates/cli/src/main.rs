//! Command-line surface for the incomplete multi-view clustering
//! pipeline: synthetic data generation, pretraining, full training,
//! evaluation, hyperparameter sweeps, and embedding export.
//!
//! Every successful command writes a `run.json` into its output directory
//! echoing the fully resolved configuration; `train` accepts a previous
//! `run.json` in place of a config file and reproduces that run.

mod pca;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dhia::datasets::{
    generate_mask, load_views, read_labels, synthesize, write_labels, write_matrix_csv,
    SyntheticSpec, ViewDataset,
};
use dhia::diffnet::Matrix;
use dhia::metrics::evaluate;
use dhia::model::ModelBundle;
use dhia::trainer::{
    complete_dataset, labels_from_completed, run as run_training, write_loss_csv,
    TrainConfig, Trainer,
};
use dhia::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dhia",
    version,
    about = "Deep incomplete multi-view clustering with hierarchical imputation and alignment"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view dataset with a missing-entry mask.
    Generate(GenerateArgs),
    /// Run autoencoder pretraining only and save a resumable snapshot.
    Pretrain(TrainArgs),
    /// Full training: pretraining, fine-tuning, final labels, metrics.
    Train(TrainArgs),
    /// Score a predicted label file against a ground-truth label file.
    Evaluate(EvaluateArgs),
    /// Train over an alpha x beta grid and tabulate clustering accuracy.
    Sweep(SweepArgs),
    /// Export completed latent embeddings and a 2-D projection.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for the dataset files.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Number of views.
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Number of ground-truth clusters.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Dimension of the shared latent generator.
    #[arg(long, default_value_t = 6)]
    latent_dim: usize,
    /// Comma-separated per-view feature widths (default: 2*latent_dim each).
    #[arg(long, value_delimiter = ',')]
    view_dims: Option<Vec<usize>>,
    /// Distance between cluster centers in units of the latent spread.
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// Observation noise scale.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Per-view missing ratio in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON, or a run.json from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (view_*.csv, optional mask.csv and labels.txt).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable a loss term; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    Rec,
    Ebm,
    Caa,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label file, one integer per line.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label file, one integer per line.
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Alpha grid values.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01, 0.05, 0.1, 1.0])]
    alphas: Vec<f64>,
    /// Beta grid values.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01, 0.05, 0.1, 1.0])]
    betas: Vec<f64>,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint file (.dhia) or a training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Similarity temperature used during completion.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
}

/// Resolved-run echo written into every output directory.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pred: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alphas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    betas: Option<Vec<f64>>,
}

impl RunRecord {
    fn new(command: &str) -> Self {
        RunRecord {
            command: command.into(),
            data: None,
            config: None,
            spec: None,
            eta: None,
            pred: None,
            truth: None,
            checkpoint: None,
            tau: None,
            alphas: None,
            betas: None,
        }
    }

    fn write(&self, out: &Path) -> Result<()> {
        let path = out.join("run.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("run record serialization: {e}")))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::ExportEmbeddings(args) => cmd_export(args),
    }
}

/// Loads `view_0.csv .. view_{V-1}.csv`, plus `mask.csv` and `labels.txt`
/// when present.
fn load_dataset(dir: &Path) -> Result<ViewDataset> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory not found: {}", dir.display())));
    }
    let mut paths = Vec::new();
    loop {
        let p = dir.join(format!("view_{}.csv", paths.len()));
        if !p.is_file() {
            break;
        }
        paths.push(p);
    }
    if paths.is_empty() {
        return Err(Error::Data(format!("no view_*.csv files in {}", dir.display())));
    }
    let mask_path = dir.join("mask.csv");
    let mut ds = load_views(&paths, mask_path.is_file().then_some(mask_path.as_path()))?;
    let label_path = dir.join("labels.txt");
    if label_path.is_file() {
        ds = ds.with_labels(read_labels(&label_path)?)?;
    }
    Ok(ds)
}

/// Reads a config file that is either a bare `TrainConfig` or a previous
/// `run.json`; returns the config plus the record's data path, if any.
fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    ablate: &[Ablation],
) -> Result<(TrainConfig, Option<PathBuf>)> {
    let (mut cfg, data) = match path {
        None => (TrainConfig::default(), None),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            match serde_json::from_str::<TrainConfig>(&text) {
                Ok(cfg) => (cfg, None),
                Err(primary) => {
                    let record = serde_json::from_str::<RunRecord>(&text).ok();
                    match record.and_then(|r| r.config.map(|c| (c, r.data))) {
                        Some((cfg, data)) => (cfg, data),
                        None => {
                            return Err(Error::Config(format!(
                                "{}: not a training config ({primary}) and not a run record with a config",
                                p.display()
                            )))
                        }
                    }
                }
            }
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for a in ablate {
        match a {
            Ablation::Rec => cfg.toggles.use_rec = false,
            Ablation::Ebm => cfg.toggles.use_ebm = false,
            Ablation::Caa => cfg.toggles.use_caa = false,
        }
    }
    cfg.validate()?;
    Ok((cfg, data))
}

fn data_dir(flag: Option<PathBuf>, from_record: Option<PathBuf>) -> Result<PathBuf> {
    flag.or(from_record)
        .ok_or_else(|| Error::Config("no dataset given: pass --data or a run.json config".into()))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let view_dims = match args.view_dims {
        Some(dims) => {
            if dims.len() != args.views {
                return Err(Error::Config(format!(
                    "--view-dims lists {} widths but --views is {}",
                    dims.len(),
                    args.views
                )));
            }
            dims
        }
        None => vec![2 * args.latent_dim; args.views],
    };
    let spec = SyntheticSpec {
        n: args.n,
        v_count: args.views,
        k: args.k,
        latent_dim: args.latent_dim,
        view_dims,
        separation: args.separation,
        noise_scale: args.noise,
        seed: args.seed,
    };
    let mut ds = synthesize(&spec)?;
    if args.eta > 0.0 {
        let mask = generate_mask(args.n, args.views, args.eta, args.seed)?;
        ds.apply_mask(mask)?;
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for (v, x) in ds.views.iter().enumerate() {
        write_matrix_csv(&args.out.join(format!("view_{v}.csv")), x)?;
    }
    write_matrix_csv(&args.out.join("mask.csv"), ds.mask.as_matrix())?;
    write_labels(&args.out.join("labels.txt"), ds.labels.as_ref().expect("synthetic labels"))?;
    let sidecar = args.out.join("dataset.json");
    let json = serde_json::to_string_pretty(&spec)
        .map_err(|e| Error::Data(format!("spec serialization: {e}")))?;
    fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))?;
    let mut record = RunRecord::new("generate");
    record.spec = Some(spec);
    record.eta = Some(args.eta);
    record.write(&args.out)?;
    println!("wrote dataset with {} views to {}", args.views, args.out.display());
    Ok(())
}

fn cmd_pretrain(args: TrainArgs) -> Result<()> {
    let (cfg, record_data) = resolve_config(args.config.as_deref(), args.seed, &args.ablate)?;
    let data = data_dir(args.data, record_data)?;
    let ds = load_dataset(&data)?;
    let mut trainer = Trainer::new(cfg.clone(), &ds.dims())?;
    trainer.pretrain(&ds)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    trainer.save_snapshot(&args.out.join("snapshot"))?;
    write_loss_csv(&args.out.join("pretrain.csv"), &trainer.state.pretrain_history)?;
    let mut record = RunRecord::new("pretrain");
    record.data = Some(data);
    record.config = Some(cfg);
    record.write(&args.out)?;
    println!(
        "pretrained {} epochs; snapshot in {}",
        trainer.state.completed_pretrain,
        args.out.join("snapshot").display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (cfg, record_data) = resolve_config(args.config.as_deref(), args.seed, &args.ablate)?;
    let data = data_dir(args.data, record_data)?;
    let ds = load_dataset(&data)?;
    let artifacts = run_training(&cfg, &ds, &args.out)?;
    let mut record = RunRecord::new("train");
    record.data = Some(data);
    record.config = Some(cfg);
    record.write(&args.out)?;
    match &artifacts.metrics {
        Some(m) => println!("acc {:.4} nmi {:.4} pur {:.4}", m.acc, m.nmi, m.pur),
        None => println!("trained without ground-truth labels; wrote {}", args.out.display()),
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let pred = read_labels(&args.pred)?;
    let truth = read_labels(&args.truth)?;
    let report = evaluate(&pred, &truth)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("metrics.json");
    let json = serde_json::to_string_pretty(&report.to_json())
        .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
    fs::write(&path, json.clone() + "\n").map_err(|e| Error::io(&path, e))?;
    let mut record = RunRecord::new("evaluate");
    record.pred = Some(args.pred);
    record.truth = Some(args.truth);
    record.write(&args.out)?;
    println!("{json}");
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (base, record_data) = resolve_config(args.config.as_deref(), args.seed, &[])?;
    let data = data_dir(args.data, record_data)?;
    let ds = load_dataset(&data)?;
    if ds.labels.is_none() {
        return Err(Error::Data("sweep needs a dataset with ground-truth labels".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut csv = String::from("alpha,beta,acc,nmi,pur\n");
    for &alpha in &args.alphas {
        for &beta in &args.betas {
            let mut cfg = base.clone();
            cfg.alpha = alpha;
            cfg.beta = beta;
            cfg.validate()?;
            let cell = args.out.join(format!("alpha{alpha}_beta{beta}"));
            let artifacts = run_training(&cfg, &ds, &cell)?;
            let m = artifacts.metrics.expect("labels checked above");
            csv.push_str(&format!("{alpha},{beta},{},{},{}\n", m.acc, m.nmi, m.pur));
            println!("alpha {alpha} beta {beta}: acc {:.4}", m.acc);
        }
    }
    let path = args.out.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let mut record = RunRecord::new("sweep");
    record.data = Some(data);
    record.config = Some(base);
    record.alphas = Some(args.alphas);
    record.betas = Some(args.betas);
    record.write(&args.out)?;
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let (bin, manifest) = if args.checkpoint.is_dir() {
        (
            args.checkpoint.join("checkpoint.dhia"),
            args.checkpoint.join("checkpoint.manifest.json"),
        )
    } else {
        (args.checkpoint.clone(), args.checkpoint.with_extension("manifest.json"))
    };
    let bundle = ModelBundle::load_checkpoint(&bin, &manifest)?;
    let ds = load_dataset(&args.data)?;
    if bundle.view_dims != ds.dims() {
        return Err(Error::Data(format!(
            "checkpoint expects view widths {:?} but the dataset has {:?}",
            bundle.view_dims,
            ds.dims()
        )));
    }
    let completed = complete_dataset(&bundle, &ds, args.tau)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for (v, h) in completed.latents.h_star.iter().enumerate() {
        write_matrix_csv(&args.out.join(format!("h_star_view_{v}.csv")), h)?;
    }
    let labels = labels_from_completed(&completed.assignments)?;

    // Concatenate per-view completed latents into one row per sample.
    let n = ds.n();
    let total_dim: usize = completed.latents.h_star.iter().map(|h| h.cols()).sum();
    let mut joined = Matrix::zeros(n, total_dim);
    let mut offset = 0;
    for h in &completed.latents.h_star {
        for r in 0..n {
            for c in 0..h.cols() {
                joined.set(r, offset + c, h.get(r, c));
            }
        }
        offset += h.cols();
    }
    let projection = pca::pca_2d(&joined)?;
    let mut csv = String::from(if ds.labels.is_some() { "x,y,label,truth\n" } else { "x,y,label\n" });
    for r in 0..n {
        match &ds.labels {
            Some(truth) => csv.push_str(&format!(
                "{},{},{},{}\n",
                projection.get(r, 0),
                projection.get(r, 1),
                labels[r],
                truth[r]
            )),
            None => csv.push_str(&format!(
                "{},{},{}\n",
                projection.get(r, 0),
                projection.get(r, 1),
                labels[r]
            )),
        }
    }
    let path = args.out.join("embedding_2d.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let mut record = RunRecord::new("export-embeddings");
    record.data = Some(args.data);
    record.checkpoint = Some(args.checkpoint);
    record.tau = Some(args.tau);
    record.write(&args.out)?;
    println!("wrote {} embeddings to {}", n, args.out.display());
    Ok(())
}
