//! Command-line surface. Every subcommand reads settings (config file, then
//! `--seed`, then `--set key=value` overrides), runs one pipeline and writes
//! its outputs, including `config.snapshot`, into a run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{gen_blobs, gen_ood_set, load_features, render_features, write_atomic, Dataset};
use crate::discriminant::{latent_diagnostics, lda_projection, scatter_matrices, DEFAULT_RIDGE};
use crate::error::{NdaError, Result};
use crate::model::Model;
use crate::ood::{
    ood_report, parse_scores, reliability_table, render_reliability_csv, render_scores,
    score_dataset, OodMetrics, ScoredPrediction,
};
use crate::settings::Settings;
use crate::ssl::{render_pseudo_labels, render_ssl_report, run_ssl};
use crate::train::{
    evaluate, parse_epochs_csv, render_epochs_csv, render_means_csv, render_report, split_dataset,
    train, EpochRecord, Splits,
};

pub const RUN_ROOT_ENV: &str = "NDA_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "nda",
    version,
    about = "Neural discriminant analysis laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// flat `key = value` settings file
    #[arg(long)]
    config: Option<PathBuf>,
    /// run seed; overrides the config file
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override, repeatable; applied last
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// parent of the run directory; overrides $NDA_RUN_ROOT
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// exact run directory; overrides the root
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the blob dataset and its shifted OOD set as feature CSVs
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model with the NDA loss
    Train {
        #[command(flatten)]
        common: Common,
        /// train on a feature CSV instead of generated blobs
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Two-phase semi-supervised training with an ensemble
    TrainSsl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// AUROC, AUPR, FPR at 95% TPR and ECE from score files or a model
    EvalOod {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "out_scores", conflicts_with_all = ["model", "in_data", "out_data"])]
        in_scores: Option<PathBuf>,
        #[arg(long, requires = "in_scores")]
        out_scores: Option<PathBuf>,
        #[arg(long, requires_all = ["in_data", "out_data"])]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        in_data: Option<PathBuf>,
        #[arg(long, requires = "model")]
        out_data: Option<PathBuf>,
    },
    /// Scatter matrices, Fisher score and LDA spectrum of a feature file
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        /// analyse the model's latent space instead of the raw features
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Summarise the per-epoch log of a finished training run
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::TrainSsl { .. } => "train-ssl",
            Command::EvalOod { .. } => "eval-ood",
            Command::Diagnose { .. } => "diagnose",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::TrainSsl { common, .. }
            | Command::EvalOod { common, .. }
            | Command::Diagnose { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 2 for usage, config and input errors, 1 otherwise.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                print!("{e}");
            } else {
                let first = e.to_string();
                eprintln!("{}", first.lines().next().unwrap_or("usage error"));
            }
            return code;
        }
    };
    match run(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            match e {
                NdaError::Config(_) | NdaError::Parse { .. } | NdaError::Io { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn load_settings(common: &Common) -> Result<Settings> {
    let mut settings = match &common.config {
        Some(path) => Settings::parse(&read(path)?)?,
        None => Settings::default(),
    };
    if let Some(seed) = common.seed {
        settings.seed = seed;
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| NdaError::Config(format!("override {o:?} is not key=value")))?;
        settings.set(k.trim(), v)?;
    }
    settings.validate()?;
    Ok(settings)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| NdaError::io(path, e))
}

fn run_dir(command: &Command, settings: &Settings) -> Result<PathBuf> {
    let common = command.common();
    let dir = match &common.run_dir {
        Some(d) => d.clone(),
        None => {
            let root = common
                .run_root
                .clone()
                .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(format!("{}-seed{}", command.name(), settings.seed))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| NdaError::io(&dir, e))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_atomic(&dir.join(name), text.as_bytes())
}

fn run(command: &Command) -> Result<PathBuf> {
    let settings = load_settings(command.common())?;
    let dir = run_dir(command, &settings)?;
    write(&dir, "config.snapshot", &settings.render())?;
    match command {
        Command::GenData { .. } => gen_data(&settings, &dir)?,
        Command::Train { features, .. } => train_cmd(&settings, features.as_deref(), &dir)?,
        Command::TrainSsl { features, .. } => train_ssl_cmd(&settings, features.as_deref(), &dir)?,
        Command::EvalOod {
            in_scores,
            out_scores,
            model,
            in_data,
            out_data,
            ..
        } => match (in_scores, out_scores, model, in_data, out_data) {
            (Some(a), Some(b), None, None, None) => eval_scores(&settings, a, b, &dir)?,
            (None, None, Some(m), Some(a), Some(b)) => eval_model(&settings, m, a, b, &dir)?,
            _ => {
                return Err(NdaError::Config(
                    "eval-ood needs --in-scores/--out-scores or --model/--in-data/--out-data"
                        .into(),
                ))
            }
        },
        Command::Diagnose {
            features, model, ..
        } => diagnose(features, model.as_deref(), &dir)?,
        Command::Report { run, .. } => report(run, &dir)?,
    }
    Ok(dir)
}

fn gen_data(settings: &Settings, dir: &Path) -> Result<()> {
    let spec = settings.blob_spec();
    let data = gen_blobs(&spec)?;
    let ood = gen_ood_set(&spec, settings.ood_shift * spec.sigma)?;
    write(dir, "data.csv", &render_features(&data))?;
    write(dir, "ood.csv", &render_features(&ood))?;
    let mut report = String::new();
    writeln!(report, "data = {}", data.provenance).unwrap();
    writeln!(report, "samples = {}", data.len()).unwrap();
    writeln!(report, "ood = {}", ood.provenance).unwrap();
    writeln!(report, "ood_samples = {}", ood.len()).unwrap();
    write(dir, "report.txt", &report)
}

fn dataset(settings: &Settings, features: Option<&Path>) -> Result<Dataset> {
    match features {
        Some(path) => load_features(path),
        None => gen_blobs(&settings.blob_spec()),
    }
}

fn train_cmd(settings: &Settings, features: Option<&Path>, dir: &Path) -> Result<()> {
    let data = dataset(settings, features)?;
    let splits = split_dataset(&data, settings.split_fractions(), settings.data_seed())?;
    let mut model = Model::build(
        data.dim(),
        &settings.hidden,
        settings.latent,
        data.num_classes,
        settings.init_seed(),
    )?;
    let report = train(&mut model, &splits, &settings.train_config())?;
    let mut text = render_report(&report);
    if !splits.test.is_empty() {
        let (_, preds) = evaluate(&model, &splits.test)?;
        write(dir, "test_scores.csv", &render_scores(&preds))?;
        if features.is_none() {
            let spec = settings.blob_spec();
            let ood = gen_ood_set(&spec, settings.ood_shift * spec.sigma)?;
            let metrics = ood_report(&model, &splits.test, &ood, settings.ece_bins)?;
            text.push_str(&prefixed("ood_", &metrics));
            write(
                dir,
                "ood_scores.csv",
                &render_scores(&score_dataset(&model, &ood)?),
            )?;
        }
    }
    write(dir, "epochs.csv", &render_epochs_csv(&report.records))?;
    write(dir, "means.csv", &render_means_csv(&report.final_means))?;
    write(dir, "model.ckpt", &model.to_checkpoint())?;
    write(dir, "report.txt", &text)
}

fn prefixed(prefix: &str, metrics: &OodMetrics) -> String {
    metrics
        .to_string()
        .lines()
        .map(|l| format!("{prefix}{l}\n"))
        .collect()
}

fn train_ssl_cmd(settings: &Settings, features: Option<&Path>, dir: &Path) -> Result<()> {
    let data = dataset(settings, features)?;
    let splits: Splits = split_dataset(&data, settings.split_fractions(), settings.data_seed())?;
    let (models, report) = run_ssl(&splits, &settings.ssl_config())?;
    for (i, m) in models.iter().enumerate() {
        write(dir, &format!("member{i}.ckpt"), &m.to_checkpoint())?;
    }
    write(
        dir,
        "pseudo_labels.csv",
        &render_pseudo_labels(&report.pseudo),
    )?;
    write(dir, "report.txt", &render_ssl_report(&report))
}

fn eval_scores(settings: &Settings, in_path: &Path, out_path: &Path, dir: &Path) -> Result<()> {
    let inset = parse_scores(&read(in_path)?)?;
    let outset = parse_scores(&read(out_path)?)?;
    let in_preds = inset.to_predictions().ok_or_else(|| {
        NdaError::Config(format!(
            "{} needs a `correct` column for calibration",
            in_path.display()
        ))
    })?;
    let out_preds: Vec<_> = outset
        .confidence
        .iter()
        .map(|&c| ScoredPrediction {
            probs: vec![c],
            confidence: c,
            predicted: 0,
            label: None,
            in_distribution: false,
        })
        .collect();
    let metrics = OodMetrics::from_predictions(&in_preds, &out_preds, settings.ece_bins)?;
    write(
        dir,
        "reliability.csv",
        &render_reliability_csv(&reliability_table(&in_preds, settings.ece_bins)?),
    )?;
    write(dir, "report.txt", &metrics.to_string())
}

fn eval_model(
    settings: &Settings,
    model: &Path,
    in_path: &Path,
    out_path: &Path,
    dir: &Path,
) -> Result<()> {
    let model = Model::from_checkpoint(&read(model)?)?;
    let inset = load_features(in_path)?;
    let mut outset = load_features(out_path)?;
    outset.in_distribution = false;
    let metrics = ood_report(&model, &inset, &outset, settings.ece_bins)?;
    let preds = score_dataset(&model, &inset)?;
    write(
        dir,
        "reliability.csv",
        &render_reliability_csv(&reliability_table(&preds, settings.ece_bins)?),
    )?;
    write(dir, "report.txt", &metrics.to_string())
}

fn diagnose(features: &Path, model: Option<&Path>, dir: &Path) -> Result<()> {
    let data = load_features(features)?;
    let (space, points) = match model {
        Some(path) => {
            let m = Model::from_checkpoint(&read(path)?)?;
            ("latent", m.predict(&data.features)?.0)
        }
        None => ("features", data.features.clone()),
    };
    let stats = scatter_matrices(&points, &data.labels)?;
    let diag = latent_diagnostics(&points, &data.labels, DEFAULT_RIDGE)?;
    let target = (data.num_classes.saturating_sub(1)).clamp(1, stats.dim());
    let lda = lda_projection(&stats, target, DEFAULT_RIDGE)?;
    let trace = |t: &crate::autodiff::Tensor| (0..t.rows()).map(|i| t.get(i, i)).sum::<f64>();
    let mut out = String::new();
    writeln!(out, "space = {space}").unwrap();
    writeln!(out, "samples = {}", data.len()).unwrap();
    writeln!(out, "dim = {}", stats.dim()).unwrap();
    writeln!(out, "classes = {}", data.num_classes).unwrap();
    writeln!(out, "single_class = {}", stats.single_class).unwrap();
    writeln!(out, "trace_s_within = {:.6}", trace(&stats.s_within)).unwrap();
    writeln!(out, "trace_s_between = {:.6}", trace(&stats.s_between)).unwrap();
    writeln!(out, "fisher_score = {:.6}", stats.fisher_score).unwrap();
    writeln!(out, "intra_distance = {:.6}", diag.intra_distance).unwrap();
    writeln!(out, "inter_distance = {:.6}", diag.inter_distance).unwrap();
    let spectrum: Vec<String> = lda.eigenvalues.iter().map(|v| format!("{v:.6}")).collect();
    writeln!(out, "lda_eigenvalues = {}", spectrum.join(" ")).unwrap();
    writeln!(out, "lda_degenerate = {}", lda.degenerate).unwrap();
    write(dir, "report.txt", &out)
}

fn report(run: &Path, dir: &Path) -> Result<()> {
    let records = parse_epochs_csv(&read(&run.join("epochs.csv"))?)?;
    if records.is_empty() {
        return Err(NdaError::Config(format!(
            "{} holds no epochs",
            run.display()
        )));
    }
    let n = records.len();
    let k = (n / 10).max(1);
    let avg = |rs: &[EpochRecord], f: fn(&EpochRecord) -> f64| {
        rs.iter().map(f).sum::<f64>() / rs.len() as f64
    };
    let (first, last) = (&records[..k], &records[n - k..]);
    let best = records.iter().fold(&records[0], |b, r| {
        if r.val_accuracy > b.val_accuracy {
            r
        } else {
            b
        }
    });
    let mut out = String::new();
    writeln!(out, "epochs = {n}").unwrap();
    writeln!(out, "best_epoch = {}", best.epoch).unwrap();
    writeln!(out, "best_val_accuracy = {:.6}", best.val_accuracy).unwrap();
    writeln!(out, "window = {k}").unwrap();
    for (name, f) in [
        (
            "total_loss",
            (|r: &EpochRecord| r.total) as fn(&EpochRecord) -> f64,
        ),
        ("fisher_score", |r| r.diagnostics.fisher_score),
        ("intra_distance", |r| r.diagnostics.intra_distance),
        ("inter_distance", |r| r.diagnostics.inter_distance),
    ] {
        writeln!(out, "{name}_first = {:.6}", avg(first, f)).unwrap();
        writeln!(out, "{name}_last = {:.6}", avg(last, f)).unwrap();
    }
    write(dir, "report.txt", &out)
}
