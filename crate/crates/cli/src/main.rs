//! `xmodal`: generate corpora, train the alignment head, evaluate and ground.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 divergence,
//! 4 shape or dimension mismatch.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use xmodal_core::align::{prepare_all, ViewMode};
use xmodal_core::eval::{grounding, summarize_grounding, StudyGrounding};
use xmodal_core::synth::SynthConfig;
use xmodal_core::train::history_csv;
use xmodal_core::{
    evaluate, fd_check, fit, generate, read_corpus, write_corpus, Checkpoint, Corpus, Error, EvalOptions, ExtLoss,
    FdOptions, GridShape, MapKind, MetricsReport, RankScore, TrainConfig,
};

use crate::config::{load_json, CliError};

#[derive(Parser, Debug)]
#[command(name = "xmodal", version, about = "Cross-modal region/word alignment head")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RankArg {
    Agg,
    Global,
    Sum,
}

impl From<RankArg> for RankScore {
    fn from(r: RankArg) -> Self {
        match r {
            RankArg::Agg => RankScore::Agg,
            RankArg::Global => RankScore::Global,
            RankArg::Sum => RankScore::Sum,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ViewsArg {
    Both,
    Frontal,
}

impl From<ViewsArg> for ViewMode {
    fn from(v: ViewsArg) -> Self {
        match v {
            ViewsArg::Both => ViewMode::Both,
            ViewsArg::Frontal => ViewMode::FrontalOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MapArg {
    Attention,
    Cosine,
}

impl From<MapArg> for MapKind {
    fn from(m: MapArg) -> Self {
        match m {
            MapArg::Attention => MapKind::Attention,
            MapArg::Cosine => MapKind::Cosine,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExtArg {
    Summed,
    PerDirection,
}

impl From<ExtArg> for ExtLoss {
    fn from(e: ExtArg) -> Self {
        match e {
            ExtArg::Summed => ExtLoss::Summed,
            ExtArg::PerDirection => ExtLoss::PerDirection,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    Gen {
        /// SynthConfig JSON; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on one corpus, select on another.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// TrainConfig JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoint.lmtc, history.csv and metrics.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        rank_score: Option<RankArg>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        views: Option<ViewsArg>,
        #[arg(long, value_enum)]
        ext_loss: Option<ExtArg>,
    },
    /// Retrieval, precision and grounding metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "agg")]
        rank_score: RankArg,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum, default_value = "both")]
        views: ViewsArg,
        #[arg(long)]
        no_positional: bool,
        #[arg(long, value_enum, default_value = "attention")]
        map: MapArg,
    },
    /// Phrase maps and CNR for every grounding record.
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for per-study map files and grounding.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum, default_value = "both")]
        views: ViewsArg,
        #[arg(long)]
        no_positional: bool,
        #[arg(long, value_enum, default_value = "attention")]
        map: MapArg,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Corpus to draw the batch from; a small random one if omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        studies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum, default_value = "summed")]
        ext_loss: ExtArg,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XMODAL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    match cli.command {
        Command::Gen { config, out, seed } => cmd_gen(config.as_deref(), &out, seed),
        Command::Train {
            train,
            val,
            config,
            out,
            seed,
            rank_score,
            lambda,
            tau,
            patience,
            max_epochs,
            batch_size,
            lr,
            views,
            ext_loss,
        } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => load_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = rank_score {
                cfg.rank_score = v.into();
            }
            if let Some(v) = lambda {
                cfg.lambda = v;
            }
            if let Some(v) = tau {
                cfg.tau = v;
            }
            if let Some(v) = patience {
                cfg.patience = v;
            }
            if let Some(v) = max_epochs {
                cfg.max_epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = views {
                cfg.views = v.into();
            }
            if let Some(v) = ext_loss {
                cfg.ext_loss = v.into();
            }
            cmd_train(&train, &val, &out, &cfg)
        }
        Command::Eval {
            checkpoint,
            corpus,
            out,
            rank_score,
            lambda,
            views,
            no_positional,
            map,
        } => {
            let mut opts = EvalOptions {
                rank_score: rank_score.into(),
                map_kind: map.into(),
                ..Default::default()
            };
            opts.prepare.views = views.into();
            opts.prepare.positional = !no_positional;
            cmd_eval(&checkpoint, &corpus, out.as_deref(), lambda, &opts)
        }
        Command::Ground {
            checkpoint,
            corpus,
            out,
            lambda,
            views,
            no_positional,
            map,
        } => {
            let mut opts = EvalOptions {
                map_kind: map.into(),
                ..Default::default()
            };
            opts.prepare.views = views.into();
            opts.prepare.positional = !no_positional;
            cmd_ground(&checkpoint, &corpus, &out, lambda, &opts)
        }
        Command::Gradcheck {
            corpus,
            studies,
            seed,
            step,
            samples,
            lambda,
            tau,
            ext_loss,
            out,
        } => {
            let opts = FdOptions {
                step,
                samples_per_block: samples,
                seed,
                corrupt: None,
            };
            cmd_gradcheck(corpus.as_deref(), studies, lambda, tau, ext_loss.into(), opts, out.as_deref())
        }
    }
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if !p.is_file() {
        return Err(CliError::Io(format!("{}: no such file", p.display())));
    }
    Ok(())
}

fn require_parent(p: &Path) -> Result<(), CliError> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(CliError::Io(format!("{}: no such directory", dir.display())))
        }
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    if let Some(p) = config {
        require_file(p)?;
    }
    require_parent(out)?;
    let mut cfg: SynthConfig = match config {
        Some(p) => load_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate(&cfg)?;
    let manifest = write_corpus(&corpus, out)?;
    let c = &manifest.counts;
    println!(
        "{}: {} studies ({} with lateral), {} tokens, {} grounding records, {}",
        out.display(),
        c.studies,
        c.with_lateral,
        c.tokens,
        c.grounding,
        manifest.checksum
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    train_config: &'a TrainConfig,
    train_corpus: String,
    val_corpus: String,
    best_epoch: usize,
    epochs_run: usize,
    best_r_sum: f64,
    report: MetricsReport,
}

fn eval_options(cfg: &TrainConfig) -> EvalOptions {
    EvalOptions {
        rank_score: cfg.rank_score,
        ks: cfg.eval_ks.clone(),
        prepare: cfg.prepare_options(),
        ..Default::default()
    }
}

fn cmd_train(train: &Path, val: &Path, out: &Path, cfg: &TrainConfig) -> Result<(), CliError> {
    require_file(train)?;
    require_file(val)?;
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let train_set = read_corpus(train)?;
    let val_set = read_corpus(val)?;
    let ckpt_path = out.join("checkpoint.lmtc");
    let outcome = match fit(&train_set, &val_set, cfg) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, last_good }) => {
            if let Some(ck) = &last_good {
                ck.save(&ckpt_path)?;
                eprintln!("last good checkpoint (epoch {}) written to {}", ck.epoch, ckpt_path.display());
            }
            return Err(Error::Diverged { epoch, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    outcome.best.save(&ckpt_path)?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history))
        .map_err(|e| CliError::Io(format!("history.csv: {e}")))?;
    let report = evaluate(&val_set, &outcome.best.params(), &eval_options(cfg))?;
    let summary = TrainSummary {
        train_config: cfg,
        train_corpus: train.display().to_string(),
        val_corpus: val.display().to_string(),
        best_epoch: outcome.best.epoch,
        epochs_run: outcome.history.len(),
        best_r_sum: outcome.best.r_sum,
        report,
    };
    write_json(&out.join("metrics.json"), &summary)?;
    println!(
        "best epoch {} of {}, R_sum {}; wrote {}",
        summary.best_epoch,
        summary.epochs_run,
        summary.best_r_sum,
        out.display()
    );
    Ok(())
}

fn load_compatible(checkpoint: &Path, corpus: &Path, lambda: Option<f64>) -> Result<(Checkpoint, Corpus), CliError> {
    require_file(checkpoint)?;
    require_file(corpus)?;
    let mut ck = Checkpoint::load(checkpoint)?;
    let data = read_corpus(corpus)?;
    if ck.dim() != data.dim {
        return Err(Error::DimMismatch {
            expected: ck.dim(),
            found: data.dim,
        }
        .into());
    }
    if let Some(l) = lambda {
        ck.lambda = l;
    }
    Ok((ck, data))
}

fn cmd_eval(
    checkpoint: &Path,
    corpus: &Path,
    out: Option<&Path>,
    lambda: Option<f64>,
    opts: &EvalOptions,
) -> Result<(), CliError> {
    if let Some(p) = out {
        require_parent(p)?;
    }
    let (ck, data) = load_compatible(checkpoint, corpus, lambda)?;
    let report = evaluate(&data, &ck.params(), opts)?;
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", report.to_json()?),
    }
    Ok(())
}

#[derive(Serialize)]
struct GroundReport {
    lambda: f64,
    map_kind: MapKind,
    views: ViewMode,
    positional: bool,
    summary: Option<xmodal_core::eval::GroundingSummary>,
    studies: Vec<StudyGrounding>,
}

fn cmd_ground(checkpoint: &Path, corpus: &Path, out: &Path, lambda: Option<f64>, opts: &EvalOptions) -> Result<(), CliError> {
    let (ck, data) = load_compatible(checkpoint, corpus, lambda)?;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let params = ck.params();
    let results = grounding(&data, &params, opts.prepare, opts.map_kind)?;
    let io = |p: PathBuf, bytes: &[u8]| fs::write(&p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())));
    for (g, maps) in &results {
        for (k, m) in maps.iter().enumerate() {
            io(out.join(format!("{}_{k}.csv", g.id)), m.to_csv().as_bytes())?;
            io(out.join(format!("{}_{k}.pgm", g.id)), &m.to_pgm())?;
        }
    }
    let studies: Vec<StudyGrounding> = results.into_iter().map(|(g, _)| g).collect();
    let report = GroundReport {
        lambda: params.lambda,
        map_kind: opts.map_kind,
        views: opts.prepare.views,
        positional: opts.prepare.positional,
        summary: summarize_grounding(&studies),
        studies,
    };
    write_json(&out.join("grounding.json"), &report)?;
    match &report.summary {
        Some(s) => println!("{} boxes, mean CNR {:.4}; maps in {}", s.boxes, s.mean, out.display()),
        None => println!("no grounding records in {}", corpus.display()),
    }
    Ok(())
}

/// Four-study batch with lateral views, 2×3 grid, four tokens and d = 8.
fn gradcheck_corpus(studies: usize, seed: u64) -> Result<Corpus, Error> {
    generate(&SynthConfig {
        num_studies: studies,
        dim: 8,
        grid: GridShape::new(2, 3),
        tokens: 4,
        vocab_size: 4,
        concepts_per_study: 2,
        background_directions: 2,
        noise_sigma: 1.0,
        feature_scale: 1.0,
        lateral_fraction: 1.0,
        max_box_side: 1,
        max_padding: 0,
        seed,
        ..Default::default()
    })
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    studies: usize,
    seed: u64,
    lambda: f64,
    tau: f64,
    ext_loss: ExtLoss,
    samples_per_block: usize,
    report: &'a xmodal_core::FdReport,
}

fn cmd_gradcheck(
    corpus: Option<&Path>,
    studies: usize,
    lambda: Option<f64>,
    tau: Option<f64>,
    ext: ExtLoss,
    opts: FdOptions,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if studies == 0 {
        return Err(CliError::Config("--studies must be at least 1".into()));
    }
    if let Some(p) = out {
        require_parent(p)?;
    }
    let data = match corpus {
        Some(p) => {
            require_file(p)?;
            read_corpus(p)?
        }
        None => gradcheck_corpus(studies, opts.seed)?,
    };
    let n = studies.min(data.studies.len());
    let cfg = TrainConfig {
        seed: opts.seed,
        lambda: lambda.unwrap_or(xmodal_core::params::DEFAULT_LAMBDA),
        tau: tau.unwrap_or(xmodal_core::params::DEFAULT_TAU),
        ..Default::default()
    };
    cfg.validate()?;
    let batch = prepare_all(&data.studies[..n], cfg.prepare_options())?;
    let (params, _) = xmodal_core::train::init_params(data.dim, &cfg);
    let report = fd_check(&batch, &params, ext, opts)?;
    print!("{}", report.table());
    if let Some(p) = out {
        write_json(
            p,
            &GradcheckOutput {
                studies: n,
                seed: opts.seed,
                lambda: params.lambda,
                tau: params.tau,
                ext_loss: ext,
                samples_per_block: opts.samples_per_block,
                report: &report,
            },
        )?;
    }
    Ok(())
}
