//! Command-line front end: dataset generation, training, evaluation,
//! BEV plotting and the imbalance-ratio sweep.
//!
//! Exit codes: 0 ok, 2 config error, 3 IO error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossview3d::config::{Config, ConfigError, Mode};
use crossview3d::evaluator::{bev_plot, EvalReport};
use crossview3d::synthdata::{build_dataset, load_manifest, load_sample, Domain, DomainSample, SynthError};
use crossview3d::trainer::{load_checkpoint, TrainError, Trainer};

const OUT_ROOT_ENV: &str = "CROSSVIEW3D_OUT_ROOT";

#[derive(Parser)]
#[command(name = "crossview3d", about = "Cross-view monocular 3D detection testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file in key=value format.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set epochs=5 (repeatable). Overrides win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        cfg.apply_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic dataset.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --set n_roadside=N.
        #[arg(long)]
        n_roadside: Option<usize>,
        /// Shorthand for --set n_vehicle=N.
        #[arg(long)]
        n_vehicle: Option<usize>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (from `generate`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// only_road | only_veh | addon | iroam.
        #[arg(long)]
        mode: Option<String>,
        /// Drop the cross-domain contrastive term.
        #[arg(long)]
        no_cl: bool,
        /// Compute the contrastive term on full query channels instead of
        /// the semantic half.
        #[arg(long)]
        no_decouple: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// val | train.
        #[arg(long, default_value = "val")]
        split: String,
        /// roadside | vehicle.
        #[arg(long, default_value = "roadside")]
        domain: String,
        /// Restrict the report grid to one IoU threshold.
        #[arg(long)]
        iou: Option<f64>,
        /// Where to write report.json (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render BEV comparison images for the first frames of a split.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "roadside")]
        domain: String,
        /// Number of frames to render.
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roadside-data-ratio grid x training modes, combined into one CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fractions of n_roadside to test, comma separated.
        #[arg(long, default_value = "0.25,0.5,1.0")]
        fractions: String,
        /// Modes to run, comma separated.
        #[arg(long, default_value = "only_road,addon,iroam")]
        modes: String,
        /// Max concurrent runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numeric(m) | CliError::Other(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(io) => CliError::Io(io.to_string()),
            SynthError::Image(img) => CliError::Io(img.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Io(io) => CliError::Io(io.to_string()),
            TrainError::Synth(s) => CliError::from(s),
            other => CliError::Other(other.to_string()),
        }
    }
}

/// Relative output paths are rooted at $CROSSVIEW3D_OUT_ROOT when set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn parse_split(s: &str) -> Result<crossview3d::synthdata::Split, CliError> {
    match s {
        "val" => Ok(crossview3d::synthdata::Split::Val),
        "train" => Ok(crossview3d::synthdata::Split::Train),
        other => Err(CliError::Config(format!("invalid value `{other}` for key `split`: expected val|train"))),
    }
}

fn parse_domain(s: &str) -> Result<Domain, CliError> {
    match s {
        "roadside" => Ok(Domain::Roadside),
        "vehicle" => Ok(Domain::Vehicle),
        other => Err(CliError::Config(format!(
            "invalid value `{other}` for key `domain`: expected roadside|vehicle"
        ))),
    }
}

fn load_split(
    data: &Path,
    split: &str,
    domain: Domain,
) -> Result<Vec<DomainSample>, CliError> {
    let manifest = load_manifest(data)?;
    let entries = match (parse_split(split)?, domain) {
        (crossview3d::synthdata::Split::Val, Domain::Roadside) => &manifest.val.roadside,
        (crossview3d::synthdata::Split::Val, Domain::Vehicle) => &manifest.val.vehicle,
        (crossview3d::synthdata::Split::Train, Domain::Roadside) => &manifest.train.roadside,
        (crossview3d::synthdata::Split::Train, Domain::Vehicle) => &manifest.train.vehicle,
    };
    entries
        .iter()
        .map(|e| load_sample(data, e).map_err(CliError::from))
        .collect()
}

fn restricted_report(report: &EvalReport, iou: Option<f64>) -> EvalReport {
    let mut r = report.clone();
    if let Some(t) = iou {
        r.cells.retain(|c| (c.iou - t).abs() < 1e-12);
    }
    r
}

fn cmd_generate(
    cfg_args: &ConfigArgs,
    out: &Path,
    n_roadside: Option<usize>,
    n_vehicle: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = cfg_args.resolve()?;
    if let Some(n) = n_roadside {
        cfg.n_roadside = n;
    }
    if let Some(n) = n_vehicle {
        cfg.n_vehicle = n;
    }
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_kv_string())?;
    let manifest = build_dataset(&cfg, &out)?;
    println!(
        "dataset at {}: train {} roadside / {} vehicle, val {} roadside / {} vehicle",
        out.display(),
        manifest.train.roadside.len(),
        manifest.train.vehicle.len(),
        manifest.val.roadside.len(),
        manifest.val.vehicle.len()
    );
    Ok(())
}

fn cmd_train(
    cfg_args: &ConfigArgs,
    data: &Path,
    out: &Path,
    mode: Option<&str>,
    no_cl: bool,
    no_decouple: bool,
) -> Result<(), CliError> {
    let mut cfg = cfg_args.resolve()?;
    if let Some(m) = mode {
        cfg.set("mode", m)?;
    }
    if no_cl {
        cfg.use_cl = false;
    }
    if no_decouple {
        cfg.decouple = false;
    }
    let out = resolve_out(out);
    let mut trainer = Trainer::new(&cfg)?;
    let outcome = trainer.train(data, &out)?;
    if let Some(last) = outcome.epochs.last() {
        println!(
            "trained {} epochs (mode {}), final loss {:.4}, val AP3D-Mod@0.5 {}",
            outcome.epochs.len(),
            cfg.mode,
            last.total,
            last.val_ap3d_mod.map_or("-".into(), |v| format!("{v:.2}")),
        );
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    if let Some(report) = &outcome.final_report {
        println!("{}", report.table());
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    domain: &str,
    iou: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let trainer = load_checkpoint(checkpoint)?;
    let samples = load_split(data, split, parse_domain(domain)?)?;
    let report = restricted_report(&trainer.evaluate(&samples), iou);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Other(e.to_string()))?;
    println!("{}", report.table());
    println!("{json}");
    if let Some(out) = out {
        let out = resolve_out(out);
        fs::create_dir_all(&out)?;
        fs::write(out.join("report.json"), json)?;
    }
    Ok(())
}

fn cmd_plot(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    domain: &str,
    frames: usize,
    out: &Path,
) -> Result<(), CliError> {
    let trainer = load_checkpoint(checkpoint)?;
    let samples = load_split(data, split, parse_domain(domain)?)?;
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;
    let take: Vec<&DomainSample> = samples.iter().take(frames).collect();
    let preds = trainer.predict_frames(&take.iter().map(|s| (*s).clone()).collect::<Vec<_>>());
    for (i, (sample, frame)) in take.iter().zip(&preds).enumerate() {
        let path = out.join(format!("bev_{i:04}.png"));
        bev_plot(&frame.detections, &frame.gts, &sample.cam, &path)
            .map_err(|e| CliError::Io(e.to_string()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_sweep(
    cfg_args: &ConfigArgs,
    fractions: &str,
    modes: &str,
    workers: usize,
    out: &Path,
) -> Result<(), CliError> {
    let base = cfg_args.resolve()?;
    let fractions: Vec<f64> = fractions
        .split(',')
        .map(|p| {
            p.trim().parse::<f64>().map_err(|e| {
                CliError::Config(format!("invalid value `{p}` for key `fractions`: {e}"))
            })
        })
        .collect::<Result<_, _>>()?;
    let modes: Vec<Mode> = modes
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<Mode>()
                .map_err(|e| CliError::Config(format!("key `modes`: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let out = resolve_out(out);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), base.to_kv_string())?;

    // one shared dataset per fraction, then mode runs on top of it
    struct Job {
        fraction: f64,
        mode: Mode,
        cfg: Config,
        data: PathBuf,
        run_dir: PathBuf,
    }
    let mut jobs = Vec::new();
    for &f in &fractions {
        let mut cfg = base.clone();
        cfg.n_roadside = ((base.n_roadside as f64 * f).round() as usize).max(1);
        let data = out.join(format!("data_f{f}"));
        if !data.join("manifest.json").exists() {
            build_dataset(&cfg, &data)?;
        }
        for &mode in &modes {
            let mut run_cfg = cfg.clone();
            run_cfg.mode = mode;
            jobs.push(Job {
                fraction: f,
                mode,
                cfg: run_cfg,
                data: data.clone(),
                run_dir: out.join(format!("run_f{f}_{mode}")),
            });
        }
    }

    let workers = workers.max(1);
    let mut rows: Vec<(f64, Mode, Option<f64>)> = Vec::new();
    for chunk in jobs.chunks(workers) {
        let results: Vec<Result<(f64, Mode, Option<f64>), CliError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|job| {
                        scope.spawn(move || {
                            let mut trainer = Trainer::new(&job.cfg)?;
                            let outcome = trainer.train(&job.data, &job.run_dir)?;
                            let ap = outcome
                                .epochs
                                .last()
                                .and_then(|e| e.val_ap3d_mod);
                            Ok((job.fraction, job.mode, ap))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("sweep worker panicked"))
                    .collect()
            });
        for r in results {
            rows.push(r?);
        }
    }

    let mut csv = String::from("fraction,n_roadside,mode,val_ap3d_mod_iou05\n");
    for (f, mode, ap) in &rows {
        let n = ((base.n_roadside as f64 * f).round() as usize).max(1);
        csv.push_str(&format!(
            "{f},{n},{mode},{}\n",
            ap.map_or(String::from(""), |v| format!("{v:.4}"))
        ));
    }
    let csv_path = out.join("sweep.csv");
    fs::write(&csv_path, &csv)?;
    print!("{csv}");
    println!("csv: {}", csv_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate {
            cfg,
            out,
            n_roadside,
            n_vehicle,
        } => cmd_generate(cfg, out, *n_roadside, *n_vehicle),
        Command::Train {
            cfg,
            data,
            out,
            mode,
            no_cl,
            no_decouple,
        } => cmd_train(cfg, data, out, mode.as_deref(), *no_cl, *no_decouple),
        Command::Eval {
            checkpoint,
            data,
            split,
            domain,
            iou,
            out,
        } => cmd_eval(checkpoint, data, split, domain, *iou, out.as_deref()),
        Command::Plot {
            checkpoint,
            data,
            split,
            domain,
            frames,
            out,
        } => cmd_plot(checkpoint, data, split, domain, *frames, out),
        Command::Sweep {
            cfg,
            fractions,
            modes,
            workers,
            out,
        } => cmd_sweep(cfg, fractions, modes, *workers, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
