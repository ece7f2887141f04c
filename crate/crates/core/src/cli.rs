//! The `music` command line: `gen-synth`, `run`, `inspect`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::classifier::TrainSpec;
use crate::engine::{DeltaSchedule, Mode, MusicConfig};
use crate::episode::{EpisodeConfig, Setting};
use crate::evaluation::{run_benchmark, serialize_report, ReportFormat, RunReport};
use crate::feature_store::{default_manifest, generate_synthetic, load_store, save_store, Split, SyntheticConfig};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Overrides `--parallel` when set.
pub const THREADS_ENV: &str = "MUSIC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "music", version, about = "Semi-supervised few-shot classification by successive exclusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian-cluster feature store.
    GenSynth(GenSynthArgs),
    /// Run episodes on a feature store and report accuracy.
    Run(RunArgs),
    /// Print a store's header, class histogram and vector statistics.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a `.manifest.json` sidecar naming every class.
    #[arg(long)]
    pub manifest: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Run name; writes `<out>.report` (and `<out>.csv` with `--table`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub table: bool,
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    /// Unlabeled samples per class.
    #[arg(long, default_value_t = 30)]
    pub unlabeled: usize,
    /// Query samples per class.
    #[arg(long, default_value_t = 15)]
    pub queries: usize,
    #[arg(long, value_enum, default_value_t = Setting::Inductive)]
    pub setting: Setting,
    #[arg(long, default_value_t = 3)]
    pub distractors: usize,
    /// Pool samples per distractor class (default: --unlabeled).
    #[arg(long)]
    pub distractor_unlabeled: Option<usize>,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    pub mode: Mode,
    /// Reject threshold (default 1/ways).
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum, default_value_t = DeltaSchedule::Fixed)]
    pub delta_schedule: DeltaSchedule,
    #[arg(long, default_value_t = 1.0)]
    pub minent_weight: f64,
    #[arg(long, default_value_t = 0.7)]
    pub pos_threshold: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Give the head a bias vector.
    #[arg(long)]
    pub bias: bool,
    /// Drop the support cross-entropy from the pseudo-label stages.
    #[arg(long)]
    pub no_anchor: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub store: PathBuf,
}

impl RunArgs {
    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            ways: self.ways,
            shots: self.shots,
            unlabeled_per_class: self.unlabeled,
            queries_per_class: self.queries,
            setting: self.setting,
            distractor_classes: self.distractors,
            distractor_unlabeled_per_class: self.distractor_unlabeled,
            episodes: self.episodes,
            base_seed: self.seed,
        }
    }

    pub fn music_config(&self) -> MusicConfig {
        MusicConfig {
            delta: self.delta,
            delta_schedule: self.delta_schedule,
            minent_weight: self.minent_weight,
            mode: self.mode,
            pos_threshold: self.pos_threshold,
            train: TrainSpec {
                steps: self.steps,
                learning_rate: self.lr,
                momentum: self.momentum,
            },
            anchor_support: !self.no_anchor,
            bias: self.bias,
        }
    }

    fn threads(&self) -> crate::Result<usize> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
            Err(_) => Ok(self.parallel),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Format(_) | Error::Truncated(_) | Error::Data { .. } | Error::Manifest(_) => EXIT_FORMAT,
        Error::Numeric(_) | Error::Training { .. } => EXIT_NUMERIC,
        Error::Config(_) | Error::Sampling(_) => EXIT_USAGE,
        Error::Contract(_) => EXIT_INTERNAL,
    }
}

fn with_extension(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(0, e))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io(0, e)
}

pub fn gen_synth(args: &GenSynthArgs, out: &mut dyn Write) -> crate::Result<()> {
    let cfg = SyntheticConfig {
        num_classes: args.classes,
        dim: args.dim,
        samples_per_class: args.per_class,
        separation: args.separation,
        noise_sigma: args.sigma,
        seed: args.seed,
    };
    let mut store = generate_synthetic(&cfg)?;
    if args.manifest {
        store.set_manifest(default_manifest(cfg.num_classes, Split::Novel))?;
    }
    save_store(&store, &args.out)?;
    writeln!(
        out,
        "wrote {}: {} classes, dim {}, {} records",
        args.out.display(),
        store.num_classes(),
        store.dim(),
        store.len()
    )
    .map_err(out_err)
}

/// Executes a run and writes its report files. Returns the report.
pub fn run(args: &RunArgs, out: &mut dyn Write) -> crate::Result<RunReport> {
    let store = load_store(&args.store)?;
    let episode_cfg = args.episode_config();
    let music = args.music_config();
    let label = args.store.display().to_string();
    let report = run_benchmark(&store, &label, &episode_cfg, &music, args.threads()?)?;
    if let Some(base) = &args.out {
        write_file(&with_extension(base, "report"), &serialize_report(&report, ReportFormat::Json)?)?;
        if args.table {
            write_file(&with_extension(base, "csv"), &serialize_report(&report, ReportFormat::Table)?)?;
        }
    }
    let d = &report.diagnostics;
    writeln!(
        out,
        "{} {}-way {}-shot, {} episodes: {}",
        report.mode,
        episode_cfg.ways,
        episode_cfg.shots,
        report.episodes,
        report.accuracy_line()
    )
    .map_err(out_err)?;
    writeln!(
        out,
        "negative rounds {:.2}, positive error {:.2}% ({:.1}/{:.1}), proportion {:.2}%",
        d.mean_negative_iterations,
        100.0 * d.pos_error.pooled_rate,
        d.pos_error.mean_wrong,
        d.pos_error.mean_assigned,
        100.0 * d.pos_proportion.mean
    )
    .map_err(out_err)?;
    Ok(report)
}

pub fn inspect(args: &InspectArgs, out: &mut dyn Write) -> crate::Result<()> {
    let store = load_store(&args.store)?;
    let mut w = |s: String| writeln!(out, "{s}").map_err(out_err);
    w(format!("store: {}", args.store.display()))?;
    w(format!(
        "dim {}  classes {}  records {}",
        store.dim(),
        store.num_classes(),
        store.len()
    ))?;
    w("class  count  name".into())?;
    for (class, count) in store.class_counts().iter().enumerate() {
        let name = store
            .manifest()
            .and_then(|m| m.classes.get(&(class as u32)))
            .map(|c| format!("{} ({:?})", c.name, c.split).to_lowercase())
            .unwrap_or_default();
        w(format!("{class:>5}  {count:>5}  {name}"))?;
    }
    if !store.is_empty() {
        let norms: Vec<f64> = store
            .records()
            .map(|(_, v)| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
            .collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = norms.iter().copied().fold(0.0, f64::max);
        let (lo, hi) = store
            .records()
            .flat_map(|(_, v)| v.iter().copied())
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        w(format!("vector norm: mean {mean:.4}  min {min:.4}  max {max:.4}"))?;
        w(format!("component range: [{lo:.4}, {hi:.4}]"))?;
    }
    Ok(())
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> crate::Result<()> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a, out),
        Command::Run(a) => run(a, out).map(|_| ()),
        Command::Inspect(a) => inspect(a, out),
    }
}

/// Parses `args`, runs the command, and returns the process exit status.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if code == EXIT_OK {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
