//! Command-line front end.
//!
//! Every command is a library function writing its report to a caller-supplied
//! sink; [`run`] parses arguments and maps failures to exit codes: 0 on
//! success, 1 for usage and configuration errors, 2 for runtime errors.
//! Failures print a single `error: <category>: <message>` line.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::archive::Archive;
use crate::autograd::{CheckStatus, GradcheckOptions};
use crate::config::{parse_config, print_config, Config, DataConfig, DataSource};
use crate::dataio::{load_image_folder, load_image_folder_any_size, make_synthetic_task, partition, PairedImageDataset};
use crate::error::Error;
use crate::network::{gradcheck_hidden_tier, OpNetwork};
use crate::oplib::{register_builtin_library, OperatorSetLibrary};
use crate::par::with_threads;
use crate::trainer::{evaluate, export_stats, fmt_float, restore, write_summary, Partitions, Trainer, TrainingRecord};

pub const THREADS_ENV: &str = "ONNKIT_THREADS";

/// A failed command: a short category plus the underlying error.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub source: Error,
}

impl CliError {
    pub fn new(category: &'static str, source: Error) -> Self {
        Self { category, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category {
            "usage" | "config" => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.source.to_string().replace('\n', " ");
        write!(f, "error: {}: {msg}", self.category)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

trait Category<T> {
    fn category(self, category: &'static str) -> CliResult<T>;
}

impl<T> Category<T> for crate::Result<T> {
    fn category(self, category: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError::new(category, e))
    }
}

fn io<T>(r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::new("io", e.into()))
}

#[derive(Debug, Parser)]
#[command(name = "onnkit", version, about = "Operational neural networks: train, evaluate, check gradients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train over every fold of the configured dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (overridden by ONNKIT_THREADS).
        #[arg(long)]
        jobs: Option<usize>,
        /// Master seed, replacing the config value.
        #[arg(long)]
        seed: Option<u64>,
        /// Fold count, replacing the config value.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Evaluate a checkpoint on its own partitions or on a PGM folder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Finite-difference check of every operator set named in a config.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the architecture, output shapes and parameter count.
    Describe {
        #[arg(long)]
        config: PathBuf,
        /// Input size `N` or `HxW` (defaults to the data size, else 32).
        #[arg(long)]
        size: Option<String>,
    },
}

/// Overrides applied on top of a config file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub folds: Option<usize>,
}

pub fn read_config(path: &Path, lib: &OperatorSetLibrary) -> CliResult<Config> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new("config", Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))?;
    parse_config(&text, lib).category("config")
}

pub fn load_dataset(d: &DataConfig) -> crate::Result<PairedImageDataset> {
    match &d.source {
        DataSource::Synthetic { task, count, channels } => {
            make_synthetic_task(*task, *count, d.size.0, *channels, d.seed)
        }
        DataSource::Folder { path } => load_image_folder(path, d.size).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            e => e,
        }),
    }
}

fn fold_partitions(cfg: &Config, ds: &PairedImageDataset, fold: usize) -> crate::Result<Partitions> {
    let d = cfg.data.as_ref().expect("validated");
    let splits = partition(ds.len(), d.folds, d.val_fraction, d.seed)?;
    let split = splits
        .get(fold)
        .ok_or_else(|| Error::TooFewSamples(format!("fold {fold} of {}", splits.len())))?;
    Ok(Partitions::from_split(ds, split))
}

fn check_geometry(net: &OpNetwork, sample: &[usize]) -> crate::Result<()> {
    let [c, h, w] = *sample else {
        return Err(Error::SizeMismatch(format!("samples must be [C, M, N], got {sample:?}")));
    };
    let shapes = net.output_shapes(h, w)?;
    let out = shapes.last().unwrap();
    if c != net.in_channels || *out != [c, h, w] {
        return Err(Error::SizeMismatch(format!(
            "network maps {}x{h}x{w} to {}x{}x{}, data samples are {c}x{h}x{w}",
            net.in_channels, out[0], out[1], out[2]
        )));
    }
    Ok(())
}

/// Trains every fold and writes `fold_<f>/{checkpoint.onn, <partition>.csv}`
/// plus `summary.csv` under `out_dir`. Returns the fold records.
pub fn cmd_train(
    config: &Path,
    out_dir: &Path,
    overrides: Overrides,
    lib: &OperatorSetLibrary,
    out: &mut dyn Write,
) -> CliResult<Vec<TrainingRecord>> {
    let mut cfg = read_config(config, lib)?;
    if let Some(seed) = overrides.seed {
        cfg.trainer.seed = seed;
    }
    let Some(data) = cfg.data.as_mut() else {
        return Err(CliError::new(
            "config",
            Error::Validation {
                line: 0,
                msg: "training needs a [data] section".into(),
            },
        ));
    };
    if let Some(folds) = overrides.folds {
        data.folds = folds;
    }
    let ds = load_dataset(cfg.data.as_ref().unwrap()).category("data")?;
    let folds = cfg.data.as_ref().unwrap().folds;
    let metrics = cfg.metric_specs().category("config")?;
    let text = print_config(&cfg);
    io(fs::create_dir_all(out_dir))?;
    let mut records = Vec::new();
    for fold in 0..folds {
        let parts = fold_partitions(&cfg, &ds, fold).category("data")?;
        let net = cfg.network.build(lib).category("config")?;
        check_geometry(&net, ds.sample_shape().unwrap_or(&[])).category("data")?;
        let mut trainer = Trainer::new(net, parts, cfg.trainer.clone(), metrics.clone()).category("train")?;
        trainer.config_text = text.clone();
        trainer.fold = fold;
        trainer.train().category("train")?;
        let dir = out_dir.join(format!("fold_{}", fold + 1));
        export_stats(&trainer.record, &dir).category("io")?;
        trainer.save_all(dir.join("checkpoint.onn")).category("io")?;
        let r = &trainer.record;
        let mut line = format!("fold {}:", fold + 1);
        for b in &r.best {
            line.push_str(&format!(" {}/{}={}", b.metric, b.partition, fmt_float(b.value)));
        }
        io(writeln!(out, "{line}"))?;
        for failure in &r.failures {
            io(writeln!(out, "fold {}: {failure}", fold + 1))?;
        }
        records.push(trainer.record);
    }
    let summary = out_dir.join("summary.csv");
    write_summary(&records, &summary).category("io")?;
    io(writeln!(out, "summary: {}", summary.display()))?;
    Ok(records)
}

/// One evaluated value: `(label, partition, column, value)`.
pub type EvalLine = (String, String, String, f64);

/// Evaluates a checkpoint. Without `data`, the final parameters are
/// evaluated on the checkpoint's own partitions and every best state is
/// re-evaluated on the partition it was selected on. With `data`, every
/// state is evaluated on that PGM folder.
pub fn cmd_eval(
    checkpoint: &Path,
    data: Option<&Path>,
    lib: &OperatorSetLibrary,
    out: &mut dyn Write,
) -> CliResult<Vec<EvalLine>> {
    let archive = Archive::read(checkpoint).category("checkpoint")?;
    let (net, _, record) = restore(&archive, lib).category("checkpoint")?;
    let cfg = parse_config(archive.str("config/text").category("checkpoint")?, lib).category("checkpoint")?;
    let metrics = cfg.metric_specs().category("checkpoint")?;
    let fold = archive.u64("meta/fold").category("checkpoint")? as usize;
    let mode = cfg.trainer.parallelism;
    let mut lines: Vec<EvalLine> = Vec::new();
    let with_params = |params: &[crate::tensor::Tensor]| {
        let mut n = net.clone();
        n.set_parameters(params).map(|_| n)
    };
    match data {
        Some(dir) => {
            let ds = load_image_folder_any_size(dir).category("data")?;
            check_geometry(&net, ds.sample_shape().unwrap_or(&[])).category("data")?;
            let mut states = vec![("final".to_string(), net.parameters())];
            states.extend(
                record
                    .best
                    .iter()
                    .map(|b| (format!("best {}/{}", b.metric, b.partition), b.params.clone())),
            );
            for (label, params) in states {
                let n = with_params(&params).category("checkpoint")?;
                let values = evaluate(&n, &ds, &metrics, mode).category("eval")?;
                for (c, v) in record.columns.iter().zip(values) {
                    lines.push((label.clone(), "data".into(), c.clone(), v));
                }
            }
        }
        None => {
            let ds = load_dataset(cfg.data.as_ref().expect("checkpoints carry a data section")).category("data")?;
            let parts = fold_partitions(&cfg, &ds, fold).category("data")?;
            check_geometry(&net, ds.sample_shape().unwrap_or(&[])).category("data")?;
            for p in &record.partitions {
                let values = evaluate(&net, parts.get(p).unwrap(), &metrics, mode).category("eval")?;
                for (c, v) in record.columns.iter().zip(values) {
                    lines.push(("final".into(), p.clone(), c.clone(), v));
                }
            }
            for b in &record.best {
                let n = with_params(&b.params).category("checkpoint")?;
                let values = evaluate(&n, parts.get(&b.partition).unwrap(), &metrics, mode).category("eval")?;
                let c = record.columns.iter().position(|c| *c == b.metric).unwrap();
                lines.push(("best".into(), b.partition.clone(), b.metric.clone(), values[c]));
            }
        }
    }
    for (label, p, c, v) in &lines {
        io(writeln!(out, "{label} {p} {c} {}", fmt_float(*v)))?;
    }
    Ok(lines)
}

/// Result of checking one operator set.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub set: usize,
    pub label: String,
    pub max_rel_err: f64,
    pub status: CheckStatus,
}

/// Runs the finite-difference check on every operator set of a config and
/// prints a table. Fails with category `gradcheck` unless every set passes.
pub fn cmd_gradcheck(config: &Path, lib: &OperatorSetLibrary, out: &mut dyn Write) -> CliResult<Vec<GradcheckRow>> {
    let cfg = read_config(config, lib)?;
    let opts = GradcheckOptions {
        h: 1e-6,
        tol: 1e-4,
        tie_margin: 1e-4,
    };
    let mut rows = Vec::new();
    io(writeln!(out, "{:>4}  {:<28}  {:>12}  status", "set", "operators", "max_rel_err"))?;
    for set in cfg.network.operator_sets(lib) {
        let label = lib.set(set).category("config")?.label();
        let r = gradcheck_hidden_tier(lib, &[set], cfg.network.in_channels, cfg.trainer.seed ^ set as u64, 20, opts)
            .category("gradcheck")?;
        let status = match r.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::TieDetected => "TIES",
        };
        io(writeln!(out, "{set:>4}  {label:<28}  {:>12.3e}  {status}", r.worst()))?;
        rows.push(GradcheckRow {
            set,
            label,
            max_rel_err: r.worst(),
            status: r.status,
        });
    }
    let failed = rows.iter().filter(|r| r.status != CheckStatus::Pass).count();
    if failed > 0 {
        return Err(CliError::new(
            "gradcheck",
            Error::ShapeContractViolation(format!("{failed} of {} operator sets failed", rows.len())),
        ));
    }
    Ok(rows)
}

pub fn parse_size(s: &str) -> Option<(usize, usize)> {
    match s.split_once('x') {
        Some((h, w)) => Some((h.trim().parse().ok()?, w.trim().parse().ok()?)),
        None => s.trim().parse().ok().map(|k| (k, k)),
    }
}

pub fn cmd_describe(
    config: &Path,
    size: Option<(usize, usize)>,
    lib: &OperatorSetLibrary,
    out: &mut dyn Write,
) -> CliResult<String> {
    let cfg = read_config(config, lib)?;
    let (h, w) = size.or(cfg.data.as_ref().map(|d| d.size)).unwrap_or((32, 32));
    let net = cfg.network.build(lib).category("config")?;
    let text = net.describe(h, w).category("config")?;
    io(out.write_all(text.as_bytes()))?;
    Ok(text)
}

/// Thread count from `ONNKIT_THREADS` (if set) or `--jobs`.
pub fn resolve_jobs(flag: Option<usize>, env: Option<&str>) -> CliResult<Option<usize>> {
    match env {
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::new(
                "usage",
                Error::Validation {
                    line: 0,
                    msg: format!("{THREADS_ENV} must be a positive integer, got '{v}'"),
                },
            )),
        },
        None => Ok(flag.filter(|&n| n > 0)),
    }
}

fn dispatch(command: Command, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let lib = register_builtin_library();
    let env = std::env::var(THREADS_ENV).ok();
    let jobs = match &command {
        Command::Train { jobs, .. } | Command::Eval { jobs, .. } | Command::Gradcheck { jobs, .. } => *jobs,
        Command::Describe { .. } => None,
    };
    let jobs = resolve_jobs(jobs, env.as_deref())?;
    let job = move || -> CliResult<()> {
        match command {
            Command::Train {
                config,
                out: dir,
                seed,
                folds,
                ..
            } => cmd_train(&config, &dir, Overrides { seed, folds }, &lib, out).map(drop),
            Command::Eval { checkpoint, data, .. } => cmd_eval(&checkpoint, data.as_deref(), &lib, out).map(drop),
            Command::Gradcheck { config, .. } => cmd_gradcheck(&config, &lib, out).map(drop),
            Command::Describe { config, size } => {
                let size = match size {
                    Some(s) => Some(parse_size(&s).ok_or_else(|| {
                        CliError::new(
                            "usage",
                            Error::Validation {
                                line: 0,
                                msg: format!("invalid --size '{s}' (expected N or HxW)"),
                            },
                        )
                    })?),
                    None => None,
                };
                cmd_describe(&config, size, &lib, out).map(drop)
            }
        }
    };
    match jobs {
        Some(n) => with_threads(n, job),
        None => job(),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jobs_resolution() {
        assert_eq!(resolve_jobs(Some(3), None).unwrap(), Some(3));
        assert_eq!(resolve_jobs(Some(3), Some("5")).unwrap(), Some(5));
        assert_eq!(resolve_jobs(None, None).unwrap(), None);
        assert_eq!(resolve_jobs(None, Some("zero")).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn error_lines() {
        let e = CliError::new("data", Error::MissingPair("07".into()));
        let line = e.to_string();
        assert!(line.starts_with("error: data: ") && line.contains("07"), "{line}");
        assert_eq!(e.exit_code(), 2);
        assert_eq!(CliError::new("config", Error::ConstantTarget).exit_code(), 1);
    }

    #[test]
    fn size_flag() {
        assert_eq!(parse_size("32"), Some((32, 32)));
        assert_eq!(parse_size("16x24"), Some((16, 24)));
        assert_eq!(parse_size("x"), None);
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["onnkit", "frobnicate"], &mut out, &mut err), 1);
        assert_eq!(run(["onnkit", "--help"], &mut out, &mut err), 0);
        assert!(String::from_utf8(out).unwrap().contains("gradcheck"));
    }
}
