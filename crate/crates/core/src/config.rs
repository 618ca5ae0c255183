//! INI-style experiment configuration.
//!
//! ```text
//! [network]
//! in_channels = 1
//! tier_sizes = 12, 32, 1
//! kernel_sizes = 21, 7, 3
//! operators = 1; 6; 3
//! sampling_factors = 2, -2, 1
//!
//! [trainer]
//! optimizer = adam
//! lr = 0.01
//! epochs = 300
//! metrics = snr
//!
//! [data]
//! source = synthetic
//! task = nonlinear-map
//! count = 64
//! size = 16
//! ```
//!
//! Lists are comma-separated. `operators` holds one entry per tier separated
//! by `;`; an entry is either a single operator set shared by every neuron of
//! the tier or a comma-separated list with one set per neuron. A set is a
//! library index or a `nodal/pool/activation` name triple. Kernel sizes are
//! `k` or `MxN`. `#` starts a comment.

use std::collections::HashMap;
use std::fmt::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;

use crate::dataio::TaskKind;
use crate::error::{Error, Result};
use crate::network::{InitScheme, OpNetwork, TierSpec};
use crate::oplib::{OpConstants, OperatorSetLibrary};
use crate::optim::{OptimizerSettings, SUPPORTED};
use crate::par::Parallelism;
use crate::trainer::{builtin_metric, MetricSpec, TrainerConfig};

/// Reference to an operator set of a library.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpRef {
    Index(usize),
    Named {
        nodal: String,
        pool: String,
        activation: String,
    },
}

impl OpRef {
    pub fn resolve(&self, lib: &OperatorSetLibrary) -> Option<usize> {
        match self {
            OpRef::Index(i) => (*i < lib.len()).then_some(*i),
            OpRef::Named {
                nodal,
                pool,
                activation,
            } => lib.find(nodal, pool, activation),
        }
    }
}

impl fmt::Display for OpRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpRef::Index(i) => write!(f, "{i}"),
            OpRef::Named {
                nodal,
                pool,
                activation,
            } => write!(f, "{nodal}/{pool}/{activation}"),
        }
    }
}

impl FromStr for OpRef {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Ok(i) = s.parse() {
            return Ok(OpRef::Index(i));
        }
        match s.split('/').map(str::trim).collect::<Vec<_>>()[..] {
            [n, p, a] if [n, p, a].iter().all(|x| is_name(x)) => Ok(OpRef::Named {
                nodal: n.into(),
                pool: p.into(),
                activation: a.into(),
            }),
            _ => Err(format!("'{s}' is neither a set index nor nodal/pool/activation")),
        }
    }
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub tier_sizes: Vec<usize>,
    pub kernel_sizes: Vec<(usize, usize)>,
    /// Per tier: one shared set or one per neuron.
    pub operators: Vec<Vec<OpRef>>,
    pub sampling_factors: Vec<i32>,
    pub constants: OpConstants,
    pub init: InitScheme,
    pub init_seed: u64,
}

impl NetworkConfig {
    pub fn tier_specs(&self, lib: &OperatorSetLibrary) -> Result<Vec<TierSpec>> {
        (0..self.tier_sizes.len())
            .map(|t| {
                let operators = self.operators[t]
                    .iter()
                    .map(|r| {
                        r.resolve(lib)
                            .ok_or_else(|| Error::UnknownOperatorSet {
                                index: match r {
                                    OpRef::Index(i) => *i,
                                    OpRef::Named { .. } => usize::MAX,
                                },
                                len: lib.len(),
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TierSpec {
                    neurons: self.tier_sizes[t],
                    kernel: self.kernel_sizes[t],
                    operators,
                    sampling: self.sampling_factors[t],
                })
            })
            .collect()
    }

    pub fn build(&self, lib: &OperatorSetLibrary) -> Result<OpNetwork> {
        OpNetwork::new(
            self.in_channels,
            &self.tier_specs(lib)?,
            lib,
            self.constants,
            self.init,
            self.init_seed,
        )
    }

    /// Every distinct operator set referenced, in order of first use.
    pub fn operator_sets(&self, lib: &OperatorSetLibrary) -> Vec<usize> {
        let mut out = Vec::new();
        for r in self.operators.iter().flatten() {
            if let Some(i) = r.resolve(lib) {
                if !out.contains(&i) {
                    out.push(i);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        task: TaskKind,
        count: usize,
        channels: usize,
    },
    Folder {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// `(height, width)` of every image.
    pub size: (usize, usize),
    pub folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl DataConfig {
    pub fn channels(&self) -> usize {
        match self.source {
            DataSource::Synthetic { channels, .. } => channels,
            DataSource::Folder { .. } => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
    pub metrics: Vec<String>,
    pub data: Option<DataConfig>,
}

impl Config {
    pub fn metric_specs(&self) -> Result<Vec<MetricSpec>> {
        self.metrics.iter().map(|m| builtin_metric(m)).collect()
    }
}

const KEYS: [(&str, &[&str]); 3] = [
    (
        "network",
        &[
            "in_channels",
            "tier_sizes",
            "kernel_sizes",
            "operators",
            "sampling_factors",
            "k_sin",
            "k_chirp",
            "cut",
            "init",
            "init_bound",
            "init_seed",
        ],
    ),
    (
        "trainer",
        &[
            "optimizer",
            "lr",
            "momentum",
            "beta1",
            "beta2",
            "eps",
            "lr_decay",
            "batch_size",
            "epochs",
            "runs",
            "seed",
            "model_name",
            "device",
            "parallel",
            "metrics",
        ],
    ),
    (
        "data",
        &["source", "task", "count", "channels", "path", "size", "folds", "val_fraction", "seed"],
    ),
];

struct Entries {
    map: HashMap<(String, String), (String, usize)>,
    sections: HashMap<String, usize>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        let mut sections = HashMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown section [{name}] (expected [network], [trainer] or [data])"),
                    });
                }
                if sections.insert(name.to_string(), line).is_some() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("duplicate section [{name}]"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 'key = value' or '[section]', found '{content}'"),
                });
            };
            let Some(sec) = &section else {
                return Err(Error::Parse {
                    line,
                    msg: "key outside of any section".into(),
                });
            };
            let key = key.trim();
            let known = KEYS.iter().find(|(s, _)| s == sec).unwrap().1;
            if !known.contains(&key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key '{key}' in [{sec}]"),
                });
            }
            if map
                .insert((sec.clone(), key.to_string()), (value.trim().to_string(), line))
                .is_some()
            {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key '{key}' in [{sec}]"),
                });
            }
        }
        Ok(Self { map, sections })
    }

    fn raw(&self, sec: &str, key: &str) -> Option<(&str, usize)> {
        self.map.get(&(sec.to_string(), key.to_string())).map(|(v, l)| (v.as_str(), *l))
    }

    fn line(&self, sec: &str, key: &str) -> usize {
        self.raw(sec, key)
            .map(|(_, l)| l)
            .or_else(|| self.sections.get(sec).copied())
            .unwrap_or(0)
    }

    fn required(&self, sec: &str, key: &str) -> Result<(&str, usize)> {
        self.raw(sec, key).ok_or_else(|| Error::Validation {
            line: self.sections.get(sec).copied().unwrap_or(0),
            msg: format!("missing required key '{key}' in [{sec}]"),
        })
    }

    fn value<T: FromStr>(&self, sec: &str, key: &str, default: T) -> Result<T> {
        match self.raw(sec, key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid value '{v}' for '{key}'"),
            }),
        }
    }

    fn list<T: FromStr>(&self, sec: &str, key: &str) -> Result<Option<Vec<T>>> {
        let Some((v, line)) = self.raw(sec, key) else {
            return Ok(None);
        };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|x| {
                x.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("invalid list element '{}' in '{key}'", x.trim()),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

fn parse_kernel(s: &str) -> Option<(usize, usize)> {
    match s.split_once('x') {
        Some((m, n)) => Some((m.trim().parse().ok()?, n.trim().parse().ok()?)),
        None => {
            let k = s.parse().ok()?;
            Some((k, k))
        }
    }
}

fn parse_size(s: &str) -> Option<(usize, usize)> {
    match s.split_once(',').or_else(|| s.split_once('x')) {
        Some((h, w)) => Some((h.trim().parse().ok()?, w.trim().parse().ok()?)),
        None => {
            let k = s.trim().parse().ok()?;
            Some((k, k))
        }
    }
}

fn invalid(line: usize, msg: impl Into<String>) -> Error {
    Error::Validation { line, msg: msg.into() }
}

/// Parses and validates `text` against `lib`.
pub fn parse_config(text: &str, lib: &OperatorSetLibrary) -> Result<Config> {
    let e = Entries::parse(text)?;
    let network = parse_network(&e, lib)?;
    let (trainer, metrics) = parse_trainer(&e)?;
    let data = if e.sections.contains_key("data") {
        Some(parse_data(&e, &network)?)
    } else {
        None
    };
    Ok(Config {
        network,
        trainer,
        metrics,
        data,
    })
}

fn parse_network(e: &Entries, lib: &OperatorSetLibrary) -> Result<NetworkConfig> {
    const S: &str = "network";
    let (_, sizes_line) = e.required(S, "tier_sizes")?;
    let tier_sizes: Vec<usize> = e.list(S, "tier_sizes")?.unwrap();
    let tiers = tier_sizes.len();
    if tiers == 0 {
        return Err(invalid(sizes_line, "tier_sizes must name at least one tier"));
    }
    if let Some(t) = tier_sizes.iter().position(|&n| n == 0) {
        return Err(invalid(sizes_line, format!("tier {t} has no neurons")));
    }
    let check_len = |key: &str, len: usize| -> Result<()> {
        if len != tiers {
            return Err(invalid(
                e.line(S, key),
                format!("{key} has {len} entries but tier_sizes has {tiers}"),
            ));
        }
        Ok(())
    };

    let (kernels_raw, kline) = e.required(S, "kernel_sizes")?;
    let kernel_sizes = kernels_raw
        .split(',')
        .map(|k| {
            parse_kernel(k.trim()).ok_or_else(|| Error::Parse {
                line: kline,
                msg: format!("invalid kernel size '{}'", k.trim()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_len("kernel_sizes", kernel_sizes.len())?;
    for &(m, n) in &kernel_sizes {
        if m % 2 == 0 || n % 2 == 0 {
            return Err(invalid(kline, format!("kernel size must be odd, got {m}x{n}")));
        }
    }

    let (ops_raw, oline) = e.required(S, "operators")?;
    let operators = ops_raw
        .split(';')
        .map(|tier| {
            tier.split(',')
                .map(|s| {
                    s.trim().parse::<OpRef>().map_err(|msg| Error::Parse { line: oline, msg })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    check_len("operators", operators.len())?;
    for (t, refs) in operators.iter().enumerate() {
        if refs.len() != 1 && refs.len() != tier_sizes[t] {
            return Err(invalid(
                oline,
                format!("tier {t} lists {} operator sets for {} neurons", refs.len(), tier_sizes[t]),
            ));
        }
        for r in refs {
            if r.resolve(lib).is_none() {
                let msg = match r {
                    OpRef::Index(i) => format!(
                        "operator set index {i} out of range (valid: 0..={})",
                        lib.len().saturating_sub(1)
                    ),
                    named => format!("operator set '{named}' is not in the library"),
                };
                return Err(invalid(oline, msg));
            }
        }
    }

    let sampling_factors: Vec<i32> = e.list(S, "sampling_factors")?.unwrap_or_else(|| vec![1; tiers]);
    check_len("sampling_factors", sampling_factors.len())?;
    if sampling_factors.contains(&0) {
        return Err(invalid(e.line(S, "sampling_factors"), "sampling factors must be nonzero"));
    }

    let in_channels: usize = e.value(S, "in_channels", 1)?;
    if in_channels == 0 {
        return Err(invalid(e.line(S, "in_channels"), "in_channels must be at least 1"));
    }
    let d = OpConstants::default();
    let constants = OpConstants {
        k_sin: e.value(S, "k_sin", d.k_sin)?,
        k_chirp: e.value(S, "k_chirp", d.k_chirp)?,
        cut: e.value(S, "cut", d.cut)?,
    };
    if !(constants.cut.is_finite() && constants.cut > 0.0) {
        return Err(invalid(e.line(S, "cut"), "cut must be positive"));
    }
    let init = match e.value(S, "init", "uniform".to_string())?.as_str() {
        "uniform" => {
            let bound: f64 = e.value(S, "init_bound", 0.1)?;
            if !(bound.is_finite() && bound > 0.0) {
                return Err(invalid(e.line(S, "init_bound"), "init_bound must be positive"));
            }
            InitScheme::Uniform { bound }
        }
        "fan-in" => InitScheme::FanInUniform,
        other => {
            return Err(invalid(
                e.line(S, "init"),
                format!("unknown init '{other}' (expected uniform or fan-in)"),
            ))
        }
    };
    Ok(NetworkConfig {
        in_channels,
        tier_sizes,
        kernel_sizes,
        operators,
        sampling_factors,
        constants,
        init,
        init_seed: e.value(S, "init_seed", 0)?,
    })
}

fn parse_trainer(e: &Entries) -> Result<(TrainerConfig, Vec<String>)> {
    const S: &str = "trainer";
    let d = TrainerConfig::default();
    let o = OptimizerSettings::default();
    let optimizer = OptimizerSettings {
        name: e.value(S, "optimizer", o.name)?,
        lr: e.value(S, "lr", o.lr)?,
        momentum: e.value(S, "momentum", o.momentum)?,
        beta1: e.value(S, "beta1", o.beta1)?,
        beta2: e.value(S, "beta2", o.beta2)?,
        eps: e.value(S, "eps", o.eps)?,
        lr_decay: e.value(S, "lr_decay", o.lr_decay)?,
    };
    if !SUPPORTED.contains(&optimizer.name.as_str()) {
        return Err(invalid(
            e.line(S, "optimizer"),
            format!("unknown optimizer '{}' (supported: {})", optimizer.name, SUPPORTED.join(", ")),
        ));
    }
    for (key, v) in [("lr", optimizer.lr), ("eps", optimizer.eps), ("lr_decay", optimizer.lr_decay)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(invalid(e.line(S, key), format!("{key} must be finite and non-negative")));
        }
    }
    let cfg = TrainerConfig {
        optimizer,
        batch_size: e.value(S, "batch_size", d.batch_size)?,
        epochs: e.value(S, "epochs", d.epochs)?,
        runs: e.value(S, "runs", d.runs)?,
        seed: e.value(S, "seed", d.seed)?,
        model_name: e.value(S, "model_name", d.model_name)?,
        device: e.value(S, "device", d.device)?,
        parallelism: if e.value(S, "parallel", true)? {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        },
    };
    for (key, v) in [("batch_size", cfg.batch_size), ("epochs", cfg.epochs), ("runs", cfg.runs)] {
        if v == 0 {
            return Err(invalid(e.line(S, key), format!("{key} must be at least 1")));
        }
    }
    let metrics: Vec<String> = e.list(S, "metrics")?.unwrap_or_else(|| vec!["snr".to_string()]);
    for m in &metrics {
        if builtin_metric(m).is_err() {
            return Err(invalid(
                e.line(S, "metrics"),
                format!("unknown metric '{m}' (available: snr, mse)"),
            ));
        }
    }
    Ok((cfg, metrics))
}

fn parse_data(e: &Entries, net: &NetworkConfig) -> Result<DataConfig> {
    const S: &str = "data";
    let size = match e.raw(S, "size") {
        None => (16, 16),
        Some((v, line)) => parse_size(v).ok_or_else(|| Error::Parse {
            line,
            msg: format!("invalid size '{v}'"),
        })?,
    };
    let source = match e.value(S, "source", "synthetic".to_string())?.as_str() {
        "synthetic" => {
            let task: String = e.value(S, "task", "identity".to_string())?;
            let task = task
                .parse()
                .map_err(|err: Error| invalid(e.line(S, "task"), err.to_string()))?;
            let count = e.value(S, "count", 16)?;
            let channels = e.value(S, "channels", net.in_channels)?;
            if size.0 != size.1 || size.0 < 8 {
                return Err(invalid(e.line(S, "size"), "synthetic images must be square and at least 8x8"));
            }
            if count < 4 {
                return Err(invalid(e.line(S, "count"), "synthetic tasks need at least 4 samples"));
            }
            DataSource::Synthetic { task, count, channels }
        }
        "folder" => DataSource::Folder {
            path: PathBuf::from(e.required(S, "path")?.0),
        },
        other => {
            return Err(invalid(
                e.line(S, "source"),
                format!("unknown source '{other}' (expected synthetic or folder)"),
            ))
        }
    };
    let data = DataConfig {
        source,
        size,
        folds: e.value(S, "folds", 1)?,
        val_fraction: e.value(S, "val_fraction", 0.0)?,
        seed: e.value(S, "seed", 0)?,
    };
    if data.folds == 0 {
        return Err(invalid(e.line(S, "folds"), "folds must be at least 1"));
    }
    if !(0.0..1.0).contains(&data.val_fraction) {
        return Err(invalid(e.line(S, "val_fraction"), "val_fraction must lie in [0, 1)"));
    }
    let channels = data.channels();
    if channels != net.in_channels {
        return Err(invalid(
            e.line(S, "channels"),
            format!("data has {channels} channels but in_channels is {}", net.in_channels),
        ));
    }
    let out = *net.tier_sizes.last().unwrap();
    if out != channels {
        return Err(invalid(
            e.line("network", "tier_sizes"),
            format!("the last tier has {out} neurons but targets have {channels} channels"),
        ));
    }
    Ok(data)
}

fn join<T: fmt::Display>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

/// Canonical text of `cfg`; parsing it yields `cfg` again.
pub fn print_config(cfg: &Config) -> String {
    let mut s = String::new();
    let n = &cfg.network;
    let kernels: Vec<String> = n
        .kernel_sizes
        .iter()
        .map(|&(m, k)| if m == k { m.to_string() } else { format!("{m}x{k}") })
        .collect();
    let ops: Vec<String> = n.operators.iter().map(|t| join(t, ", ")).collect();
    writeln!(s, "[network]").unwrap();
    writeln!(s, "in_channels = {}", n.in_channels).unwrap();
    writeln!(s, "tier_sizes = {}", join(&n.tier_sizes, ", ")).unwrap();
    writeln!(s, "kernel_sizes = {}", kernels.join(", ")).unwrap();
    writeln!(s, "operators = {}", ops.join("; ")).unwrap();
    writeln!(s, "sampling_factors = {}", join(&n.sampling_factors, ", ")).unwrap();
    writeln!(s, "k_sin = {:?}", n.constants.k_sin).unwrap();
    writeln!(s, "k_chirp = {:?}", n.constants.k_chirp).unwrap();
    writeln!(s, "cut = {:?}", n.constants.cut).unwrap();
    match n.init {
        InitScheme::Uniform { bound } => {
            writeln!(s, "init = uniform").unwrap();
            writeln!(s, "init_bound = {bound:?}").unwrap();
        }
        InitScheme::FanInUniform => writeln!(s, "init = fan-in").unwrap(),
    }
    writeln!(s, "init_seed = {}", n.init_seed).unwrap();

    let t = &cfg.trainer;
    let o = &t.optimizer;
    writeln!(s, "\n[trainer]").unwrap();
    writeln!(s, "optimizer = {}", o.name).unwrap();
    for (k, v) in [
        ("lr", o.lr),
        ("momentum", o.momentum),
        ("beta1", o.beta1),
        ("beta2", o.beta2),
        ("eps", o.eps),
        ("lr_decay", o.lr_decay),
    ] {
        writeln!(s, "{k} = {v:?}").unwrap();
    }
    writeln!(s, "batch_size = {}", t.batch_size).unwrap();
    writeln!(s, "epochs = {}", t.epochs).unwrap();
    writeln!(s, "runs = {}", t.runs).unwrap();
    writeln!(s, "seed = {}", t.seed).unwrap();
    writeln!(s, "model_name = {}", t.model_name).unwrap();
    writeln!(s, "device = {}", t.device).unwrap();
    writeln!(s, "parallel = {}", t.parallelism == Parallelism::Parallel).unwrap();
    writeln!(s, "metrics = {}", cfg.metrics.join(", ")).unwrap();

    if let Some(d) = &cfg.data {
        writeln!(s, "\n[data]").unwrap();
        match &d.source {
            DataSource::Synthetic { task, count, channels } => {
                writeln!(s, "source = synthetic").unwrap();
                writeln!(s, "task = {task}").unwrap();
                writeln!(s, "count = {count}").unwrap();
                writeln!(s, "channels = {channels}").unwrap();
            }
            DataSource::Folder { path } => {
                writeln!(s, "source = folder").unwrap();
                writeln!(s, "path = {}", path.display()).unwrap();
            }
        }
        writeln!(s, "size = {}, {}", d.size.0, d.size.1).unwrap();
        writeln!(s, "folds = {}", d.folds).unwrap();
        writeln!(s, "val_fraction = {:?}", d.val_fraction).unwrap();
        writeln!(s, "seed = {}", d.seed).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oplib::register_builtin_library;
    use proptest::prelude::*;

    const THREE_TIER: &str = "
[network]
in_channels = 1
tier_sizes = 12, 32, 1
kernel_sizes = 21, 7, 3
operators = 1; 6; 3
sampling_factors = 2, -2, 1
";

    fn parse(text: &str) -> Result<Config> {
        parse_config(text, &register_builtin_library())
    }

    fn err_line(text: &str) -> (usize, String) {
        match parse(text).unwrap_err() {
            Error::Parse { line, msg } | Error::Validation { line, msg } => (line, msg),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn three_tier_parameter_count() {
        let cfg = parse(THREE_TIER).unwrap();
        let net = cfg.network.build(&register_builtin_library()).unwrap();
        assert_eq!(net.parameter_count(), 12 * 442 + 32 * 589 + 289);
        assert_eq!(net.parameter_count(), 24441);
        assert!(cfg.data.is_none());
        assert_eq!(cfg.metrics, ["snr"]);
    }

    #[test]
    fn even_kernel_is_rejected_with_line() {
        let (line, msg) = err_line("[network]\ntier_sizes = 1\nkernel_sizes = 4\noperators = 0\n");
        assert_eq!(line, 3);
        assert!(msg.contains("kernel size must be odd"), "{msg}");
    }

    #[test]
    fn operator_index_out_of_range() {
        let (line, msg) = err_line("[network]\ntier_sizes = 1\nkernel_sizes = 3\noperators = 54\n");
        assert_eq!(line, 4);
        assert!(msg.contains("0..=53"), "{msg}");
    }

    #[test]
    fn length_mismatch() {
        let (line, msg) = err_line("[network]\ntier_sizes = 1, 2\nkernel_sizes = 3\noperators = 0; 0\n");
        assert_eq!(line, 3);
        assert!(msg.contains("kernel_sizes has 1 entries"), "{msg}");
        let (line, _) = err_line("[network]\ntier_sizes = 2\nkernel_sizes = 3\noperators = 0, 1, 2\n");
        assert_eq!(line, 4);
    }

    #[test]
    fn syntax_errors() {
        assert_eq!(err_line("[network]\n\ntier_sizes 1\n").0, 3);
        assert_eq!(err_line("tier_sizes = 1\n").0, 1);
        assert_eq!(err_line("[nets]\n").0, 1);
        assert_eq!(err_line("[network]\nwidth = 3\n").0, 2);
        assert_eq!(err_line("[network]\ntier_sizes = a\n").0, 2);
        assert_eq!(err_line("[network]\ntier_sizes = 1\ntier_sizes = 1\n").0, 3);
    }

    #[test]
    fn heterogeneous_and_named_operators() {
        let text = "[network]\ntier_sizes = 2, 1\nkernel_sizes = 3, 1x3\noperators = 4, sine/max/tanh; mul/sum/identity\n";
        let cfg = parse(text).unwrap();
        let lib = register_builtin_library();
        let specs = cfg.network.tier_specs(&lib).unwrap();
        assert_eq!(specs[0].operators, vec![4, lib.find("sine", "max", "tanh").unwrap()]);
        assert_eq!(specs[1].operators, vec![36]);
        assert_eq!(specs[1].kernel, (1, 3));
        assert_eq!(cfg.network.operator_sets(&lib).len(), 3);
    }

    #[test]
    fn trainer_and_data_sections() {
        let text = format!(
            "{THREE_TIER}\n[trainer]\noptimizer = sgd\nlr = 0.5\nmetrics = snr, mse\n\n[data]\ntask = nonlinear-map\nsize = 32\nfolds = 3\n"
        );
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.trainer.optimizer.name, "sgd");
        assert_eq!(cfg.trainer.optimizer.lr, 0.5);
        assert_eq!(cfg.metrics, ["snr", "mse"]);
        let d = cfg.data.unwrap();
        assert_eq!(d.size, (32, 32));
        assert_eq!(d.folds, 3);
        assert!(matches!(d.source, DataSource::Synthetic { task: TaskKind::NonlinearMap, count: 16, channels: 1 }));
    }

    #[test]
    fn semantic_trainer_errors() {
        let base = "[network]\ntier_sizes = 1\nkernel_sizes = 3\noperators = 0\n[trainer]\n";
        assert!(err_line(&format!("{base}optimizer = cgd\n")).1.contains("sgd, adam"));
        assert_eq!(err_line(&format!("{base}epochs = 0\n")).0, 6);
        assert!(err_line(&format!("{base}metrics = psnr\n")).1.contains("psnr"));
        let mismatch = "[network]\ntier_sizes = 2\nkernel_sizes = 3\noperators = 0\n[data]\n";
        assert_eq!(err_line(mismatch).0, 2);
    }

    fn arb_opref() -> impl Strategy<Value = OpRef> {
        prop_oneof![
            (0usize..54).prop_map(OpRef::Index),
            (0usize..6, 0usize..3, 0usize..3).prop_map(|(n, p, a)| OpRef::Named {
                nodal: ["mul", "cubic", "sine", "exp", "sinh", "chirp"][n].into(),
                pool: ["sum", "median", "max"][p].into(),
                activation: ["tanh", "lincut", "identity"][a].into(),
            }),
        ]
    }

    fn arb_config() -> impl Strategy<Value = Config> {
        let tiers = prop::collection::vec(
            (
                1usize..4,
                (0usize..3, 0usize..3),
                prop::bool::ANY,
                prop::collection::vec(arb_opref(), 4),
                prop_oneof![Just(1i32), Just(2), Just(-2)],
            ),
            1..4,
        );
        (
            tiers,
            1usize..3,
            (0.1f64..5.0, 0.1f64..5.0, 0.5f64..20.0),
            prop::option::of(0.001f64..1.0),
            (1e-5f64..1.0, 0usize..2, 1usize..9, any::<u64>(), prop::bool::ANY),
            prop::option::of((0usize..3, 8usize..20, 0usize..3, 0.0f64..0.9, any::<u64>())),
        )
            .prop_map(|(tiers, in_channels, (k_sin, k_chirp, cut), bound, tr, data)| {
                let mut tier_sizes: Vec<usize> = tiers.iter().map(|t| t.0).collect();
                *tier_sizes.last_mut().unwrap() = in_channels;
                let network = NetworkConfig {
                    in_channels,
                    kernel_sizes: tiers.iter().map(|t| (2 * t.1 .0 + 1, 2 * t.1 .1 + 1)).collect(),
                    operators: tiers
                        .iter()
                        .zip(&tier_sizes)
                        .map(|(t, &n)| if t.2 { t.3[..1].to_vec() } else { t.3.iter().cycle().take(n).cloned().collect() })
                        .collect(),
                    sampling_factors: tiers.iter().map(|t| t.4).collect(),
                    tier_sizes,
                    constants: OpConstants { k_sin, k_chirp, cut },
                    init: bound.map_or(InitScheme::FanInUniform, |bound| InitScheme::Uniform { bound }),
                    init_seed: 7,
                };
                let trainer = TrainerConfig {
                    optimizer: OptimizerSettings {
                        name: SUPPORTED[tr.1].into(),
                        lr: tr.0,
                        ..Default::default()
                    },
                    batch_size: tr.2,
                    seed: tr.3,
                    parallelism: if tr.4 { Parallelism::Parallel } else { Parallelism::Sequential },
                    ..Default::default()
                };
                let data = data.map(|(task, size, folds, val_fraction, seed)| DataConfig {
                    source: DataSource::Synthetic {
                        task: [TaskKind::Identity, TaskKind::BlurInverse, TaskKind::NonlinearMap][task],
                        count: 10,
                        channels: in_channels,
                    },
                    size: (size, size),
                    folds: folds + 1,
                    val_fraction,
                    seed,
                });
                Config {
                    network,
                    trainer,
                    metrics: vec!["snr".into()],
                    data,
                }
            })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(cfg in arb_config()) {
            let text = print_config(&cfg);
            let back = parse(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
            prop_assert_eq!(back, cfg);
        }
    }
}
