//! Multi-run training with metric tracking, best-state checkpoints and
//! stats export.
//!
//! The loss is the mean squared error. It is always tracked as the first
//! column of a record (criterion `min`), followed by the user metrics.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::autograd::Tape;
use crate::dataio::{FoldSplit, PairedImageDataset};
use crate::error::{Error, Result};
use crate::network::{InitScheme, OpNetwork, TierSpec};
use crate::oplib::{register_builtin_library, OpConstants, OperatorSetLibrary};
use crate::optim::{OptimizerSettings, OptimizerState};
use crate::par::{map_indexed, Parallelism};
use crate::tensor::Tensor;

pub const SNR_CAP_DB: f64 = 300.0;
pub const PARTITIONS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Max,
    Min,
}

impl Criterion {
    /// Strict improvement; ties keep the incumbent.
    pub fn improves(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Criterion::Max => candidate > incumbent,
            Criterion::Min => candidate < incumbent,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Criterion::Max => "max",
            Criterion::Min => "min",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Criterion::Max),
            "min" => Ok(Criterion::Min),
            other => Err(Error::CorruptState(format!("unknown criterion {other:?}"))),
        }
    }
}

pub type MetricFn = Arc<dyn Fn(&Tensor, &Tensor) -> Result<f64> + Send + Sync>;

/// A named metric of `(predictions, targets)` and the direction in which it
/// improves.
#[derive(Clone)]
pub struct MetricSpec {
    pub name: String,
    pub compute: MetricFn,
    pub criterion: Criterion,
}

impl fmt::Debug for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MetricSpec({}, {})", self.name, self.criterion.as_str())
    }
}

impl MetricSpec {
    pub fn new(
        name: impl Into<String>,
        criterion: Criterion,
        compute: impl Fn(&Tensor, &Tensor) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            compute: Arc::new(compute),
            criterion,
        }
    }
}

/// `10 log10(sum (t - mean t)^2 / sum (t - p)^2)` in dB, capped at
/// [`SNR_CAP_DB`].
pub fn calc_snr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let t = target.data();
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let signal: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
    if signal == 0.0 {
        return Err(Error::ConstantTarget);
    }
    let noise: f64 = t.iter().zip(pred.data()).map(|(a, b)| (a - b).powi(2)).sum();
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SNR_CAP_DB))
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let d = pred.sub(target)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.numel().max(1) as f64)
}

/// Metrics available by name from configuration files.
pub fn builtin_metric(name: &str) -> Result<MetricSpec> {
    match name {
        "snr" => Ok(MetricSpec::new("snr", Criterion::Max, calc_snr)),
        "mse" => Ok(MetricSpec::new("mse", Criterion::Min, mse)),
        other => Err(Error::UnknownMetric(other.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub optimizer: OptimizerSettings,
    pub batch_size: usize,
    pub epochs: usize,
    pub runs: usize,
    pub seed: u64,
    pub model_name: String,
    pub device: String,
    pub parallelism: Parallelism,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerSettings::default(),
            batch_size: 8,
            epochs: 10,
            runs: 1,
            seed: 0,
            model_name: "onn".into(),
            device: "cpu".into(),
            parallelism: Parallelism::default(),
        }
    }
}

/// Train, validation and test samples of one fold.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partitions {
    pub train: PairedImageDataset,
    pub val: PairedImageDataset,
    pub test: PairedImageDataset,
}

impl Partitions {
    pub fn from_split(ds: &PairedImageDataset, split: &FoldSplit) -> Self {
        Self {
            train: ds.subset(&split.train),
            val: ds.subset(&split.val),
            test: ds.subset(&split.test),
        }
    }

    pub fn get(&self, name: &str) -> Option<&PairedImageDataset> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Names of the non-empty partitions, train first.
    pub fn present(&self) -> Vec<String> {
        PARTITIONS
            .iter()
            .filter(|p| self.get(p).is_some_and(|d| !d.is_empty()))
            .map(|p| p.to_string())
            .collect()
    }
}

/// Statistics of one completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub run: usize,
    pub epoch: usize,
    pub per_image_time_s: f64,
    /// `partitions x columns`, row-major.
    pub values: Vec<f64>,
}

/// Best value of one (metric, partition) pair and the parameters achieving it.
#[derive(Clone, Debug, PartialEq)]
pub struct BestState {
    pub metric: String,
    pub partition: String,
    pub run: usize,
    pub epoch: usize,
    pub value: f64,
    pub params: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingRecord {
    pub partitions: Vec<String>,
    /// `loss` followed by the metric names.
    pub columns: Vec<String>,
    pub criteria: Vec<Criterion>,
    pub rows: Vec<EpochRow>,
    pub best: Vec<BestState>,
    /// Diagnostics of aborted runs.
    pub failures: Vec<String>,
}

impl TrainingRecord {
    fn new(partitions: Vec<String>, metrics: &[MetricSpec]) -> Self {
        let mut columns = vec!["loss".to_string()];
        let mut criteria = vec![Criterion::Min];
        for m in metrics {
            columns.push(m.name.clone());
            criteria.push(m.criterion);
        }
        Self {
            partitions,
            columns,
            criteria,
            ..Default::default()
        }
    }

    fn slot(&self, partition: &str, column: &str) -> Option<usize> {
        let p = self.partitions.iter().position(|x| x == partition)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(p * self.columns.len() + c)
    }

    /// Values of `column` on `partition` for every recorded epoch.
    pub fn series(&self, partition: &str, column: &str) -> Vec<f64> {
        match self.slot(partition, column) {
            Some(s) => self.rows.iter().map(|r| r.values[s]).collect(),
            None => Vec::new(),
        }
    }

    /// Like [`series`](Self::series) restricted to one run.
    pub fn run_series(&self, run: usize, partition: &str, column: &str) -> Vec<f64> {
        match self.slot(partition, column) {
            Some(s) => self.rows.iter().filter(|r| r.run == run).map(|r| r.values[s]).collect(),
            None => Vec::new(),
        }
    }

    pub fn best_for(&self, metric: &str, partition: &str) -> Option<&BestState> {
        self.best.iter().find(|b| b.metric == metric && b.partition == partition)
    }

    pub fn mean_per_image_time(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.per_image_time_s).sum::<f64>() / self.rows.len() as f64
    }

    fn track(&mut self, row: EpochRow, params: &[Tensor]) {
        for (p, partition) in self.partitions.iter().enumerate() {
            for (c, column) in self.columns.iter().enumerate() {
                let v = row.values[p * self.columns.len() + c];
                if v.is_nan() {
                    continue;
                }
                let slot = self.best.iter_mut().find(|b| b.metric == *column && b.partition == *partition);
                match slot {
                    Some(b) if !self.criteria[c].improves(v, b.value) => {}
                    Some(b) => {
                        b.run = row.run;
                        b.epoch = row.epoch;
                        b.value = v;
                        b.params = params.to_vec();
                    }
                    None => self.best.push(BestState {
                        metric: column.clone(),
                        partition: partition.clone(),
                        run: row.run,
                        epoch: row.epoch,
                        value: v,
                        params: params.to_vec(),
                    }),
                }
            }
        }
        self.rows.push(row);
    }
}

/// Mean squared error and its gradient for one sample.
pub fn sample_gradient(net: &OpNetwork, x: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let params = net.bind(&tape, true);
    let y = net.forward_with(&params, &tape.constant(x.clone()))?;
    let loss = y.sub(&tape.constant(target.clone()))?.square().mean_all();
    let grads = tape.backward(&loss)?;
    Ok((loss.value().item(), params.iter().map(|p| grads.wrt(p)).collect()))
}

/// Predictions for every sample, stacked to `[B, K, M, N]`.
pub fn predict(net: &OpNetwork, ds: &PairedImageDataset, mode: Parallelism) -> Result<Tensor> {
    let outs = map_indexed(&ds.inputs, mode, |_, x| net.forward(x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&outs)
}

/// Loss followed by every metric, computed over the whole partition.
pub fn evaluate(
    net: &OpNetwork,
    ds: &PairedImageDataset,
    metrics: &[MetricSpec],
    mode: Parallelism,
) -> Result<Vec<f64>> {
    let pred = predict(net, ds, mode)?;
    let target = Tensor::stack(&ds.targets)?;
    if pred.shape() != target.shape() {
        return Err(Error::SizeMismatch(format!(
            "network output {:?} does not match targets {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut out = vec![mse(&pred, &target)?];
    for m in metrics {
        out.push((m.compute)(&pred, &target)?);
    }
    Ok(out)
}

/// A resumable training session over one fold.
pub struct Trainer {
    pub net: OpNetwork,
    pub cfg: TrainerConfig,
    pub metrics: Vec<MetricSpec>,
    pub data: Partitions,
    pub optimizer: OptimizerState,
    pub record: TrainingRecord,
    /// Echo of the configuration text stored in checkpoints.
    pub config_text: String,
    pub fold: usize,
    rng: ChaCha8Rng,
    run: usize,
    epoch: usize,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("run", &self.run)
            .field("epoch", &self.epoch)
            .field("rows", &self.record.rows.len())
            .finish()
    }
}

fn shuffle_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ run as u64);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(net: OpNetwork, data: Partitions, cfg: TrainerConfig, metrics: Vec<MetricSpec>) -> Result<Self> {
        if cfg.epochs == 0 || cfg.runs == 0 || cfg.batch_size == 0 {
            return Err(Error::TooFewSamples(format!(
                "epochs ({}), runs ({}) and batch size ({}) must be at least 1",
                cfg.epochs, cfg.runs, cfg.batch_size
            )));
        }
        if data.train.is_empty() {
            return Err(Error::TooFewSamples("training partition is empty".into()));
        }
        let optimizer = OptimizerState::new(&cfg.optimizer, &net.parameters())?;
        let record = TrainingRecord::new(data.present(), &metrics);
        let mut t = Self {
            net,
            rng: shuffle_rng(cfg.seed, 0),
            cfg,
            metrics,
            data,
            optimizer,
            record,
            config_text: String::new(),
            fold: 0,
            run: 0,
            epoch: 0,
        };
        t.start_run(0)?;
        Ok(t)
    }

    /// `(run, epoch)` of the next epoch to execute.
    pub fn position(&self) -> (usize, usize) {
        (self.run, self.epoch)
    }

    pub fn is_finished(&self) -> bool {
        self.run >= self.cfg.runs
    }

    fn start_run(&mut self, run: usize) -> Result<()> {
        self.run = run;
        self.epoch = 0;
        if run < self.cfg.runs {
            self.net.reset_parameters(self.cfg.seed ^ run as u64);
            self.optimizer = OptimizerState::new(&self.cfg.optimizer, &self.net.parameters())?;
            self.rng = shuffle_rng(self.cfg.seed, run);
        }
        Ok(())
    }

    /// Runs every remaining epoch of every remaining run.
    pub fn train(&mut self) -> Result<&TrainingRecord> {
        while !self.is_finished() {
            self.step_epoch()?;
        }
        if self.record.rows.is_empty() && !self.record.failures.is_empty() {
            return Err(Error::NonFiniteLoss { run: 0, epoch: 0 });
        }
        Ok(&self.record)
    }

    /// Runs at most `n` further epochs.
    pub fn train_epochs(&mut self, n: usize) -> Result<&TrainingRecord> {
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            self.step_epoch()?;
        }
        Ok(&self.record)
    }

    /// One epoch of the current run. A non-finite loss or gradient aborts
    /// the run and moves on to the next one.
    pub fn step_epoch(&mut self) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        match self.epoch_inner() {
            Ok(()) => {
                self.epoch += 1;
                if self.epoch == self.cfg.epochs {
                    self.start_run(self.run + 1)?;
                }
                Ok(())
            }
            Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteValue(_))) => {
                self.record
                    .failures
                    .push(format!("run {} aborted at epoch {}: {e}", self.run, self.epoch));
                self.start_run(self.run + 1)
            }
            Err(e) => Err(e),
        }
    }

    fn epoch_inner(&mut self) -> Result<()> {
        let (run, epoch) = (self.run, self.epoch);
        let nonfinite = || Error::NonFiniteLoss { run, epoch };
        let start = Instant::now();
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mode = self.cfg.parallelism;
        for batch in order.chunks(self.cfg.batch_size) {
            let net = &self.net;
            let train = &self.data.train;
            let results = map_indexed(batch, mode, |_, &i| sample_gradient(net, &train.inputs[i], &train.targets[i]));
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, g) = r.map_err(|e| match e {
                    Error::NonFiniteValue(_) => nonfinite(),
                    e => e,
                })?;
                loss += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&g) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            if !loss.is_finite() {
                return Err(nonfinite());
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = grads.unwrap_or_default().iter().map(|g| g.scale(scale)).collect();
            let mut params = self.net.parameters();
            self.optimizer.step(&mut params, &grads)?;
            self.net.set_parameters(&params)?;
        }
        if self.cfg.optimizer.lr_decay != 1.0 {
            self.optimizer.decay(self.cfg.optimizer.lr_decay);
        }
        let mut values = Vec::new();
        for p in &self.record.partitions {
            let ds = self.data.get(p).expect("recorded partitions exist");
            let v = evaluate(&self.net, ds, &self.metrics, mode).map_err(|e| match e {
                Error::NonFiniteValue(_) => nonfinite(),
                e => e,
            })?;
            if !v[0].is_finite() {
                return Err(nonfinite());
            }
            values.extend(v);
        }
        let row = EpochRow {
            run,
            epoch,
            per_image_time_s: 0.0,
            values,
        };
        self.record.track(row, &self.net.parameters());
        let per_image = start.elapsed().as_secs_f64() / self.data.train.len() as f64;
        self.record.rows.last_mut().unwrap().per_image_time_s = per_image;
        Ok(())
    }

    /// Network carrying the best parameters for `(metric, partition)`.
    pub fn best_network(&self, metric: &str, partition: &str) -> Option<OpNetwork> {
        let best = self.record.best_for(metric, partition)?;
        let mut net = self.net.clone();
        net.set_parameters(&best.params).ok()?;
        Some(net)
    }

    /// Whole session state as a checkpoint archive.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.put_str("meta/model_name", &self.cfg.model_name);
        a.put_str("meta/device", &self.cfg.device);
        a.put_u64s("meta/fold", &[self.fold as u64]);
        a.put_u64s("meta/progress", &[self.run as u64, self.epoch as u64]);
        a.put_str("config/text", &self.config_text);
        put_trainer_config(&mut a, &self.cfg);
        put_architecture(&mut a, &self.net);
        put_params(&mut a, "", &self.net, &self.net.parameters());
        a.merge_prefixed("opt/", self.optimizer.to_archive());
        put_rng(&mut a, &self.rng);
        put_record(&mut a, &self.net, &self.record);
        a
    }

    pub fn save_all(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().write(path)
    }

    /// Restores a session from a checkpoint. `data` and `metrics` must match
    /// the ones it was trained with.
    pub fn from_archive(
        a: &Archive,
        lib: &OperatorSetLibrary,
        data: Partitions,
        metrics: Vec<MetricSpec>,
    ) -> Result<Self> {
        let (net, optimizer, record) = restore(a, lib)?;
        let cfg = get_trainer_config(a)?;
        let names: Vec<&str> = metrics.iter().map(|m| m.name.as_str()).collect();
        if record.columns[1..].iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::CorruptState(format!(
                "checkpoint tracks metrics {:?}, session has {names:?}",
                &record.columns[1..]
            )));
        }
        if record.partitions != data.present() {
            return Err(Error::CorruptState(format!(
                "checkpoint tracks partitions {:?}, session has {:?}",
                record.partitions,
                data.present()
            )));
        }
        let [run, epoch] = *a.u64s("meta/progress")? else {
            return Err(Error::CorruptState("bad progress entry".into()));
        };
        Ok(Self {
            net,
            cfg,
            metrics,
            data,
            optimizer,
            record,
            config_text: a.str("config/text")?.to_string(),
            fold: a.u64("meta/fold")? as usize,
            rng: get_rng(a)?,
            run: run as usize,
            epoch: epoch as usize,
        })
    }

    pub fn load(
        path: impl AsRef<Path>,
        lib: &OperatorSetLibrary,
        data: Partitions,
        metrics: Vec<MetricSpec>,
    ) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, lib, data, metrics)
    }
}

/// Network (current parameters), optimizer state and record of a checkpoint.
pub fn load(path: impl AsRef<Path>) -> Result<(OpNetwork, OptimizerState, TrainingRecord)> {
    restore(&Archive::read(path)?, &register_builtin_library())
}

pub fn restore(a: &Archive, lib: &OperatorSetLibrary) -> Result<(OpNetwork, OptimizerState, TrainingRecord)> {
    let mut net = get_architecture(a, lib)?;
    let params = get_params(a, "", &net)?;
    net.set_parameters(&params).map_err(|e| Error::CorruptState(e.to_string()))?;
    let optimizer = OptimizerState::from_archive(&a.sub_archive("opt/"))?;
    let record = get_record(a, &net)?;
    Ok((net, optimizer, record))
}

fn corrupt(e: Error) -> Error {
    match e {
        e @ (Error::CorruptState(_) | Error::VersionMismatch { .. }) => e,
        e => Error::CorruptState(e.to_string()),
    }
}

fn put_trainer_config(a: &mut Archive, cfg: &TrainerConfig) {
    let o = &cfg.optimizer;
    a.put_str("trainer/optimizer", &o.name);
    a.put_f64s("trainer/hyper", &[o.lr, o.momentum, o.beta1, o.beta2, o.eps, o.lr_decay]);
    a.put_u64s(
        "trainer/counts",
        &[
            cfg.batch_size as u64,
            cfg.epochs as u64,
            cfg.runs as u64,
            cfg.seed,
            u64::from(cfg.parallelism == Parallelism::Parallel),
        ],
    );
}

fn get_trainer_config(a: &Archive) -> Result<TrainerConfig> {
    let [lr, momentum, beta1, beta2, eps, lr_decay] = *a.f64s("trainer/hyper")? else {
        return Err(Error::CorruptState("bad trainer hyperparameters".into()));
    };
    let [batch_size, epochs, runs, seed, parallel] = *a.u64s("trainer/counts")? else {
        return Err(Error::CorruptState("bad trainer counts".into()));
    };
    Ok(TrainerConfig {
        optimizer: OptimizerSettings {
            name: a.str("trainer/optimizer")?.to_string(),
            lr,
            momentum,
            beta1,
            beta2,
            eps,
            lr_decay,
        },
        batch_size: batch_size as usize,
        epochs: epochs as usize,
        runs: runs as usize,
        seed,
        model_name: a.str("meta/model_name")?.to_string(),
        device: a.str("meta/device")?.to_string(),
        parallelism: if parallel == 1 {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        },
    })
}

fn put_architecture(a: &mut Archive, net: &OpNetwork) {
    a.put_u64s("arch/in_channels", &[net.in_channels as u64]);
    a.put_u64s("arch/tiers", &[net.tiers.len() as u64]);
    let c = net.constants;
    a.put_f64s("arch/constants", &[c.k_sin, c.k_chirp, c.cut]);
    let init = match net.init {
        InitScheme::Uniform { bound } => [0.0, bound],
        InitScheme::FanInUniform => [1.0, 0.0],
    };
    a.put_f64s("arch/init", &init);
    for (t, tier) in net.tiers.iter().enumerate() {
        a.put_u64s(
            format!("arch/{t}/shape"),
            &[
                tier.blocks.len() as u64,
                tier.kernel.0 as u64,
                tier.kernel.1 as u64,
                tier.sampling as i64 as u64,
            ],
        );
        let ops: Vec<u64> = tier.blocks.iter().map(|b| b.op_set.index as u64).collect();
        a.put_u64s(format!("arch/{t}/operators"), &ops);
    }
}

fn get_architecture(a: &Archive, lib: &OperatorSetLibrary) -> Result<OpNetwork> {
    let [k_sin, k_chirp, cut] = *a.f64s("arch/constants")? else {
        return Err(Error::CorruptState("bad operator constants".into()));
    };
    let init = match *a.f64s("arch/init")? {
        [0.0, bound] => InitScheme::Uniform { bound },
        [1.0, _] => InitScheme::FanInUniform,
        _ => return Err(Error::CorruptState("bad init scheme".into())),
    };
    let specs = (0..a.u64("arch/tiers")?)
        .map(|t| {
            let [neurons, kh, kw, sampling] = *a.u64s(&format!("arch/{t}/shape"))? else {
                return Err(Error::CorruptState(format!("bad shape of tier {t}")));
            };
            Ok(TierSpec {
                neurons: neurons as usize,
                kernel: (kh as usize, kw as usize),
                operators: a.u64s(&format!("arch/{t}/operators"))?.iter().map(|&i| i as usize).collect(),
                sampling: sampling as i64 as i32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let constants = OpConstants { k_sin, k_chirp, cut };
    OpNetwork::new(a.u64("arch/in_channels")? as usize, &specs, lib, constants, init, 0).map_err(corrupt)
}

fn put_params(a: &mut Archive, prefix: &str, net: &OpNetwork, params: &[Tensor]) {
    for (name, p) in net.parameter_names().iter().zip(params) {
        a.put_tensor(format!("{prefix}{name}"), p);
    }
}

fn get_params(a: &Archive, prefix: &str, net: &OpNetwork) -> Result<Vec<Tensor>> {
    net.parameter_names()
        .iter()
        .map(|n| a.tensor(&format!("{prefix}{n}")).cloned())
        .collect()
}

fn put_rng(a: &mut Archive, rng: &ChaCha8Rng) {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let pos = rng.get_word_pos();
    words.extend([rng.get_stream(), pos as u64, (pos >> 64) as u64]);
    a.put_u64s("rng/state", &words);
}

fn get_rng(a: &Archive) -> Result<ChaCha8Rng> {
    let w = a.u64s("rng/state")?;
    if w.len() != 7 {
        return Err(Error::CorruptState("bad rng state".into()));
    }
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip(&w[..4]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(u128::from(w[5]) | (u128::from(w[6]) << 64));
    Ok(rng)
}

fn put_record(a: &mut Archive, net: &OpNetwork, r: &TrainingRecord) {
    a.put_str("stats/partitions", &r.partitions.join("\n"));
    a.put_str("stats/columns", &r.columns.join("\n"));
    let crit: Vec<&str> = r.criteria.iter().map(|c| c.as_str()).collect();
    a.put_str("stats/criteria", &crit.join("\n"));
    a.put_u64s("stats/run", &r.rows.iter().map(|x| x.run as u64).collect::<Vec<_>>());
    a.put_u64s("stats/epoch", &r.rows.iter().map(|x| x.epoch as u64).collect::<Vec<_>>());
    a.put_f64s(
        "stats/per_image_time_s",
        &r.rows.iter().map(|x| x.per_image_time_s).collect::<Vec<_>>(),
    );
    for p in &r.partitions {
        for c in &r.columns {
            a.put_f64s(format!("stats/{p}/{c}"), &r.series(p, c));
        }
    }
    a.put_str("stats/failures", &r.failures.join("\n"));
    for b in &r.best {
        let prefix = format!("best/{}/{}/", b.metric, b.partition);
        a.put_u64s(format!("{prefix}position"), &[b.run as u64, b.epoch as u64]);
        a.put_f64s(format!("{prefix}value"), &[b.value]);
        put_params(a, &prefix, net, &b.params);
    }
}

fn lines(s: &str) -> Vec<String> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split('\n').map(str::to_string).collect()
    }
}

fn get_record(a: &Archive, net: &OpNetwork) -> Result<TrainingRecord> {
    let partitions = lines(a.str("stats/partitions")?);
    let columns = lines(a.str("stats/columns")?);
    let criteria = lines(a.str("stats/criteria")?)
        .iter()
        .map(|c| Criterion::parse(c))
        .collect::<Result<Vec<_>>>()?;
    if criteria.len() != columns.len() || columns.first().map(String::as_str) != Some("loss") {
        return Err(Error::CorruptState("inconsistent stats columns".into()));
    }
    let runs = a.u64s("stats/run")?;
    let epochs = a.u64s("stats/epoch")?;
    let times = a.f64s("stats/per_image_time_s")?;
    let n = runs.len();
    if epochs.len() != n || times.len() != n {
        return Err(Error::CorruptState("stats arrays differ in length".into()));
    }
    let mut series = Vec::new();
    for p in &partitions {
        for c in &columns {
            let s = a.f64s(&format!("stats/{p}/{c}"))?;
            if s.len() != n {
                return Err(Error::CorruptState(format!("stats/{p}/{c} has {} rows, expected {n}", s.len())));
            }
            series.push(s);
        }
    }
    let rows = (0..n)
        .map(|i| EpochRow {
            run: runs[i] as usize,
            epoch: epochs[i] as usize,
            per_image_time_s: times[i],
            values: series.iter().map(|s| s[i]).collect(),
        })
        .collect();
    let mut best = Vec::new();
    for p in &partitions {
        for c in &columns {
            let prefix = format!("best/{c}/{p}/");
            if a.get(&format!("{prefix}value")).is_none() {
                continue;
            }
            let [run, epoch] = *a.u64s(&format!("{prefix}position"))? else {
                return Err(Error::CorruptState(format!("bad {prefix}position")));
            };
            best.push(BestState {
                metric: c.clone(),
                partition: p.clone(),
                run: run as usize,
                epoch: epoch as usize,
                value: a.f64s(&format!("{prefix}value"))?[0],
                params: get_params(a, &prefix, net)?,
            });
        }
    }
    Ok(TrainingRecord {
        partitions,
        columns,
        criteria,
        rows,
        best,
        failures: lines(a.str("stats/failures")?),
    })
}

/// Float formatting used by every CSV: 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `<dir>/<partition>.csv` for every tracked partition, with columns
/// `run, epoch, loss, <metrics>..., per_image_time_s`.
pub fn export_stats(record: &TrainingRecord, dir: impl AsRef<Path>) -> Result<()> {
    if record.rows.is_empty() {
        return Err(Error::TooFewSamples("record has no epochs to export".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let nc = record.columns.len();
    for (p, partition) in record.partitions.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("{partition}.csv")))?;
        let mut header = vec!["run".to_string(), "epoch".to_string()];
        header.extend(record.columns.iter().cloned());
        header.push("per_image_time_s".into());
        w.write_record(&header)?;
        for row in &record.rows {
            let mut fields = vec![row.run.to_string(), row.epoch.to_string()];
            fields.extend(row.values[p * nc..(p + 1) * nc].iter().map(|&v| fmt_float(v)));
            fields.push(fmt_float(row.per_image_time_s));
            w.write_record(&fields)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Fold summary: one row per (partition, metric) with the best value of each
/// fold, their mean and the mean per-image training time.
pub fn write_summary(records: &[TrainingRecord], path: impl AsRef<Path>) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::TooFewSamples("no folds to summarize".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["partition".to_string(), "metric".to_string()];
    header.extend((1..=records.len()).map(|f| format!("fold_{f}")));
    header.extend(["mean".to_string(), "per_image_time_s".to_string()]);
    w.write_record(&header)?;
    let time = records.iter().map(TrainingRecord::mean_per_image_time).sum::<f64>() / records.len() as f64;
    for p in &first.partitions {
        for c in &first.columns {
            let vals: Vec<f64> = records
                .iter()
                .map(|r| r.best_for(c, p).map_or(f64::NAN, |b| b.value))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let mut fields = vec![p.clone(), c.clone()];
            fields.extend(vals.iter().map(|&v| fmt_float(v)));
            fields.extend([fmt_float(mean), fmt_float(time)]);
            w.write_record(&fields)?;
        }
    }
    w.flush()?;
    Ok(())
}
