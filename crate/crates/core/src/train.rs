//! Seeded training and evaluation loops.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{NestedNetwork, StagePlan};
use crate::data::{load_csv, load_idx, CsvSchema, Dataset, Spiral, Split};
use crate::error::{Error, Result};
use crate::optim::{greedy_step, train_step, CombineMode, OptimizerConfig, OptimizerState, Strategy};
use crate::output::{csv_bytes, write_atomic, write_json};
use crate::schedule::LrSchedule;
use crate::tensor::Tensor;

/// Stream used for mini-batch shuffling; stream 0 is reserved for initialization.
pub const SHUFFLE_STREAM: u64 = 1;

const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Spiral {
        seed: u64,
        train: usize,
        val: usize,
        classes: usize,
        noise: f64,
        turns: f64,
        #[serde(default = "unit_radius")]
        radius: f64,
    },
    Csv {
        train: PathBuf,
        val: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
}

fn unit_radius() -> f64 {
    1.0
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Spiral { seed: 0, train: 3000, val: 1000, classes: 3, noise: 0.15, turns: 0.5, radius: 3.0 }
    }
}

impl DataConfig {
    /// Loads the train and validation splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = match self {
            DataConfig::Spiral { seed, train, val, classes, noise, turns, radius } => {
                let spec = |points| Spiral {
                    points,
                    classes: *classes,
                    noise: *noise,
                    turns: *turns,
                    radius: *radius,
                };
                // Validation draws from an independent stream of the same distribution.
                (spec(*train).generate(*seed)?, spec(*val).generate(seed ^ 0x5851_f42d_4c95_7f2d)?)
            }
            DataConfig::Csv { train, val, schema } => (load_csv(train, schema)?, load_csv(val, schema)?),
            DataConfig::Idx { train_images, train_labels, val_images, val_labels } => {
                (load_idx(train_images, train_labels)?, load_idx(val_images, val_labels)?)
            }
        };
        if train.input_dim() != val.input_dim() {
            return Err(Error::Dimension(format!(
                "train has {} features, validation {}",
                train.input_dim(),
                val.input_dim()
            )));
        }
        Ok((train, val.with_split(Split::Val)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub plan: StagePlan,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            plan: StagePlan::default(),
            optimizer: OptimizerConfig::default(),
            schedule: LrSchedule::default(),
            epochs: 200,
            batch_size: 64,
            seeds: vec![0],
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.optimizer.validate(self.plan.num_stages)?;
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.optimizer.strategy == Strategy::Greedy && self.epochs < self.plan.num_stages {
            return Err(Error::Config(format!(
                "greedy training needs at least one epoch per stage ({} < {})",
                self.epochs, self.plan.num_stages
            )));
        }
        Ok(())
    }

    fn check_data(&self, train: &Dataset) -> Result<()> {
        if train.input_dim() != self.plan.input_dim {
            return Err(Error::Config(format!(
                "data has {} features, plan expects {}",
                train.input_dim(),
                self.plan.input_dim
            )));
        }
        if train.num_classes() != self.plan.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes, plan expects {}",
                train.num_classes(),
                self.plan.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Loss,
    Error,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Loss => "loss",
            Metric::Error => "error",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub epoch: usize,
    pub stage: usize,
    pub split: Split,
    pub metric: Metric,
    pub value: f64,
}

/// Per-epoch, per-stage metrics of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub seed: u64,
    pub records: Vec<Record>,
    /// Validation error per stage after the last completed epoch.
    pub final_val_error: Vec<f64>,
}

impl RunHistory {
    fn new(seed: u64) -> Self {
        RunHistory { seed, records: Vec::new(), final_val_error: Vec::new() }
    }

    pub fn epochs(&self) -> usize {
        self.records.iter().map(|r| r.epoch).max().unwrap_or(0)
    }

    pub fn series(&self, stage: usize, split: Split, metric: Metric) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(&["epoch", "stage", "split", "metric", "value"], |w| {
            for r in &self.records {
                w.write_record([
                    r.epoch.to_string(),
                    r.stage.to_string(),
                    r.split.to_string(),
                    r.metric.to_string(),
                    r.value.to_string(),
                ])?;
            }
            Ok(())
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

/// Fraction misclassified per stage, indexed by `stage - 1`.
pub fn evaluate(net: &NestedNetwork, data: &Dataset) -> Result<Vec<f64>> {
    let preds = stage_predictions(net, data)?;
    Ok(preds.iter().map(|p| error_rate(p, data.labels())).collect())
}

/// Argmax predictions of every stage over `data`, indexed by `stage - 1`.
pub fn stage_predictions(net: &NestedNetwork, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let mut preds = vec![Vec::with_capacity(data.len()); net.num_stages()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        for (p, logits) in preds.iter_mut().zip(net.forward_every_stage(&x)?) {
            p.extend(logits.argmax_rows());
        }
    }
    Ok(preds)
}

/// Argmax predictions of an arbitrary logits function over `data`.
pub fn predictions_with<F>(data: &Dataset, mut logits: F) -> Result<Vec<usize>>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        out.extend(logits(&x)?.argmax_rows());
    }
    Ok(out)
}

pub fn error_rate(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len() as f64
}

/// A trained seed: final network, optimizer state and shuffle-stream position.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub history: RunHistory,
    pub net: NestedNetwork,
    pub state: OptimizerState,
    pub shuffle_word_pos: u128,
}

/// Training stopped early; carries the history recorded so far.
#[derive(Debug)]
pub struct TrainFailure {
    pub seed: Option<u64>,
    pub error: Error,
    pub partial: Vec<RunHistory>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seed {
            Some(seed) => write!(f, "seed {seed}: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { seed: None, error, partial: Vec::new() }
    }
}

/// Trains one seed on already-loaded data.
pub fn train_seed(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> std::result::Result<SeedRun, TrainFailure> {
    config.validate()?;
    config.check_data(train)?;
    let mut net = NestedNetwork::build(&config.plan, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut state = OptimizerState::default();
    let mut history = RunHistory::new(seed);
    let fail = |history: RunHistory, error: Error| TrainFailure {
        seed: Some(seed),
        error,
        partial: vec![history],
    };

    let n = config.plan.num_stages;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let greedy = config.optimizer.strategy == Strategy::Greedy;
    // Greedy splits the epoch budget across stages; the remainder goes to the last.
    let phase_epochs: Vec<usize> = if greedy {
        let base = config.epochs / n;
        (1..=n).map(|s| if s == n { config.epochs - base * (n - 1) } else { base }).collect()
    } else {
        vec![config.epochs]
    };

    let mut epoch = 0;
    for (phase, &epochs) in phase_epochs.iter().enumerate() {
        let total_steps = epochs * steps_per_epoch;
        let mut step_in_phase = 0;
        state.velocity = None;
        for _ in 0..epochs {
            epoch += 1;
            let mut loss_sums = vec![0.0; n];
            for batch in train.epoch_batches(config.batch_size, &mut rng) {
                let lr = config.schedule.lr_at(step_in_phase, total_steps);
                step_in_phase += 1;
                let (x, y) = train.batch(&batch);
                let losses = if greedy {
                    greedy_step(&mut net, phase + 1, &x, &y, lr, config.optimizer.momentum, &mut state)
                } else {
                    train_step(&mut net, &x, &y, &config.optimizer, lr, &mut state).map(|r| r.losses)
                };
                let losses = match losses {
                    Ok(l) => l,
                    Err(e) => return Err(fail(history, e)),
                };
                for (acc, l) in loss_sums.iter_mut().zip(&losses) {
                    *acc += l * batch.len() as f64;
                }
            }
            let val_error = match evaluate(&net, val) {
                Ok(v) => v,
                Err(e) => return Err(fail(history, e)),
            };
            for stage in 1..=n {
                history.records.push(Record {
                    epoch,
                    stage,
                    split: Split::Train,
                    metric: Metric::Loss,
                    value: loss_sums[stage - 1] / train.len() as f64,
                });
                history.records.push(Record {
                    epoch,
                    stage,
                    split: Split::Val,
                    metric: Metric::Error,
                    value: val_error[stage - 1],
                });
            }
            history.final_val_error = val_error;
        }
    }
    Ok(SeedRun { history, net, state, shuffle_word_pos: rng.get_word_pos() })
}

/// Trains every configured seed, serially or on one thread per seed.
/// Results are returned in seed order either way.
pub fn train(config: &TrainConfig, parallel: bool) -> std::result::Result<TrainReport, TrainFailure> {
    config.validate()?;
    let (train_set, val_set) = config.data.load()?;
    config.check_data(&train_set)?;
    let results: Vec<_> = if parallel {
        let (train_ref, val_ref) = (&train_set, &val_set);
        std::thread::scope(|scope| {
            let handles: Vec<_> = config
                .seeds
                .iter()
                .map(|&seed| scope.spawn(move || train_seed(config, train_ref, val_ref, seed)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        let mut out = Vec::new();
        for &seed in &config.seeds {
            let r = train_seed(config, &train_set, &val_set, seed);
            let failed = r.is_err();
            out.push(r);
            if failed {
                break;
            }
        }
        out
    };

    let mut runs = Vec::new();
    let mut failure: Option<TrainFailure> = None;
    for r in results {
        match r {
            Ok(run) => runs.push(run),
            Err(f) if failure.is_none() => failure = Some(f),
            Err(f) => failure.as_mut().expect("set").partial.extend(f.partial),
        }
    }
    if let Some(mut f) = failure {
        let mut partial: Vec<RunHistory> = runs.into_iter().map(|r| r.history).collect();
        partial.append(&mut f.partial);
        partial.sort_by_key(|h| h.seed);
        f.partial = partial;
        return Err(f);
    }
    let summary = Summary::new(config, &runs)?;
    Ok(TrainReport { runs, summary })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub macs: u64,
    pub mean_error: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std_error: Option<f64>,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: Strategy,
    pub priority: Vec<usize>,
    pub combine: CombineMode,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub stages: Vec<StageSummary>,
}

impl Summary {
    pub fn new(config: &TrainConfig, runs: &[SeedRun]) -> Result<Self> {
        let n = config.plan.num_stages;
        let probe = runs.first().ok_or_else(|| Error::State("no completed runs".into()))?;
        let mut stages = Vec::with_capacity(n);
        for stage in 1..=n {
            let per_seed: Vec<f64> = runs.iter().map(|r| r.history.final_val_error[stage - 1]).collect();
            let (mean_error, std_error) = mean_std(&per_seed);
            stages.push(StageSummary {
                stage,
                macs: probe.net.cumulative_macs(stage)?,
                mean_error,
                std_error,
                per_seed,
            });
        }
        Ok(Summary {
            strategy: config.optimizer.strategy,
            priority: config.optimizer.order(n).into(),
            combine: config.optimizer.combine_mode(),
            seeds: runs.iter().map(|r| r.history.seed).collect(),
            epochs: config.epochs,
            stages,
        })
    }

    pub fn mean_errors(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.mean_error).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Mean and sample standard deviation (absent below two samples).
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    if xs.is_empty() {
        return (f64::NAN, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::NestingMode;

    fn tiny(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            plan: StagePlan::new(NestingMode::Width, 2, 4, 1, 3, 2),
            optimizer: OptimizerConfig::with_strategy(strategy),
            epochs: 4,
            batch_size: 16,
            seeds: vec![1, 2],
            data: DataConfig::Spiral { seed: 0, train: 90, val: 60, classes: 3, noise: 0.1, turns: 0.5, radius: 1.0 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, None));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn error_rate_counts_mismatches() {
        assert_eq!(error_rate(&[0, 1, 2, 2], &[0, 1, 2, 0]), 0.25);
        assert_eq!(error_rate(&[1, 1], &[1, 1]), 0.0);
    }

    #[test]
    fn history_has_one_record_per_epoch_stage_metric() {
        let report = train(&tiny(Strategy::Osgd), false).unwrap();
        for run in &report.runs {
            assert_eq!(run.history.records.len(), 4 * 2 * 2);
            assert_eq!(run.history.epochs(), 4);
        }
        assert_eq!(report.summary.stages.len(), 2);
        assert!(report.summary.stages[0].std_error.is_some());
    }

    #[test]
    fn parallel_matches_serial() {
        let config = tiny(Strategy::NormSgd);
        let a = train(&config, false).unwrap();
        let b = train(&config, true).unwrap();
        assert_eq!(a.summary, b.summary);
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.history, y.history);
            assert_eq!(x.net.params(), y.net.params());
        }
    }

    #[test]
    fn greedy_epoch_split() {
        let mut config = tiny(Strategy::Greedy);
        config.epochs = 5;
        let report = train(&config, false).unwrap();
        assert_eq!(report.runs[0].history.epochs(), 5);
        config.epochs = 1;
        assert!(matches!(train(&config, false).unwrap_err().error, Error::Config(_)));
    }

    #[test]
    fn config_mismatch_is_reported() {
        let mut config = tiny(Strategy::Sgd);
        config.plan.num_classes = 4;
        assert!(matches!(train(&config, false).unwrap_err().error, Error::Config(_)));
    }

    #[test]
    fn toml_round_trip() {
        let config = tiny(Strategy::Osgd);
        let text = config.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), config);
        assert!(TrainConfig::from_toml("epochz = 3").is_err());
    }
}
