//! Deadline-driven anytime inference simulation and accuracy–cost curves.
//!
//! Costs are multiply-accumulate counts. A deadline is feasible for an
//! output whose cost is `<=` the deadline. Inputs with no feasible output
//! receive a uniform random guess.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::NestedNetwork;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::output::{csv_bytes, write_atomic, write_json};
use crate::train::{error_rate, predictions_with, stage_predictions};

/// Cumulative cost of producing each stage's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    stage_costs: Vec<u64>,
}

impl CostModel {
    pub fn new(stage_costs: Vec<u64>) -> Result<Self> {
        if stage_costs.is_empty() {
            return Err(Error::Input("cost model needs at least one stage".into()));
        }
        if stage_costs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!("stage costs {stage_costs:?} not strictly increasing")));
        }
        Ok(CostModel { stage_costs })
    }

    pub fn from_net(net: &NestedNetwork) -> Result<Self> {
        let costs = (1..=net.num_stages()).map(|s| net.cumulative_macs(s)).collect::<Result<_>>()?;
        Self::new(costs)
    }

    pub fn costs(&self) -> &[u64] {
        &self.stage_costs
    }

    /// Cost of the final stage.
    pub fn total(&self) -> u64 {
        *self.stage_costs.last().expect("non-empty")
    }

    /// Largest stage (1-based) finished by `deadline`; `None` means unbounded.
    pub fn stage_for(&self, deadline: Option<f64>) -> Option<usize> {
        match deadline {
            None => Some(self.stage_costs.len()),
            Some(d) => self.stage_costs.iter().rposition(|&c| c as f64 <= d).map(|i| i + 1),
        }
    }
}

/// Budgets in ascending order, followed by an implicit unbounded entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadlineSweep {
    budgets: Vec<f64>,
}

impl DeadlineSweep {
    pub fn new(budgets: Vec<f64>) -> Result<Self> {
        if budgets.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Input("deadlines must be finite and non-negative".into()));
        }
        if budgets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Input("deadlines must be sorted ascending".into()));
        }
        Ok(DeadlineSweep { budgets })
    }

    /// `count` evenly spaced budgets from `lo·total` to `hi·total`.
    pub fn evenly_spaced(total: u64, lo: f64, hi: f64, count: usize) -> Result<Self> {
        let budgets = (0..count)
            .map(|i| {
                let frac = if count == 1 { hi } else { lo + (hi - lo) * i as f64 / (count - 1) as f64 };
                frac * total as f64
            })
            .collect();
        Self::new(budgets)
    }

    /// Seven budgets across `[0.5, 1.0]` of the full cost.
    pub fn default_for(total: u64) -> Self {
        Self::evenly_spaced(total, 0.5, 1.0, 7).expect("valid default sweep")
    }

    /// Every deadline, unbounded (`None`) last.
    pub fn deadlines(&self) -> Vec<Option<f64>> {
        self.budgets.iter().map(|&b| Some(b)).chain([None]).collect()
    }
}

/// Every stage's predictions of an anytime network on a fixed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AnytimePredictions {
    pub costs: CostModel,
    /// Indexed by `stage - 1`.
    pub preds: Vec<Vec<usize>>,
}

impl AnytimePredictions {
    pub fn from_net(net: &NestedNetwork, data: &Dataset) -> Result<Self> {
        Ok(AnytimePredictions { costs: CostModel::from_net(net)?, preds: stage_predictions(net, data)? })
    }

    /// The same network run without early exits: only the final output exists.
    pub fn final_only(net: &NestedNetwork, data: &Dataset) -> Result<Self> {
        let n = net.num_stages();
        let preds = predictions_with(data, |x| net.forward_stage(n, x))?;
        Ok(AnytimePredictions { costs: CostModel::new(vec![net.cumulative_macs(n)?])?, preds: vec![preds] })
    }

    pub fn stage_errors(&self, labels: &[usize]) -> Vec<f64> {
        self.preds.iter().map(|p| error_rate(p, labels)).collect()
    }
}

/// A stand-alone network used by the oracle baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct Independent {
    pub cost: u64,
    pub preds: Vec<usize>,
}

impl Independent {
    /// Final-stage predictions and stand-alone cost of `net`.
    pub fn from_net(net: &NestedNetwork, data: &Dataset) -> Result<Self> {
        let n = net.num_stages();
        let preds = predictions_with(data, |x| net.forward_stage(n, x))?;
        Ok(Independent { cost: net.flops(n)?, preds })
    }
}

fn guesses(rng: &mut ChaCha8Rng, count: usize, num_classes: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..num_classes)).collect()
}

fn check_lengths(labels: &[usize], preds: &[usize]) -> Result<()> {
    if labels.len() != preds.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn chance_error(labels: &[usize], guess: &[usize]) -> f64 {
    error_rate(guess, labels)
}

/// Error when each input uses the deepest stage finished by `deadline`.
/// One guess per input is always drawn from `rng`, so the generator advances
/// identically whatever the deadline.
pub fn simulate_nested(
    net: &AnytimePredictions,
    labels: &[usize],
    num_classes: usize,
    deadline: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    for p in &net.preds {
        check_lengths(labels, p)?;
    }
    let guess = guesses(rng, labels.len(), num_classes);
    Ok(match net.costs.stage_for(deadline) {
        Some(stage) => error_rate(&net.preds[stage - 1], labels),
        None => chance_error(labels, &guess),
    })
}

fn feasible(independents: &[Independent], deadline: Option<f64>) -> Vec<&Independent> {
    independents.iter().filter(|m| deadline.map_or(true, |d| m.cost as f64 <= d)).collect()
}

/// Error of the single feasible network with the lowest error on `labels`.
/// Ties go to the earlier network.
pub fn simulate_oracle_all(
    independents: &[Independent],
    labels: &[usize],
    num_classes: usize,
    deadline: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    for m in independents {
        check_lengths(labels, &m.preds)?;
    }
    let guess = guesses(rng, labels.len(), num_classes);
    let best = feasible(independents, deadline)
        .into_iter()
        .map(|m| error_rate(&m.preds, labels))
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.min(e))));
    Ok(best.unwrap_or_else(|| chance_error(labels, &guess)))
}

/// Error when an input counts as correct if any feasible network gets it right.
pub fn simulate_oracle_each(
    independents: &[Independent],
    labels: &[usize],
    num_classes: usize,
    deadline: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    for m in independents {
        check_lengths(labels, &m.preds)?;
    }
    let guess = guesses(rng, labels.len(), num_classes);
    let pool = feasible(independents, deadline);
    if pool.is_empty() {
        return Ok(chance_error(labels, &guess));
    }
    let missed = (0..labels.len())
        .filter(|&i| pool.iter().all(|m| m.preds[i] != labels[i]))
        .count();
    Ok(missed as f64 / labels.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Nested,
    BaselineAnytime,
    OracleAll,
    OracleEach,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Nested => "nested",
            Scheme::BaselineAnytime => "baseline-anytime",
            Scheme::OracleAll => "oracle-all",
            Scheme::OracleEach => "oracle-each",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub scheme: Scheme,
    /// `None` for the unbounded deadline.
    pub deadline_macs: Option<f64>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub examples: usize,
    pub rows: Vec<SimRow>,
}

impl SimReport {
    pub fn schemes(&self) -> Vec<Scheme> {
        let mut out: Vec<Scheme> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.scheme) {
                out.push(r.scheme);
            }
        }
        out
    }

    /// Rows of one scheme in deadline order.
    pub fn errors(&self, scheme: Scheme) -> Vec<(Option<f64>, f64)> {
        self.rows.iter().filter(|r| r.scheme == scheme).map(|r| (r.deadline_macs, r.error)).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(&["scheme", "deadline_macs", "error"], |w| {
            for r in &self.rows {
                let deadline = r.deadline_macs.map_or_else(|| "inf".to_string(), |d| d.to_string());
                w.write_record([r.scheme.name().to_string(), deadline, r.error.to_string()])?;
            }
            Ok(())
        })
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_atomic(csv_path, &self.to_csv()?)?;
        write_json(json_path, self)
    }
}

/// Inputs to a deadline sweep; optional schemes run only when provided.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub nested: &'a AnytimePredictions,
    pub baseline: Option<&'a AnytimePredictions>,
    pub independents: Option<&'a [Independent]>,
    pub labels: &'a [usize],
    pub num_classes: usize,
}

/// Runs every available scheme at every deadline. At a given deadline all
/// schemes see the same fallback guesses.
pub fn sweep(inputs: SweepInputs<'_>, deadlines: &DeadlineSweep, seed: u64) -> Result<SimReport> {
    let SweepInputs { nested, baseline, independents, labels, num_classes } = inputs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for deadline in deadlines.deadlines() {
        let round = rng.clone();
        let mut push = |scheme, error| rows.push(SimRow { scheme, deadline_macs: deadline, error });
        push(Scheme::Nested, simulate_nested(nested, labels, num_classes, deadline, &mut round.clone())?);
        if let Some(b) = baseline {
            push(
                Scheme::BaselineAnytime,
                simulate_nested(b, labels, num_classes, deadline, &mut round.clone())?,
            );
        }
        if let Some(ind) = independents {
            push(
                Scheme::OracleAll,
                simulate_oracle_all(ind, labels, num_classes, deadline, &mut round.clone())?,
            );
            push(
                Scheme::OracleEach,
                simulate_oracle_each(ind, labels, num_classes, deadline, &mut round.clone())?,
            );
        }
        guesses(&mut rng, labels.len(), num_classes);
    }
    Ok(SimReport { seed, examples: labels.len(), rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: usize,
    pub macs: u64,
    pub error: f64,
}

/// One `(cumulative MACs, error)` point per stage.
pub fn tradeoff_curve(net: &AnytimePredictions, labels: &[usize]) -> Vec<CurvePoint> {
    net.costs
        .costs()
        .iter()
        .zip(net.stage_errors(labels))
        .enumerate()
        .map(|(i, (&macs, error))| CurvePoint { stage: i + 1, macs, error })
        .collect()
}

/// Independent networks as a curve, in the order given.
pub fn oracle_curve(independents: &[Independent], labels: &[usize]) -> Vec<CurvePoint> {
    independents
        .iter()
        .enumerate()
        .map(|(i, m)| CurvePoint { stage: i + 1, macs: m.cost, error: error_rate(&m.preds, labels) })
        .collect()
}

pub fn curves_csv(curves: &[(&str, &[CurvePoint])]) -> Result<Vec<u8>> {
    csv_bytes(&["series", "stage", "macs", "error"], |w| {
        for (name, points) in curves {
            for p in *points {
                w.write_record([name.to_string(), p.stage.to_string(), p.macs.to_string(), p.error.to_string()])?;
            }
        }
        Ok(())
    })
}
