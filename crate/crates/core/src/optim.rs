//! Multitask training strategies over per-stage, zero-padded gradients.
//!
//! Every stage `i` contributes a loss `L_i`. The strategies differ in how the
//! per-stage gradients `g_i` are weighted and combined:
//!
//! | strategy     | per-task step                     | combine                  |
//! |--------------|-----------------------------------|--------------------------|
//! | `Greedy`     | train `w_i \ w_{i−1}` on `L_i`    | n/a (one stage at a time)|
//! | `Sgd`        | backprop `Σ k_i L_i / Σ k_i`      | n/a                      |
//! | `NormSgd`    | rescale to `√d_i · C`             | participation average    |
//! | `Osgd`       | project in priority order         | sum                      |
//! | `OsgdNorm`   | rescale, then project             | sum                      |
//!
//! Projection is sequential: each gradient is stripped of its components
//! along every already-processed gradient, so the outputs are mutually
//! orthogonal and the first gradient in priority order passes through
//! untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::NestedNetwork;
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Sgd,
    NormSgd,
    Osgd,
    OsgdNorm,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Greedy, Strategy::Sgd, Strategy::NormSgd, Strategy::Osgd, Strategy::OsgdNorm];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Sgd => "sgd",
            Strategy::NormSgd => "norm-sgd",
            Strategy::Osgd => "osgd",
            Strategy::OsgdNorm => "osgd-norm",
        }
    }

    pub fn normalizes(self) -> bool {
        matches!(self, Strategy::NormSgd | Strategy::OsgdNorm)
    }

    pub fn projects(self) -> bool {
        matches!(self, Strategy::Osgd | Strategy::OsgdNorm)
    }

    pub fn default_combine(self) -> CombineMode {
        match self {
            Strategy::NormSgd => CombineMode::ParticipationAverage,
            _ => CombineMode::Sum,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "sgd" => Ok(Strategy::Sgd),
            "norm-sgd" | "normsgd" => Ok(Strategy::NormSgd),
            "osgd" => Ok(Strategy::Osgd),
            "osgd-norm" => Ok(Strategy::OsgdNorm),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    Sum,
    /// Coordinate-wise sum divided by the number of stages that read it.
    ParticipationAverage,
}

/// Permutation of stages `1..=n`; earlier entries take precedence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PriorityOrder(Vec<usize>);

impl PriorityOrder {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n + 1];
        for &s in &order {
            if s == 0 || s > n || seen[s] {
                return Err(Error::Config(format!(
                    "priority order {order:?} is not a permutation of 1..={n}"
                )));
            }
            seen[s] = true;
        }
        Ok(PriorityOrder(order))
    }

    pub fn identity(n: usize) -> Self {
        PriorityOrder((1..=n).collect())
    }

    pub fn stages(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for PriorityOrder {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        PriorityOrder::new(v)
    }
}

impl From<PriorityOrder> for Vec<usize> {
    fn from(p: PriorityOrder) -> Self {
        p.0
    }
}

impl FromStr for PriorityOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let order = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad stage `{t}` in priority order")))
            })
            .collect::<Result<Vec<_>>>()?;
        PriorityOrder::new(order)
    }
}

impl fmt::Display for PriorityOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub strategy: Strategy,
    /// Loss importances `k_i`; all ones when empty.
    pub loss_weights: Vec<f64>,
    /// Normalization constant `C`.
    pub norm_constant: f64,
    /// Stage order for projection; `1..=n` when absent.
    pub priority: Option<PriorityOrder>,
    /// Overrides the strategy's default combine mode.
    pub combine: Option<CombineMode>,
    /// Zero-norm guard; `1e-12·√dim` when absent.
    pub zero_tol: Option<f64>,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            strategy: Strategy::Sgd,
            loss_weights: Vec::new(),
            norm_constant: 0.5,
            priority: None,
            combine: None,
            zero_tol: None,
            momentum: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        OptimizerConfig { strategy, ..Default::default() }
    }

    pub fn validate(&self, num_stages: usize) -> Result<()> {
        if !self.loss_weights.is_empty() {
            if self.loss_weights.len() != num_stages {
                return Err(Error::Config(format!(
                    "{} loss weights for {num_stages} stages",
                    self.loss_weights.len()
                )));
            }
            if self.loss_weights.iter().any(|&k| !(k >= 0.0) || !k.is_finite()) {
                return Err(Error::Config("loss weights must be finite and non-negative".into()));
            }
            if self.loss_weights.iter().all(|&k| k == 0.0) {
                return Err(Error::Config("loss weights are all zero".into()));
            }
        }
        if !(self.norm_constant > 0.0) || !self.norm_constant.is_finite() {
            return Err(Error::Config("normalization constant must be positive".into()));
        }
        if let Some(t) = self.zero_tol {
            if !(t > 0.0) {
                return Err(Error::Config("zero-norm tolerance must be positive".into()));
            }
        }
        if let Some(p) = &self.priority {
            if p.len() != num_stages {
                return Err(Error::Config(format!(
                    "priority order {p} does not cover {num_stages} stages"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn weights(&self, num_stages: usize) -> Vec<f64> {
        if self.loss_weights.is_empty() {
            vec![1.0; num_stages]
        } else {
            self.loss_weights.clone()
        }
    }

    pub fn order(&self, num_stages: usize) -> PriorityOrder {
        self.priority.clone().unwrap_or_else(|| PriorityOrder::identity(num_stages))
    }

    pub fn combine_mode(&self) -> CombineMode {
        self.combine.unwrap_or_else(|| self.strategy.default_combine())
    }

    pub fn tolerance(&self, dim: usize) -> f64 {
        self.zero_tol.unwrap_or_else(|| default_tolerance(dim))
    }
}

pub fn default_tolerance(dim: usize) -> f64 {
    1e-12 * (dim as f64).sqrt()
}

/// Full-length gradient of one stage's loss, zero outside what the stage reads.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradient {
    pub stage: usize,
    pub values: Vec<f64>,
    /// Effective dimension `d_i` of the stage's parameters.
    pub dim: usize,
}

impl TaskGradient {
    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Per-stage losses and gradients from one shared forward pass.
pub fn per_task_gradients(
    net: &NestedNetwork,
    x: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<TaskGradient>)> {
    let trace = net.forward_all(x, Some(labels))?;
    let mt = net.multitask();
    let mut losses = Vec::with_capacity(mt.losses.len());
    let mut grads = Vec::with_capacity(mt.losses.len());
    for (idx, &loss) in mt.losses.iter().enumerate() {
        let stage = idx + 1;
        losses.push(trace.scalar(loss).expect("loss evaluated"));
        grads.push(TaskGradient {
            stage,
            values: trace.backward(&mt.graph, loss)?,
            dim: net.stage_dim(stage),
        });
    }
    Ok((losses, grads))
}

/// `Σ k_i L_i / Σ k_i`.
pub fn weighted_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} losses, {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::Config("loss weights sum to zero".into()));
    }
    let acc: f64 = losses.iter().zip(weights).map(|(l, k)| l * k).sum();
    Ok(acc / total)
}

/// Rescales `g` to norm `√d · C`. Gradients with norm `≤ tol` come back
/// unchanged with the flag set.
pub fn normalize_gradient(g: &TaskGradient, norm_constant: f64, tol: f64) -> (TaskGradient, bool) {
    let n = g.norm();
    if n <= tol {
        return (g.clone(), true);
    }
    let scale = (g.dim as f64).sqrt() * norm_constant / n;
    let values = g.values.iter().map(|v| v * scale).collect();
    (TaskGradient { stage: g.stage, values, dim: g.dim }, false)
}

/// Sequentially removes from each gradient its projections onto the
/// gradients processed before it in `order`. Output keeps the input order.
pub fn orthogonalize(
    grads: &[TaskGradient],
    order: &PriorityOrder,
    tol: f64,
) -> Result<Vec<TaskGradient>> {
    let len = grads.first().map_or(0, |g| g.values.len());
    if grads.iter().any(|g| g.values.len() != len) {
        return Err(Error::Input("task gradients differ in length".into()));
    }
    if order.len() != grads.len() {
        return Err(Error::Input(format!(
            "priority order over {} stages for {} gradients",
            order.len(),
            grads.len()
        )));
    }
    let position = |stage: usize| {
        grads
            .iter()
            .position(|g| g.stage == stage)
            .ok_or_else(|| Error::Input(format!("no gradient for stage {stage}")))
    };

    let mut out = grads.to_vec();
    let mut done: Vec<usize> = Vec::with_capacity(grads.len());
    for &stage in order.stages() {
        let i = position(stage)?;
        for &e in &done {
            let (earlier, current) = pair_mut(&mut out, e, i);
            let sq = dot(&earlier.values, &earlier.values);
            if sq.sqrt() <= tol {
                continue;
            }
            let coeff = dot(&earlier.values, &current.values) / sq;
            if coeff == 0.0 {
                continue;
            }
            for (c, a) in current.values.iter_mut().zip(&earlier.values) {
                *c -= coeff * a;
            }
        }
        done.push(i);
    }
    Ok(out)
}

fn pair_mut<T>(v: &mut [T], a: usize, b: usize) -> (&T, &mut T) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&hi[0], &mut lo[b])
    }
}

/// Coordinate-wise combination. `coverage[j]` is the number of stages that
/// read coordinate `j` (only used for participation averaging).
pub fn combine(grads: &[TaskGradient], mode: CombineMode, coverage: &[usize]) -> Result<Vec<f64>> {
    let Some(first) = grads.first() else {
        return Err(Error::Input("nothing to combine".into()));
    };
    let len = first.values.len();
    if grads.iter().any(|g| g.values.len() != len) {
        return Err(Error::Input("task gradients differ in length".into()));
    }
    let mut out = first.values.clone();
    for g in &grads[1..] {
        for (o, v) in out.iter_mut().zip(&g.values) {
            *o += v;
        }
    }
    if mode == CombineMode::ParticipationAverage {
        if coverage.len() != len {
            return Err(Error::Dimension(format!(
                "coverage over {} coordinates, gradients over {len}",
                coverage.len()
            )));
        }
        for (o, &c) in out.iter_mut().zip(coverage) {
            if c > 1 {
                *o /= c as f64;
            }
        }
    }
    Ok(out)
}

/// Mutable per-run optimizer state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    /// Heavy-ball buffer, allocated only when momentum is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<f64>>,
}

/// `W ← W − lr·update` (with heavy-ball momentum when `momentum > 0`).
/// Parameters are left untouched when the update is not finite.
pub fn step(
    params: &mut [f64],
    update: &[f64],
    lr: f64,
    momentum: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != update.len() {
        return Err(Error::Dimension(format!(
            "update over {} coordinates for {} parameters",
            update.len(),
            params.len()
        )));
    }
    if let Some(bad) = update.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "update coordinate {bad} = {} at step {}",
            update[bad], state.step
        )));
    }
    if !lr.is_finite() {
        return Err(Error::NonFinite(format!("learning rate {lr}")));
    }
    if momentum > 0.0 {
        let v = state.velocity.get_or_insert_with(|| vec![0.0; update.len()]);
        for ((p, vel), u) in params.iter_mut().zip(v.iter_mut()).zip(update) {
            *vel = momentum * *vel + u;
            *p -= lr * *vel;
        }
    } else {
        for (p, u) in params.iter_mut().zip(update) {
            *p -= lr * u;
        }
    }
    state.step += 1;
    Ok(())
}

/// What one training iteration did.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// `L_i` before the update, indexed by `stage - 1`.
    pub losses: Vec<f64>,
    /// Task gradients as they entered the combination (after any
    /// normalization and projection). Empty for plain SGD and Greedy.
    pub task_grads: Vec<TaskGradient>,
    /// Gradients that fell under the zero-norm guard during normalization.
    pub flagged: Vec<usize>,
}

/// One iteration of SGD, NormSGD, OSGD or OSGD-Norm on a mini-batch.
pub fn train_step(
    net: &mut NestedNetwork,
    x: &Tensor,
    labels: &[usize],
    config: &OptimizerConfig,
    lr: f64,
    state: &mut OptimizerState,
) -> Result<StepReport> {
    let n = net.num_stages();
    let dim = net.num_params();
    let tol = config.tolerance(dim);
    let (losses, update, task_grads, flagged) = match config.strategy {
        Strategy::Greedy => {
            return Err(Error::Config(
                "greedy training runs stage by stage; use greedy_step".into(),
            ))
        }
        Strategy::Sgd => {
            let weights = config.weights(n);
            let total: f64 = weights.iter().sum();
            let trace = net.forward_all(x, Some(labels))?;
            let mt = net.multitask();
            let seeds: Vec<_> =
                mt.losses.iter().zip(&weights).map(|(&id, k)| (id, k / total)).collect();
            let losses = mt.losses.iter().map(|&id| trace.scalar(id).expect("loss")).collect();
            let update = trace.backward_weighted(&mt.graph, &seeds)?;
            (losses, update, Vec::new(), Vec::new())
        }
        strategy => {
            let (losses, mut grads) = per_task_gradients(net, x, labels)?;
            let mut flagged = Vec::new();
            if strategy.normalizes() {
                for g in &mut grads {
                    let (scaled, flag) = normalize_gradient(g, config.norm_constant, tol);
                    if flag {
                        flagged.push(g.stage);
                    }
                    *g = scaled;
                }
            }
            if strategy.projects() {
                grads = orthogonalize(&grads, &config.order(n), tol)?;
            }
            let coverage: Vec<usize> = match config.combine_mode() {
                CombineMode::Sum => Vec::new(),
                CombineMode::ParticipationAverage => (0..dim).map(|j| net.coverage(j)).collect(),
            };
            let update = combine(&grads, config.combine_mode(), &coverage)?;
            (losses, update, grads, flagged)
        }
    };
    step(net.params_mut(), &update, lr, config.momentum, state)?;
    Ok(StepReport { losses, task_grads, flagged })
}

/// One greedy iteration: only `w_i \ w_{i−1}` (and head `i`) move, driven by `L_i`.
pub fn greedy_step(
    net: &mut NestedNetwork,
    stage: usize,
    x: &Tensor,
    labels: &[usize],
    lr: f64,
    momentum: f64,
    state: &mut OptimizerState,
) -> Result<Vec<f64>> {
    net.plan().check_stage(stage)?;
    let trace = net.forward_all(x, Some(labels))?;
    let mt = net.multitask();
    let losses: Vec<f64> = mt.losses.iter().map(|&id| trace.scalar(id).expect("loss")).collect();
    let mut grad = trace.backward(&mt.graph, mt.losses[stage - 1])?;
    for (j, g) in grad.iter_mut().enumerate() {
        if !net.is_owned_by(stage, j) {
            *g = 0.0;
        }
    }
    step(net.params_mut(), &grad, lr, momentum, state)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{NestingMode, StagePlan};

    fn tg(stage: usize, values: &[f64]) -> TaskGradient {
        TaskGradient { stage, values: values.to_vec(), dim: values.len() }
    }

    #[test]
    fn weighted_loss_cases() {
        assert_eq!(weighted_loss(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(weighted_loss(&[1.7, 2.0, 3.0], &[1.0, 0.0, 0.0]).unwrap(), 1.7);
        assert_eq!(weighted_loss(&[2.0, 6.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert!(matches!(weighted_loss(&[1.0], &[0.0]), Err(Error::Config(_))));
        assert!(weighted_loss(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn normalize_to_target_norm() {
        let g = TaskGradient { stage: 1, values: vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0], dim: 4 };
        let (out, flagged) = normalize_gradient(&g, 0.5, 1e-12);
        assert!(!flagged);
        assert!((out.norm() - 1.0).abs() < 1e-15);
        assert_eq!(&out.values[2..], &[0.0; 4]);
        assert!((out.values[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn normalize_fixed_point_and_guard() {
        let g = TaskGradient { stage: 1, values: vec![0.6, 0.8, 0.0], dim: 4 };
        let (out, _) = normalize_gradient(&g, 0.5, 1e-12);
        for (a, b) in out.values.iter().zip(&g.values) {
            assert!((a - b).abs() <= 1e-15);
        }
        let zero = tg(2, &[0.0; 5]);
        let (out, flagged) = normalize_gradient(&zero, 0.5, 1e-12);
        assert!(flagged);
        assert_eq!(out, zero);
    }

    #[test]
    fn project_out_first() {
        let grads = [tg(1, &[1.0, 0.0]), tg(2, &[1.0, 1.0])];
        let out = orthogonalize(&grads, &PriorityOrder::identity(2), 1e-12).unwrap();
        assert_eq!(out[0].values, vec![1.0, 0.0]);
        assert_eq!(out[1].values, vec![0.0, 1.0]);
    }

    #[test]
    fn orthogonal_inputs_pass_through() {
        let grads = [tg(1, &[1.0, 0.0, 0.0]), tg(2, &[0.0, 2.0, 0.0]), tg(3, &[0.0, 0.0, -1.0])];
        let out = orthogonalize(&grads, &PriorityOrder::identity(3), 1e-12).unwrap();
        assert_eq!(out, grads.to_vec());
    }

    #[test]
    fn parallel_gradient_vanishes() {
        let grads = [tg(1, &[1.0, -2.0, 0.5]), tg(2, &[2.0, -4.0, 1.0])];
        let out = orthogonalize(&grads, &PriorityOrder::identity(2), 1e-12).unwrap();
        assert!(out[1].values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn priority_order_controls_which_passes_through() {
        let grads = [tg(1, &[1.0, 1.0]), tg(2, &[1.0, 0.0])];
        let order: PriorityOrder = "2,1".parse().unwrap();
        let out = orthogonalize(&grads, &order, 1e-12).unwrap();
        assert_eq!(out[1].values, vec![1.0, 0.0]);
        assert_eq!(out[0].values, vec![0.0, 1.0]);
    }

    #[test]
    fn zero_earlier_gradient_is_skipped() {
        let grads = [tg(1, &[0.0, 0.0]), tg(2, &[1.0, 1.0])];
        let out = orthogonalize(&grads, &PriorityOrder::identity(2), 1e-12).unwrap();
        assert_eq!(out[1].values, vec![1.0, 1.0]);
    }

    #[test]
    fn orthogonalize_rejects_mismatch() {
        let grads = [tg(1, &[1.0, 0.0]), tg(2, &[1.0])];
        assert!(orthogonalize(&grads, &PriorityOrder::identity(2), 1e-12).is_err());
    }

    #[test]
    fn priority_parse() {
        assert_eq!("2,1,3".parse::<PriorityOrder>().unwrap().stages(), &[2, 1, 3]);
        assert!("1,1".parse::<PriorityOrder>().is_err());
        assert!("0,1".parse::<PriorityOrder>().is_err());
        assert!("1,x".parse::<PriorityOrder>().is_err());
    }

    #[test]
    fn combine_modes() {
        let grads = [tg(1, &[1.0, 0.0, 0.0]), tg(2, &[1.0, 2.0, 0.0]), tg(3, &[1.0, 2.0, 5.0])];
        let coverage = [3, 2, 1];
        assert_eq!(combine(&grads, CombineMode::Sum, &[]).unwrap(), vec![3.0, 4.0, 5.0]);
        assert_eq!(
            combine(&grads, CombineMode::ParticipationAverage, &coverage).unwrap(),
            vec![1.0, 2.0, 5.0]
        );
        let single = [tg(1, &[0.5, -1.0])];
        for mode in [CombineMode::Sum, CombineMode::ParticipationAverage] {
            assert_eq!(combine(&single, mode, &[1, 1]).unwrap(), vec![0.5, -1.0]);
        }
    }

    #[test]
    fn step_cases() {
        let mut state = OptimizerState::default();
        let mut p = vec![1.0, -2.0];
        step(&mut p, &[0.0, 0.0], 0.1, 0.0, &mut state).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        step(&mut p, &[5.0, 5.0], 0.0, 0.0, &mut state).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        step(&mut p, &[1.0, -1.0], 0.5, 0.0, &mut state).unwrap();
        assert_eq!(p, vec![0.5, -1.5]);
        let err = step(&mut p, &[f64::NAN, 0.0], 0.5, 0.0, &mut state).unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(p, vec![0.5, -1.5]);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn step_descends_quadratic_bowl() {
        // f(p) = ½ pᵀ diag(1, 4) p
        let f = |p: &[f64]| 0.5 * (p[0] * p[0] + 4.0 * p[1] * p[1]);
        let mut p = vec![1.0, -0.5];
        let before = f(&p);
        let grad = vec![p[0], 4.0 * p[1]];
        step(&mut p, &grad, 0.1, 0.0, &mut OptimizerState::default()).unwrap();
        assert!(f(&p) < before);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::with_strategy(Strategy::Osgd);
        assert!(c.validate(3).is_ok());
        c.loss_weights = vec![0.0, 0.0, 0.0];
        assert!(c.validate(3).is_err());
        c.loss_weights = vec![1.0, -1.0, 1.0];
        assert!(c.validate(3).is_err());
        c.loss_weights = vec![];
        c.norm_constant = 0.0;
        assert!(c.validate(3).is_err());
        c.norm_constant = 0.5;
        c.priority = Some(PriorityOrder::identity(2));
        assert!(c.validate(3).is_err());
    }

    #[test]
    fn greedy_step_moves_only_owned_parameters() {
        let plan = StagePlan::new(NestingMode::Width, 3, 3, 2, 3, 2);
        let mut net = NestedNetwork::build(&plan, 4).unwrap();
        let x = Tensor::new(vec![4, 2], vec![0.1, 0.9, -0.4, 0.3, 0.8, -0.7, 0.2, 0.2]).unwrap();
        let before = net.params().to_vec();
        greedy_step(&mut net, 2, &x, &[0, 1, 2, 1], 0.5, 0.0, &mut OptimizerState::default())
            .unwrap();
        let mut moved = 0;
        for (j, (a, b)) in before.iter().zip(net.params()).enumerate() {
            if !net.is_owned_by(2, j) {
                assert_eq!(a.to_bits(), b.to_bits(), "slot {j}");
            } else if a != b {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }
}
