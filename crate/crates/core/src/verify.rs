//! Gradient and orthogonality audits over randomly drawn networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arch::{NestedNetwork, NestingMode, StagePlan};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{finite_diff_against, Feeds};
use crate::optim::{per_task_gradients, train_step, OptimizerConfig, OptimizerState};
use crate::tensor::{dot, norm, Tensor};

/// Pre-activations closer than this to zero make finite differences unreliable.
pub const MIN_KINK_MARGIN: f64 = 1e-3;

const BATCH: usize = 5;
const MAX_REDRAWS: usize = 50;
const PARAM_JITTER: f64 = 0.1;

/// Small random plan in `mode` with at most `max_stages` stages.
pub fn random_plan<R: Rng>(rng: &mut R, mode: NestingMode, max_stages: usize) -> StagePlan {
    StagePlan::new(
        mode,
        rng.random_range(1..=max_stages.max(1)),
        rng.random_range(1..=3),
        rng.random_range(1..=2),
        rng.random_range(2..=4),
        rng.random_range(1..=3),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub plan: StagePlan,
    pub params: usize,
    /// Largest relative error over every stage loss and parameter.
    pub max_rel_error: f64,
    pub kink_margin: f64,
}

/// Finite-difference check of every stage loss of a freshly built network.
/// Each attempt jitters the initial parameters by `N(0, PARAM_JITTER²)` and
/// draws a random batch; attempts repeat until no relu input sits within
/// [`MIN_KINK_MARGIN`] of its kink. Without the jitter, zero-initialized
/// biases put every unit fed only by dead units exactly on the kink.
/// `flip_sign` negates the analytic gradient (fault injection).
pub fn gradcheck_case(plan: &StagePlan, seed: u64, eps: f64, flip_sign: bool) -> Result<GradcheckCase> {
    let mut net = NestedNetwork::build(plan, seed)?;
    let init = net.params().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    for _ in 0..MAX_REDRAWS {
        let jittered = init
            .iter()
            .map(|p| p + PARAM_JITTER * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        net.set_params(jittered)?;
        let mt = net.multitask();
        let data: Vec<f64> =
            (0..BATCH * plan.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new(vec![BATCH, plan.input_dim], data)?;
        let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..plan.num_classes)).collect();
        let inputs = [&x];
        let label_feed = [labels.as_slice()];
        let feeds = Feeds::new(&inputs, &label_feed);
        let trace = mt.graph.forward(net.params(), feeds)?;
        let margin = trace.min_relu_margin(&mt.graph);
        if margin < MIN_KINK_MARGIN {
            continue;
        }
        let mut worst = 0.0f64;
        for &loss in &mt.losses {
            let mut analytic = trace.backward(&mt.graph, loss)?;
            if flip_sign {
                analytic.iter_mut().for_each(|g| *g = -*g);
            }
            let err = finite_diff_against(&mt.graph, net.params(), feeds, loss, eps, &analytic)?;
            worst = worst.max(err);
        }
        return Ok(GradcheckCase {
            plan: plan.clone(),
            params: net.num_params(),
            max_rel_error: worst,
            kink_margin: margin,
        });
    }
    Err(Error::State(format!("no kink-free batch found for {plan:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityAudit {
    pub steps: usize,
    pub pairs: usize,
    /// Largest `|⟨a, b⟩| / (‖a‖‖b‖)` over post-projection pairs.
    pub max_cosine: f64,
    /// Whether the first gradient in priority order was bit-identical
    /// before and after projection at every step.
    pub leader_unchanged: bool,
}

/// Trains `net` for `steps` mini-batches under `config`, checking every
/// post-projection gradient pair. Pairs containing a gradient at or below the
/// zero-norm tolerance are skipped.
pub fn orthogonality_audit(
    net: &mut NestedNetwork,
    data: &Dataset,
    config: &OptimizerConfig,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<OrthogonalityAudit> {
    config.validate(net.num_stages())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimizerState::default();
    let tol = config.tolerance(net.num_params());
    let leader = config.order(net.num_stages()).stages()[0];
    let mut audit = OrthogonalityAudit { steps: 0, pairs: 0, max_cosine: 0.0, leader_unchanged: true };
    let mut batches = Vec::new();
    while audit.steps < steps {
        if batches.is_empty() {
            batches = data.epoch_batches(batch_size, &mut rng);
            batches.reverse();
        }
        let idx = batches.pop().expect("refilled");
        let (x, y) = data.batch(&idx);
        let (_, before) = per_task_gradients(net, &x, &y)?;
        let report = train_step(net, &x, &y, config, lr, &mut state)?;
        audit.steps += 1;
        let grads = &report.task_grads;
        if grads.len() > 1 && !config.strategy.normalizes() {
            let pre = &before[leader - 1].values;
            let post = &grads[leader - 1].values;
            if pre.iter().zip(post).any(|(a, b)| a.to_bits() != b.to_bits()) {
                audit.leader_unchanged = false;
            }
        }
        for i in 0..grads.len() {
            for j in i + 1..grads.len() {
                let (a, b) = (&grads[i].values, &grads[j].values);
                let (na, nb) = (norm(a), norm(b));
                if na <= tol || nb <= tol {
                    continue;
                }
                audit.pairs += 1;
                audit.max_cosine = audit.max_cosine.max(dot(a, b).abs() / (na * nb));
            }
        }
    }
    Ok(audit)
}
