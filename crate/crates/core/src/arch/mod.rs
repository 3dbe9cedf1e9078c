//! Anytime networks as one parameter store plus nested stage masks.
//!
//! A [`NestedNetwork`] holds a single trunk shared by every stage. Stage `i`
//! sees the trunk parameters owned by stages `1..=i` (its [`StageMask`]) and
//! its own output head. Because an edge never feeds a unit owned by an
//! earlier stage from one owned by a later stage, the activations a stage
//! computes are reused unchanged by every larger stage.

mod plan;
mod wiring;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use plan::{NestingMode, StagePlan, MAX_LAYERS};
pub use wiring::{BuiltGraph, Edge, Head, UnitGroup, Wiring};

use crate::error::{Error, Result};
use crate::graph::{Feeds, Graph, NodeId, Trace};
use crate::tensor::Tensor;

/// Owning stage of every trunk parameter slot; `mask(i) = {p : owner(p) ≤ i}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMask {
    owners: Vec<usize>,
    num_stages: usize,
}

impl StageMask {
    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn trunk_len(&self) -> usize {
        self.owners.len()
    }

    pub fn owner(&self, slot: usize) -> usize {
        self.owners[slot]
    }

    pub fn contains(&self, stage: usize, slot: usize) -> bool {
        self.owners[slot] <= stage
    }

    /// Membership bitmap of `stage` over the trunk.
    pub fn mask(&self, stage: usize) -> Vec<bool> {
        self.owners.iter().map(|&o| o <= stage).collect()
    }

    pub fn popcount(&self, stage: usize) -> usize {
        self.owners.iter().filter(|&&o| o <= stage).count()
    }
}

#[derive(Debug, Clone)]
struct StageGraph {
    graph: Graph,
    logits: NodeId,
}

/// Graph computing every stage's logits and loss over shared activations.
#[derive(Debug, Clone)]
pub struct MultitaskGraph {
    pub graph: Graph,
    /// Indexed by `stage - 1`.
    pub logits: Vec<NodeId>,
    pub losses: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct NestedNetwork {
    plan: StagePlan,
    wiring: Wiring,
    mask: StageMask,
    params: Vec<f64>,
    stages: Vec<StageGraph>,
    multitask: MultitaskGraph,
}

impl NestedNetwork {
    /// Builds the topology for `plan` and draws initial weights from `seed`.
    pub fn build(plan: &StagePlan, seed: u64) -> Result<Self> {
        let mut net = Self::with_params(plan, None)?;
        net.initialize(seed);
        Ok(net)
    }

    /// Builds the topology and installs `params` (zeros when `None`).
    pub fn with_params(plan: &StagePlan, params: Option<Vec<f64>>) -> Result<Self> {
        plan.validate()?;
        let wiring = Wiring::from_plan(plan);
        let params = match params {
            Some(p) if p.len() != wiring.param_len => {
                return Err(Error::Dimension(format!(
                    "{} parameters for a network of {}",
                    p.len(),
                    wiring.param_len
                )))
            }
            Some(p) => p,
            None => vec![0.0; wiring.param_len],
        };
        let mut stages = Vec::with_capacity(plan.num_stages);
        for stage in 1..=plan.num_stages {
            let built = wiring.build_graph(stage, &[stage], false)?;
            stages.push(StageGraph { graph: built.graph, logits: built.logits[0].1 });
        }
        let all: Vec<usize> = (1..=plan.num_stages).collect();
        let built = wiring.build_graph(plan.num_stages, &all, true)?;
        let multitask = MultitaskGraph {
            graph: built.graph,
            logits: built.logits.iter().map(|&(_, id)| id).collect(),
            losses: built.losses.iter().map(|&(_, id)| id).collect(),
        };
        let mask = StageMask { owners: wiring.trunk_owners(), num_stages: plan.num_stages };
        Ok(NestedNetwork { plan: plan.clone(), wiring, mask, params, stages, multitask })
    }

    /// He-normal weights scaled by each group's total fan-in; zero biases.
    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &self.wiring;
        let mut fan_in = vec![0usize; w.groups.len()];
        for e in &w.edges {
            fan_in[e.dst] += w.groups[e.src].size();
        }
        self.params.iter_mut().for_each(|p| *p = 0.0);
        for e in &w.edges {
            let std = (2.0 / fan_in[e.dst] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut self.params[e.offset..e.offset + w.edge_len(e)] {
                *p = normal.sample(&mut rng);
            }
        }
        for head in &w.heads {
            let std = (1.0 / head.fan_in(&w.groups) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for &(g, off) in &head.inputs {
                for p in &mut self.params[off..off + w.groups[g].size() * head.classes] {
                    *p = normal.sample(&mut rng);
                }
            }
        }
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn wiring(&self) -> &Wiring {
        &self.wiring
    }

    pub fn mask(&self) -> &StageMask {
        &self.mask
    }

    pub fn num_stages(&self) -> usize {
        self.plan.num_stages
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters for a network of {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn multitask(&self) -> &MultitaskGraph {
        &self.multitask
    }

    /// Graph evaluating stage `stage` alone; its logits node.
    pub fn stage_graph(&self, stage: usize) -> Result<(&Graph, NodeId)> {
        self.plan.check_stage(stage)?;
        let s = &self.stages[stage - 1];
        Ok((&s.graph, s.logits))
    }

    pub fn head_range(&self, stage: usize) -> std::ops::Range<usize> {
        self.wiring.head(stage).param_range(&self.wiring.groups)
    }

    /// Whether stage `stage`'s forward pass reads parameter `slot`.
    pub fn is_visible(&self, stage: usize, slot: usize) -> bool {
        if slot < self.mask.trunk_len() {
            self.mask.contains(stage, slot)
        } else {
            self.head_range(stage).contains(&slot)
        }
    }

    /// Parameters first introduced by `stage`: `w_i \ w_{i−1}`, head included.
    pub fn is_owned_by(&self, stage: usize, slot: usize) -> bool {
        if slot < self.mask.trunk_len() {
            self.mask.owner(slot) == stage
        } else {
            self.head_range(stage).contains(&slot)
        }
    }

    /// Number of stages whose forward pass reads `slot`.
    pub fn coverage(&self, slot: usize) -> usize {
        if slot < self.mask.trunk_len() {
            self.num_stages() + 1 - self.mask.owner(slot)
        } else {
            1
        }
    }

    /// Effective dimension `d_i`: trunk mask plus head.
    pub fn stage_dim(&self, stage: usize) -> usize {
        self.mask.popcount(stage) + self.head_range(stage).len()
    }

    /// Logits of stage `stage` on `x[batch×input_dim]`.
    pub fn forward_stage(&self, stage: usize, x: &Tensor) -> Result<Tensor> {
        let (graph, logits) = self.stage_graph(stage)?;
        self.check_input(x)?;
        let trace = graph.forward(&self.params, Feeds::new(&[x], &[]))?;
        Ok(trace.value(logits).expect("logits evaluated").clone())
    }

    /// Shared forward over every stage; losses evaluated when labels are given.
    pub fn forward_all(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<Trace> {
        self.check_input(x)?;
        let label_feed: Vec<&[usize]> = labels.into_iter().collect();
        self.multitask.graph.forward(&self.params, Feeds::new(&[x], &label_feed))
    }

    /// Logits of every stage from one shared forward pass.
    pub fn forward_every_stage(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let trace = self.forward_all(x, None)?;
        Ok(self
            .multitask
            .logits
            .iter()
            .map(|&id| trace.value(id).expect("logits evaluated").clone())
            .collect())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, cols) = x.dims2()?;
        if cols != self.plan.input_dim {
            return Err(Error::Dimension(format!(
                "input has {cols} features, network expects {}",
                self.plan.input_dim
            )));
        }
        Ok(())
    }

    /// Materializes stage `stage` as an independent network.
    pub fn extract_standalone(&self, stage: usize) -> Result<StandaloneNet> {
        self.plan.check_stage(stage)?;
        let (wiring, source) = self.wiring.extract(stage);
        let params = source.iter().map(|&s| self.params[s]).collect();
        let built = wiring.build_graph(1, &[1], false)?;
        Ok(StandaloneNet { wiring, params, graph: built.graph, logits: built.logits[0].1 })
    }

    /// Multiply-accumulates of a stand-alone forward pass of `stage`.
    pub fn flops(&self, stage: usize) -> Result<u64> {
        self.plan.check_stage(stage)?;
        Ok(self.wiring.trunk_macs(stage) + self.wiring.head(stage).macs(&self.wiring.groups))
    }

    /// Cost of producing outputs `1..=stage` in sequence, reusing state:
    /// trunk edges up to `stage` plus every head emitted so far.
    pub fn cumulative_macs(&self, stage: usize) -> Result<u64> {
        self.plan.check_stage(stage)?;
        let heads: u64 = (1..=stage).map(|s| self.wiring.head(s).macs(&self.wiring.groups)).sum();
        Ok(self.wiring.trunk_macs(stage) + heads)
    }

    /// Trunk weight entries removed relative to dense layer-to-layer blocks.
    pub fn pruned_weight_count(&self) -> usize {
        let w = &self.wiring;
        let mut dense = 0;
        let mut layer_width = vec![0usize; self.plan.total_depth() + 1];
        for g in &w.groups {
            layer_width[g.layer] += g.size();
        }
        for layer in 1..=self.plan.total_depth() {
            for src in wiring::source_layers(layer, self.plan.mode.has_skips()) {
                dense += layer_width[src] * layer_width[layer];
            }
        }
        let present: usize = w.edges.iter().map(|e| w.edge_len(e)).sum();
        dense - present
    }
}

fn require_mode(plan: &StagePlan, allowed: &[NestingMode]) -> Result<()> {
    if allowed.contains(&plan.mode) {
        Ok(())
    } else {
        Err(Error::Plan(format!("mode {} not accepted by this builder", plan.mode)))
    }
}

pub fn build_width_nested(plan: &StagePlan, seed: u64) -> Result<NestedNetwork> {
    require_mode(plan, &[NestingMode::Width])?;
    NestedNetwork::build(plan, seed)
}

pub fn build_depth_nested(plan: &StagePlan, seed: u64) -> Result<NestedNetwork> {
    require_mode(plan, &[NestingMode::Depth])?;
    NestedNetwork::build(plan, seed)
}

pub fn build_width_depth_nested(plan: &StagePlan, seed: u64) -> Result<NestedNetwork> {
    require_mode(
        plan,
        &[NestingMode::WidthDepthAlternating, NestingMode::WidthDepthSimultaneous],
    )?;
    NestedNetwork::build(plan, seed)
}

pub fn build_even_width(plan: &StagePlan, seed: u64) -> Result<NestedNetwork> {
    require_mode(plan, &[NestingMode::EvenWidth])?;
    NestedNetwork::build(plan, seed)
}

pub fn build_eann_cascade(plan: &StagePlan, seed: u64) -> Result<NestedNetwork> {
    require_mode(plan, &[NestingMode::EannCascade])?;
    NestedNetwork::build(plan, seed)
}

/// One stage copied out of a nested network into its own parameter vector.
#[derive(Debug, Clone)]
pub struct StandaloneNet {
    wiring: Wiring,
    params: Vec<f64>,
    graph: Graph,
    logits: NodeId,
}

impl StandaloneNet {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let trace = self.graph.forward(&self.params, Feeds::new(&[x], &[]))?;
        Ok(trace.value(self.logits).expect("logits evaluated").clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn wiring(&self) -> &Wiring {
        &self.wiring
    }

    pub fn macs(&self) -> u64 {
        self.wiring.trunk_macs(1) + self.wiring.heads[0].macs(&self.wiring.groups)
    }
}
