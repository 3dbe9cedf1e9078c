//! Unit groups, edge blocks and heads of a nested trunk.
//!
//! Every hidden layer is split into stripes; a `(layer, stripe)` pair is a
//! [`UnitGroup`] owned by the first stage that can see it. An [`Edge`] is a
//! dense weight block between two groups and exists only when the source is
//! owned no later than the target, so no stage ever reads units introduced
//! after it. Pruned edges have no parameters at all.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::plan::StagePlan;
use crate::error::Result;
use crate::graph::{Graph, GraphBuilder, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitGroup {
    /// 0 is the input layer.
    pub layer: usize,
    pub stripe: usize,
    /// Unit indices within the layer.
    pub units: Range<usize>,
    pub owner: usize,
}

impl UnitGroup {
    pub fn size(&self) -> usize {
        self.units.len()
    }
}

/// Weight block `[src.size × dst.size]` at `offset`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub offset: usize,
    pub owner: usize,
}

/// Output head: one weight block per visible stripe of the read layer plus a bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub stage: usize,
    pub layer: usize,
    /// `(group, offset)` with weights `[group.size × classes]`.
    pub inputs: Vec<(usize, usize)>,
    pub bias_offset: usize,
    pub classes: usize,
}

impl Head {
    pub fn fan_in(&self, groups: &[UnitGroup]) -> usize {
        self.inputs.iter().map(|&(g, _)| groups[g].size()).sum()
    }

    pub fn param_range(&self, groups: &[UnitGroup]) -> Range<usize> {
        let start = self.inputs.first().map_or(self.bias_offset, |&(_, off)| off);
        let len = (self.fan_in(groups) + 1) * self.classes;
        start..start + len
    }

    pub fn macs(&self, groups: &[UnitGroup]) -> u64 {
        (self.fan_in(groups) * self.classes) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub num_stages: usize,
    pub groups: Vec<UnitGroup>,
    pub edges: Vec<Edge>,
    /// Bias offset per group; `None` for the input group.
    pub biases: Vec<Option<usize>>,
    pub heads: Vec<Head>,
    /// Trunk parameters occupy `0..trunk_len`; heads follow.
    pub trunk_len: usize,
    pub param_len: usize,
}

/// Node handles of a built graph.
#[derive(Debug, Clone)]
pub struct BuiltGraph {
    pub graph: Graph,
    /// `(stage, logits)` for every head included.
    pub logits: Vec<(usize, NodeId)>,
    /// `(stage, loss)` when losses were requested.
    pub losses: Vec<(usize, NodeId)>,
}

impl Wiring {
    pub fn from_plan(plan: &StagePlan) -> Wiring {
        let depth = plan.total_depth();
        let top_level = plan.width_level(plan.num_stages);

        let mut groups = vec![UnitGroup {
            layer: 0,
            stripe: 0,
            units: 0..plan.input_dim,
            owner: 1,
        }];
        let mut layer_groups: Vec<Vec<usize>> = vec![vec![0]];
        for layer in 1..=depth {
            let layer_owner = plan.layer_owner(layer);
            let mut ids = Vec::new();
            let mut start = 0;
            for stripe in 0..=top_level {
                let end = plan.stripe_end(stripe);
                ids.push(groups.len());
                groups.push(UnitGroup {
                    layer,
                    stripe,
                    units: start..end,
                    owner: layer_owner.max(plan.stripe_owner(stripe)),
                });
                start = end;
            }
            layer_groups.push(ids);
        }

        let mut edges = Vec::new();
        let mut biases = vec![None; groups.len()];
        let mut offset = 0;
        for dst in 1..groups.len() {
            let layer = groups[dst].layer;
            for src_layer in source_layers(layer, plan.mode.has_skips()) {
                for &src in &layer_groups[src_layer] {
                    if groups[src].owner <= groups[dst].owner {
                        edges.push(Edge { src, dst, offset, owner: groups[dst].owner });
                        offset += groups[src].size() * groups[dst].size();
                    }
                }
            }
            biases[dst] = Some(offset);
            offset += groups[dst].size();
        }
        let trunk_len = offset;

        let mut heads = Vec::new();
        for stage in 1..=plan.num_stages {
            let layer = plan.head_layer(stage);
            let mut inputs = Vec::new();
            for &g in &layer_groups[layer] {
                if groups[g].owner <= stage {
                    inputs.push((g, offset));
                    offset += groups[g].size() * plan.num_classes;
                }
            }
            heads.push(Head {
                stage,
                layer,
                inputs,
                bias_offset: offset,
                classes: plan.num_classes,
            });
            offset += plan.num_classes;
        }

        Wiring {
            num_stages: plan.num_stages,
            groups,
            edges,
            biases,
            heads,
            trunk_len,
            param_len: offset,
        }
    }

    pub fn head(&self, stage: usize) -> &Head {
        &self.heads[stage - 1]
    }

    /// Owning stage of every trunk parameter slot.
    pub fn trunk_owners(&self) -> Vec<usize> {
        let mut owners = vec![0; self.trunk_len];
        for e in &self.edges {
            let len = self.groups[e.src].size() * self.groups[e.dst].size();
            owners[e.offset..e.offset + len].iter_mut().for_each(|o| *o = e.owner);
        }
        for (g, bias) in self.biases.iter().enumerate() {
            if let Some(off) = bias {
                let len = self.groups[g].size();
                owners[*off..off + len].iter_mut().for_each(|o| *o = self.groups[g].owner);
            }
        }
        owners
    }

    pub fn edge_len(&self, e: &Edge) -> usize {
        self.groups[e.src].size() * self.groups[e.dst].size()
    }

    /// Multiply-accumulates of the trunk edges available to `stage`.
    pub fn trunk_macs(&self, stage: usize) -> u64 {
        self.edges
            .iter()
            .filter(|e| e.owner <= stage)
            .map(|e| self.edge_len(e) as u64)
            .sum()
    }

    /// Graph evaluating trunk groups owned by `..=max_stage` and the given heads.
    ///
    /// Input slot 0 holds the batch; label slot 0 the class indices.
    pub fn build_graph(&self, max_stage: usize, heads: &[usize], losses: bool) -> Result<BuiltGraph> {
        let mut b = GraphBuilder::new(self.param_len);
        let mut act: Vec<Option<NodeId>> = vec![None; self.groups.len()];
        act[0] = Some(b.input(0));

        let mut incoming: Vec<Vec<&Edge>> = vec![Vec::new(); self.groups.len()];
        for e in &self.edges {
            incoming[e.dst].push(e);
        }
        for (g, group) in self.groups.iter().enumerate().skip(1) {
            if group.owner > max_stage {
                continue;
            }
            let mut terms = Vec::with_capacity(incoming[g].len());
            for e in &incoming[g] {
                let src = act[e.src].expect("sources precede targets");
                let w = b.param(e.offset, self.groups[e.src].size(), group.size())?;
                terms.push(b.matmul(src, w)?);
            }
            let pre = b.sum(terms)?;
            let bias = b.param(self.biases[g].expect("hidden group bias"), 1, group.size())?;
            let pre = b.add_bias(pre, bias)?;
            act[g] = Some(b.relu(pre)?);
        }

        let mut logits = Vec::new();
        let mut loss_nodes = Vec::new();
        for &stage in heads {
            let head = self.head(stage);
            let mut terms = Vec::with_capacity(head.inputs.len());
            for &(g, off) in &head.inputs {
                let src = act[g].expect("head reads evaluated units");
                let w = b.param(off, self.groups[g].size(), head.classes)?;
                terms.push(b.matmul(src, w)?);
            }
            let out = b.sum(terms)?;
            let bias = b.param(head.bias_offset, 1, head.classes)?;
            let out = b.add_bias(out, bias)?;
            logits.push((stage, out));
            if losses {
                loss_nodes.push((stage, b.softmax_xent(out, 0)?));
            }
        }
        Ok(BuiltGraph { graph: b.finish(), logits, losses: loss_nodes })
    }

    /// Stand-alone copy of `stage`: groups and edges it sees plus its head,
    /// compacted into a fresh parameter layout. Returns the wiring and, for
    /// each new slot, the slot it was copied from.
    pub fn extract(&self, stage: usize) -> (Wiring, Vec<usize>) {
        let mut remap = vec![usize::MAX; self.groups.len()];
        let mut groups = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            if group.owner <= stage {
                remap[g] = groups.len();
                groups.push(UnitGroup { owner: 1, ..group.clone() });
            }
        }
        let mut source = Vec::new();
        fn take(source: &mut Vec<usize>, start: usize, len: usize) -> usize {
            let off = source.len();
            source.extend(start..start + len);
            off
        }

        let mut incoming: Vec<Vec<&Edge>> = vec![Vec::new(); self.groups.len()];
        for e in &self.edges {
            incoming[e.dst].push(e);
        }
        let mut edges = Vec::new();
        let mut biases = vec![None; groups.len()];
        for (g, group) in self.groups.iter().enumerate().skip(1) {
            if group.owner > stage {
                continue;
            }
            for e in &incoming[g] {
                let offset = take(&mut source, e.offset, self.edge_len(e));
                edges.push(Edge { src: remap[e.src], dst: remap[e.dst], offset, owner: 1 });
            }
            biases[remap[g]] =
                Some(take(&mut source, self.biases[g].expect("hidden bias"), group.size()));
        }
        let trunk_len = source.len();

        let old = self.head(stage);
        let inputs = old
            .inputs
            .iter()
            .map(|&(g, off)| (remap[g], take(&mut source, off, self.groups[g].size() * old.classes)))
            .collect();
        let bias_offset = take(&mut source, old.bias_offset, old.classes);
        let head = Head { stage: 1, layer: old.layer, inputs, bias_offset, classes: old.classes };

        let wiring = Wiring {
            num_stages: 1,
            groups,
            edges,
            biases,
            heads: vec![head],
            trunk_len,
            param_len: source.len(),
        };
        (wiring, source)
    }
}

/// Layers feeding `layer`: the previous one, or every power-of-2 offset back
/// to the input when skips are enabled. Ascending order.
pub(crate) fn source_layers(layer: usize, skips: bool) -> Vec<usize> {
    if !skips {
        return vec![layer - 1];
    }
    let mut out = Vec::new();
    let mut step = 1;
    while step <= layer {
        out.push(layer - step);
        step <<= 1;
    }
    out.reverse();
    out
}
