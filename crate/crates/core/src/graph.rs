//! Static computation graphs over a flat parameter vector.
//!
//! A [`Graph`] is an ordered op list; node ids are topological by
//! construction. Parameters live outside the graph in one flat `&[f64]`, each
//! [`Op::Param`] node owning a disjoint slice of it. Gradients come back in
//! the same flat layout, so slots a loss never reaches stay exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_xent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    /// Fed tensor `inputs[slot]`.
    Input(usize),
    /// `rows×cols` matrix stored at `params[offset..offset + rows*cols]`.
    Param { offset: usize, rows: usize, cols: usize },
    MatMul(NodeId, NodeId),
    /// `x[b×n] + bias[1×n]`, bias broadcast over rows.
    AddBias(NodeId, NodeId),
    /// Elementwise sum of same-shape operands, accumulated left to right.
    Sum(Vec<NodeId>),
    Relu(NodeId),
    /// Mean softmax cross-entropy against fed `labels[slot]`.
    SoftmaxXent { logits: NodeId, labels: usize },
    /// Sum of every element, as a scalar.
    SumAll(NodeId),
    /// `mean_b ½‖pred_b − target_b‖²` against fed `inputs[target]`.
    HalfSquaredError { pred: NodeId, target: usize },
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param { .. } => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Sum(xs) => xs.clone(),
            Op::Relu(x) | Op::SumAll(x) => vec![*x],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::HalfSquaredError { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    ops: Vec<Op>,
    param_len: usize,
}

/// Incremental graph construction; validates operands and parameter ownership.
#[derive(Debug)]
pub struct GraphBuilder {
    ops: Vec<Op>,
    param_len: usize,
    owned: Vec<bool>,
}

impl GraphBuilder {
    pub fn new(param_len: usize) -> Self {
        GraphBuilder { ops: Vec::new(), param_len, owned: vec![false; param_len] }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        if let Some(bad) = op.operands().into_iter().find(|id| id.0 >= self.ops.len()) {
            return Err(Error::Input(format!("operand {} does not exist yet", bad.0)));
        }
        self.ops.push(op);
        Ok(NodeId(self.ops.len() - 1))
    }

    pub fn input(&mut self, slot: usize) -> NodeId {
        self.ops.push(Op::Input(slot));
        NodeId(self.ops.len() - 1)
    }

    /// Claims `params[offset..offset + rows*cols]`. Each slot may be claimed once.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Result<NodeId> {
        let end = offset + rows * cols;
        if rows == 0 || cols == 0 || end > self.param_len {
            return Err(Error::Input(format!(
                "parameter block {offset}..{end} outside 0..{}",
                self.param_len
            )));
        }
        if self.owned[offset..end].iter().any(|&o| o) {
            return Err(Error::Input(format!("parameter block {offset}..{end} already owned")));
        }
        self.owned[offset..end].iter_mut().for_each(|o| *o = true);
        self.push(Op::Param { offset, rows, cols })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(x, bias))
    }

    pub fn sum(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Input("empty sum".into()));
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::Sum(xs))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn softmax_xent(&mut self, logits: NodeId, labels: usize) -> Result<NodeId> {
        self.push(Op::SoftmaxXent { logits, labels })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(x))
    }

    pub fn half_squared_error(&mut self, pred: NodeId, target: usize) -> Result<NodeId> {
        self.push(Op::HalfSquaredError { pred, target })
    }

    pub fn finish(self) -> Graph {
        Graph { ops: self.ops, param_len: self.param_len }
    }
}

/// Values fed into [`Op::Input`] and label slots for one evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Feeds<'a> {
    pub inputs: &'a [&'a Tensor],
    pub labels: &'a [&'a [usize]],
}

impl<'a> Feeds<'a> {
    pub fn new(inputs: &'a [&'a Tensor], labels: &'a [&'a [usize]]) -> Self {
        Feeds { inputs, labels }
    }
}

/// Node values from one forward evaluation.
///
/// Nodes whose feeds were not supplied (e.g. a loss evaluated without labels)
/// stay `None`.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Option<Tensor>>,
    loss_grads: Vec<Option<Tensor>>,
}

impl Trace {
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.value(id).map(|t| t.data()[0])
    }

    /// Smallest |pre-activation| seen by any relu; distance to the nearest kink.
    pub fn min_relu_margin(&self, graph: &Graph) -> f64 {
        graph
            .ops
            .iter()
            .filter_map(|op| match op {
                Op::Relu(x) => self.value(*x),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Exact reverse-mode gradient of `loss` over the whole parameter vector.
    pub fn backward(&self, graph: &Graph, loss: NodeId) -> Result<Vec<f64>> {
        self.backward_weighted(graph, &[(loss, 1.0)])
    }

    /// Gradient of `Σ weight·loss` in a single reverse sweep.
    pub fn backward_weighted(&self, graph: &Graph, seeds: &[(NodeId, f64)]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; graph.param_len];
        self.backward_into(graph, seeds, &mut grad)?;
        Ok(grad)
    }

    pub fn backward_into(
        &self,
        graph: &Graph,
        seeds: &[(NodeId, f64)],
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != graph.param_len {
            return Err(Error::Dimension(format!(
                "gradient buffer {} for {} parameters",
                grad.len(),
                graph.param_len
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; graph.ops.len()];
        let mut top = 0;
        for &(id, w) in seeds {
            let value = self.value(id).ok_or_else(|| {
                Error::State(format!("backward from node {} before it was evaluated", id.0))
            })?;
            if value.len() != 1 {
                return Err(Error::Input(format!("node {} is not a scalar", id.0)));
            }
            accumulate(&mut adj[id.0], &[w]);
            top = top.max(id.0 + 1);
        }

        for idx in (0..top).rev() {
            let Some(g) = adj[idx].take() else { continue };
            match &graph.ops[idx] {
                Op::Input(_) => {}
                Op::Param { offset, .. } => {
                    for (dst, v) in grad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *dst += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.values[a.0].as_ref().expect("operand evaluated");
                    let bv = self.values[b.0].as_ref().expect("operand evaluated");
                    let (m, k) = av.dims2()?;
                    let (_, n) = bv.dims2()?;
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(&g, bv.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(av.data(), &g, &mut gb, m, k, n);
                    accumulate(&mut adj[a.0], &ga);
                    accumulate(&mut adj[b.0], &gb);
                }
                Op::AddBias(x, b) => {
                    let n = self.values[b.0].as_ref().expect("operand evaluated").len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (dst, v) in gb.iter_mut().zip(row) {
                            *dst += v;
                        }
                    }
                    accumulate(&mut adj[x.0], &g);
                    accumulate(&mut adj[b.0], &gb);
                }
                Op::Sum(xs) => {
                    for x in xs {
                        accumulate(&mut adj[x.0], &g);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.values[x.0].as_ref().expect("operand evaluated");
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[x.0], &gx);
                }
                Op::SoftmaxXent { logits, .. } => {
                    let dl = self.loss_grads[idx].as_ref().expect("loss evaluated");
                    let gx: Vec<f64> = dl.data().iter().map(|v| v * g[0]).collect();
                    accumulate(&mut adj[logits.0], &gx);
                }
                Op::SumAll(x) => {
                    let n = self.values[x.0].as_ref().expect("operand evaluated").len();
                    accumulate(&mut adj[x.0], &vec![g[0]; n]);
                }
                Op::HalfSquaredError { pred, .. } => {
                    let resid = self.loss_grads[idx].as_ref().expect("loss evaluated");
                    let gx: Vec<f64> = resid.data().iter().map(|v| v * g[0]).collect();
                    accumulate(&mut adj[pred.0], &gx);
                }
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

impl Graph {
    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Parameter slots claimed by some node.
    pub fn owned_params(&self) -> Vec<bool> {
        let mut owned = vec![false; self.param_len];
        for op in &self.ops {
            if let Op::Param { offset, rows, cols } = op {
                owned[*offset..offset + rows * cols].iter_mut().for_each(|o| *o = true);
            }
        }
        owned
    }

    /// Evaluates every node whose inputs are available.
    pub fn forward(&self, params: &[f64], feeds: Feeds<'_>) -> Result<Trace> {
        if params.len() != self.param_len {
            return Err(Error::Dimension(format!(
                "{} parameters for a graph over {}",
                params.len(),
                self.param_len
            )));
        }
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.ops.len());
        let mut loss_grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        for (idx, op) in self.ops.iter().enumerate() {
            let get = |id: &NodeId| values[id.0].as_ref();
            let value = match op {
                Op::Input(slot) => feeds.inputs.get(*slot).map(|t| (*t).clone()),
                Op::Param { offset, rows, cols } => Some(Tensor::new(
                    vec![*rows, *cols],
                    params[*offset..offset + rows * cols].to_vec(),
                )?),
                Op::MatMul(a, b) => match (get(a), get(b)) {
                    (Some(av), Some(bv)) => {
                        let (m, k) = av.dims2()?;
                        let (k2, n) = bv.dims2()?;
                        if k != k2 {
                            return Err(Error::Dimension(format!(
                                "node {idx}: matmul {m}x{k} by {k2}x{n}"
                            )));
                        }
                        let mut out = vec![0.0; m * n];
                        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
                        Some(Tensor::new(vec![m, n], out)?)
                    }
                    _ => None,
                },
                Op::AddBias(x, b) => match (get(x), get(b)) {
                    (Some(xv), Some(bv)) => {
                        let (_, n) = xv.dims2()?;
                        if bv.len() != n {
                            return Err(Error::Dimension(format!(
                                "node {idx}: bias of {} for {n} columns",
                                bv.len()
                            )));
                        }
                        let mut out = xv.clone();
                        for row in out.data_mut().chunks_mut(n) {
                            for (o, &bj) in row.iter_mut().zip(bv.data()) {
                                *o += bj;
                            }
                        }
                        Some(out)
                    }
                    _ => None,
                },
                Op::Sum(xs) => {
                    let operands: Option<Vec<&Tensor>> = xs.iter().map(get).collect();
                    match operands {
                        Some(ts) => {
                            let mut out = ts[0].clone();
                            for t in &ts[1..] {
                                if t.shape() != out.shape() {
                                    return Err(Error::Dimension(format!(
                                        "node {idx}: sum of {:?} and {:?}",
                                        out.shape(),
                                        t.shape()
                                    )));
                                }
                                for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
                                    *o += v;
                                }
                            }
                            Some(out)
                        }
                        None => None,
                    }
                }
                Op::Relu(x) => get(x).map(crate::tensor::relu),
                Op::SoftmaxXent { logits, labels } => {
                    match (get(logits), feeds.labels.get(*labels)) {
                        (Some(lv), Some(ls)) => {
                            let (loss, grad) = softmax_xent(lv, ls)?;
                            loss_grads[idx] = Some(grad);
                            Some(Tensor::scalar(loss))
                        }
                        _ => None,
                    }
                }
                Op::SumAll(x) => get(x).map(|t| Tensor::scalar(t.data().iter().sum())),
                Op::HalfSquaredError { pred, target } => {
                    match (get(pred), feeds.inputs.get(*target)) {
                        (Some(pv), Some(tv)) => {
                            if pv.shape() != tv.shape() {
                                return Err(Error::Dimension(format!(
                                    "node {idx}: prediction {:?} vs target {:?}",
                                    pv.shape(),
                                    tv.shape()
                                )));
                            }
                            let batch = pv.shape()[0] as f64;
                            let resid: Vec<f64> =
                                pv.data().iter().zip(tv.data()).map(|(p, t)| p - t).collect();
                            let loss = 0.5 * resid.iter().map(|r| r * r).sum::<f64>() / batch;
                            let scaled = resid.iter().map(|r| r / batch).collect();
                            loss_grads[idx] = Some(Tensor::new(pv.shape().to_vec(), scaled)?);
                            Some(Tensor::scalar(loss))
                        }
                        _ => None,
                    }
                }
            };
            if let Some(v) = &value {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("node {idx} ({op:?})")));
                }
            }
            values.push(value);
        }
        Ok(Trace { values, loss_grads })
    }
}

/// Central-difference check of `loss`'s gradient over every parameter.
///
/// Returns `max_j |g_fd − g_bp| / max(1e-12, |g_fd| + |g_bp|)`.
pub fn finite_diff_check(
    graph: &Graph,
    params: &[f64],
    feeds: Feeds<'_>,
    loss: NodeId,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Input(format!("finite-difference step {eps} must be positive")));
    }
    let analytic = graph.forward(params, feeds)?.backward(graph, loss)?;
    finite_diff_against(graph, params, feeds, loss, eps, &analytic)
}

/// Same comparison as [`finite_diff_check`], against a caller-supplied gradient.
pub fn finite_diff_against(
    graph: &Graph,
    params: &[f64],
    feeds: Feeds<'_>,
    loss: NodeId,
    eps: f64,
    analytic: &[f64],
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Input(format!("finite-difference step {eps} must be positive")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "gradient over {} coordinates for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let eval = |p: &[f64]| -> Result<f64> {
        graph
            .forward(p, feeds)?
            .scalar(loss)
            .ok_or_else(|| Error::State("loss not evaluated".into()))
    };
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for j in 0..params.len() {
        probe[j] = params[j] + eps;
        let up = eval(&probe)?;
        probe[j] = params[j] - eps;
        let down = eval(&probe)?;
        probe[j] = params[j];
        let numeric = (up - down) / (2.0 * eps);
        let denom = (numeric.abs() + analytic[j].abs()).max(1e-12);
        worst = worst.max((numeric - analytic[j]).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut b = GraphBuilder::new(6);
        let w = b.param(0, 2, 3).unwrap();
        let loss = b.sum_all(w).unwrap();
        let g = b.finish();
        let params = [0.3, -1.0, 2.0, 5.0, 0.0, -7.5];
        let grad = g.forward(&params, Feeds::default()).unwrap().backward(&g, loss).unwrap();
        assert_eq!(grad, vec![1.0; 6]);
    }

    #[test]
    fn affine_quadratic_matches_closed_form() {
        // loss = mean_b ½‖x_b W + c − y_b‖²; ∂W = Xᵀ R / B, ∂c = Σ_b R_b / B
        let mut b = GraphBuilder::new(8);
        let x = b.input(0);
        let w = b.param(0, 3, 2).unwrap();
        let c = b.param(6, 1, 2).unwrap();
        let xw = b.matmul(x, w).unwrap();
        let pred = b.add_bias(xw, c).unwrap();
        let loss = b.half_squared_error(pred, 1).unwrap();
        let g = b.finish();

        let params = [0.5, -0.25, 1.0, 2.0, -1.5, 0.75, 0.1, -0.2];
        let xs = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let ys = Tensor::new(vec![2, 2], vec![1.0, 0.0, -2.0, 4.0]).unwrap();
        let inputs = [&xs, &ys];
        let grad = g
            .forward(&params, Feeds::new(&inputs, &[]))
            .unwrap()
            .backward(&g, loss)
            .unwrap();

        let mut resid = [[0.0; 2]; 2];
        for bi in 0..2 {
            for o in 0..2 {
                let mut p = params[6 + o];
                for i in 0..3 {
                    p += xs.data()[bi * 3 + i] * params[i * 2 + o];
                }
                resid[bi][o] = p - ys.data()[bi * 2 + o];
            }
        }
        for i in 0..3 {
            for o in 0..2 {
                let want = (xs.data()[i] * resid[0][o] + xs.data()[3 + i] * resid[1][o]) / 2.0;
                assert!((grad[i * 2 + o] - want).abs() < 1e-14);
            }
        }
        for o in 0..2 {
            assert!((grad[6 + o] - (resid[0][o] + resid[1][o]) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut b = GraphBuilder::new(4);
        let used = b.param(0, 1, 2).unwrap();
        let _unused = b.param(2, 1, 2).unwrap();
        let loss = b.sum_all(used).unwrap();
        let g = b.finish();
        let grad = g
            .forward(&[1.0, 2.0, 3.0, 4.0], Feeds::default())
            .unwrap()
            .backward(&g, loss)
            .unwrap();
        assert_eq!(grad, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut b = GraphBuilder::new(2);
        let x = b.input(0);
        let w = b.param(0, 2, 1).unwrap();
        let logits = b.matmul(x, w).unwrap();
        let loss = b.softmax_xent(logits, 0).unwrap();
        let g = b.finish();
        let xs = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        // No labels fed, so the loss node is never evaluated.
        let trace = g.forward(&[0.1, 0.2], Feeds::new(&[&xs], &[])).unwrap();
        assert!(matches!(trace.backward(&g, loss), Err(Error::State(_))));
    }

    #[test]
    fn double_ownership_rejected() {
        let mut b = GraphBuilder::new(4);
        b.param(0, 1, 3).unwrap();
        assert!(b.param(2, 1, 2).is_err());
        assert!(b.param(3, 1, 2).is_err());
    }

    #[test]
    fn constant_loss_has_zero_fd_error() {
        let mut b = GraphBuilder::new(3);
        let x = b.input(0);
        let _w = b.param(0, 1, 3).unwrap();
        let loss = b.sum_all(x).unwrap();
        let g = b.finish();
        let xs = Tensor::filled(&[2, 2], 1.5);
        let err =
            finite_diff_check(&g, &[1.0, 2.0, 3.0], Feeds::new(&[&xs], &[]), loss, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_model_fd_error() {
        let mut b = GraphBuilder::new(4);
        let x = b.input(0);
        let w = b.param(0, 3, 1).unwrap();
        let c = b.param(3, 1, 1).unwrap();
        let xw = b.matmul(x, w).unwrap();
        let pred = b.add_bias(xw, c).unwrap();
        let loss = b.half_squared_error(pred, 1).unwrap();
        let g = b.finish();
        let xs = Tensor::new(vec![4, 3], (0..12).map(|v| (v as f64 * 0.37).sin()).collect())
            .unwrap();
        let ys = Tensor::new(vec![4, 1], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let inputs = [&xs, &ys];
        let err = finite_diff_check(&g, &[0.3, -0.7, 1.1, 0.2], Feeds::new(&inputs, &[]), loss, 1e-5)
            .unwrap();
        assert!(err <= 1e-8, "linear model fd error {err}");
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut b = GraphBuilder::new(1);
        let w = b.param(0, 1, 1).unwrap();
        b.sum_all(w).unwrap();
        let g = b.finish();
        assert!(matches!(g.forward(&[f64::NAN], Feeds::default()), Err(Error::NonFinite(_))));
    }
}
