//! Define-then-run computation graph with reverse-mode gradients.
//!
//! A [`Graph`] is built once from placeholder inputs and parameter
//! segments, then evaluated by [`Graph::forward`] against a set of
//! [`Bindings`]. Nodes are appended in topological order, so both the
//! reverse sweep of [`Graph::backward`] and the forward tangent sweep of
//! [`Graph::jvp`] are single passes over the node list.
//!
//! [`Graph::mixed_partial_vjp`] covers the one second-order quantity the
//! meta-trainer needs: the derivative of `⟨∇_θ L, v⟩` with respect to the
//! soft targets of a cross-entropy loss. Because the cross-entropy logit
//! gradient `(p − t)/B` is linear in the target `t`, that derivative is a
//! forward-mode contraction of the logit map and needs no double backprop.

use crate::error::{Error, Result};
use crate::tensor_core::params::{ParameterSet, Segment};
use crate::tensor_core::tensor::{check_distribution_rows, log_softmax, Tensor};

/// Fill value for masked logits.
pub const MASK_FILL: f64 = -1e9;

/// Tolerance for the "target rows are distributions" precondition.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param { set: usize, segment: Segment },
    Const(Tensor),
    MatMul(NodeId, NodeId),
    /// `[n, m] + [m]`, bias broadcast over rows.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softmax(NodeId),
    /// Mean over rows of `-Σ_c t_c log softmax(z)_c`.
    SoftmaxCrossEntropy { logits: NodeId, targets: NodeId },
    /// Mean over all elements of `(a - b)²`.
    Mse(NodeId, NodeId),
    Mean(NodeId),
    MaskColumns { input: NodeId, columns: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param { .. } => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Mse(..) => "mse",
            Op::Mean(_) => "mean",
            Op::MaskColumns { .. } => "mask_columns",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param { .. } | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Softmax(a) | Op::Mean(a) => vec![*a],
            Op::SoftmaxCrossEntropy { logits, targets } => vec![*logits, *targets],
            Op::MaskColumns { input, .. } => vec![*input],
        }
    }
}

/// Values bound to a graph's inputs and parameter sets for one evaluation.
///
/// Parameter set `i` of the graph (as passed to [`Graph::param`]) reads
/// from the `i`-th entry of `params`.
pub struct Bindings<'a> {
    inputs: Vec<(NodeId, &'a Tensor)>,
    params: Vec<&'a ParameterSet>,
}

impl<'a> Bindings<'a> {
    pub fn new(params: &[&'a ParameterSet]) -> Self {
        Bindings {
            inputs: Vec::new(),
            params: params.to_vec(),
        }
    }

    pub fn input(mut self, id: NodeId, value: &'a Tensor) -> Self {
        self.inputs.push((id, value));
        self
    }
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// One flat gradient per bound parameter set, zero where untouched.
    pub params: Vec<Vec<f64>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of an arbitrary node, `None` when the output does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Option<Vec<Tensor>>,
    param_lens: Vec<usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for o in op.operands() {
            assert!(o.0 < self.ops.len(), "operand from another graph");
        }
        self.values = None;
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn param(&mut self, set: usize, segment: &Segment) -> NodeId {
        self.push(Op::Param {
            set,
            segment: segment.clone(),
        })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets })
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mse(a, b))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Replaces the listed columns of every row with [`MASK_FILL`].
    pub fn mask_columns(&mut self, input: NodeId, columns: Vec<usize>) -> NodeId {
        self.push(Op::MaskColumns { input, columns })
    }

    /// Evaluates every node, caching values for [`backward`](Self::backward) and [`jvp`](Self::jvp).
    pub fn forward(&mut self, bindings: &Bindings<'_>) -> Result<()> {
        self.values = None;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let v = eval_op(op, &values, bindings)?;
            if !v.all_finite() {
                return Err(Error::NonFinite {
                    op: op.name(),
                    node: idx,
                });
            }
            values.push(v);
        }
        self.param_lens = bindings.params.iter().map(|p| p.total_len()).collect();
        self.values = Some(values);
        Ok(())
    }

    /// Runs [`forward`](Self::forward) and returns a copy of `output`'s value.
    pub fn eval(&mut self, bindings: &Bindings<'_>, output: NodeId) -> Result<Tensor> {
        self.forward(bindings)?;
        Ok(self.value(output)?.clone())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values
            .as_ref()
            .map(|v| &v[id.0])
            .ok_or(Error::BackwardBeforeForward)
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        let values = self.values.as_ref().ok_or(Error::BackwardBeforeForward)?;
        if values[output.0].shape() != seed.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    values[output.0].shape()
                ),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        let mut params: Vec<Vec<f64>> = self.param_lens.iter().map(|&n| vec![0.0; n]).collect();
        adj[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let op = &self.ops[idx];
            match op {
                Op::Input(_) | Op::Const(_) => {}
                Op::Param { set, segment } => {
                    for (dst, src) in params[*set][segment.range()].iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(&values[b.0])?;
                    let gb = values[a.0].t_matmul(&g)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let mut gb = Tensor::zeros(values[b.0].shape().to_vec());
                    let m = g.cols();
                    for row in g.data().chunks(m) {
                        for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let ga = g.zip_with(&values[a.0], |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Softmax(a) => {
                    let p = &values[idx];
                    let mut ga = g.clone();
                    let c = p.cols();
                    for (grow, prow) in ga.data_mut().chunks_mut(c).zip(p.data().chunks(c)) {
                        let inner: f64 = grow.iter().zip(prow).map(|(x, y)| x * y).sum();
                        for (gv, pv) in grow.iter_mut().zip(prow) {
                            *gv = pv * (*gv - inner);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let s = g.item();
                    let z = &values[logits.0];
                    let t = &values[targets.0];
                    let b = z.rows() as f64;
                    let p = z.softmax_rows();
                    let gz = p.zip_with(t, |pv, tv| s * (pv - tv) / b)?;
                    let mut gt = Tensor::zeros(t.shape().to_vec());
                    let c = z.cols();
                    let mut ls = vec![0.0; c];
                    for i in 0..z.rows() {
                        log_softmax(z.row(i), &mut ls);
                        for (dst, l) in gt.row_mut(i).iter_mut().zip(&ls) {
                            *dst = -s * l / b;
                        }
                    }
                    accumulate(&mut adj, *logits, gz);
                    accumulate(&mut adj, *targets, gt);
                }
                Op::Mse(a, b) => {
                    let s = g.item();
                    let n = values[a.0].len() as f64;
                    let diff = values[a.0].sub(&values[b.0])?;
                    accumulate(&mut adj, *a, diff.scale(2.0 * s / n));
                    accumulate(&mut adj, *b, diff.scale(-2.0 * s / n));
                }
                Op::Mean(a) => {
                    let n = values[a.0].len() as f64;
                    let shape = values[a.0].shape().to_vec();
                    accumulate(&mut adj, *a, Tensor::full(shape, g.item() / n));
                }
                Op::MaskColumns { input, columns } => {
                    let mut ga = g.clone();
                    zero_columns(&mut ga, columns);
                    accumulate(&mut adj, *input, ga);
                }
            }
            adj[idx] = Some(g);
        }
        Ok(Gradients { params, nodes: adj })
    }

    /// Forward-mode tangent sweep: the directional derivative of every node
    /// when parameter set `i` moves along `tangents[i]` (`None` = held fixed).
    /// Entries of the result are `None` where the tangent is identically zero.
    pub fn jvp(&self, tangents: &[Option<&[f64]>]) -> Result<Vec<Option<Tensor>>> {
        let values = self.values.as_ref().ok_or(Error::BackwardBeforeForward)?;
        for (i, t) in tangents.iter().enumerate() {
            if let (Some(t), Some(&n)) = (t, self.param_lens.get(i)) {
                if t.len() != n {
                    return Err(Error::shape(
                        "jvp",
                        format!("tangent {i} has {} values, set has {n}", t.len()),
                    ));
                }
            }
        }
        let mut tan: Vec<Option<Tensor>> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let t = match op {
                Op::Input(_) | Op::Const(_) => None,
                Op::Param { set, segment } => match tangents.get(*set).copied().flatten() {
                    Some(v) => Some(Tensor::new(segment.shape.clone(), v[segment.range()].to_vec())?),
                    None => None,
                },
                Op::MatMul(a, b) => {
                    let mut out: Option<Tensor> = None;
                    if let Some(ta) = &tan[a.0] {
                        out = Some(ta.matmul(&values[b.0])?);
                    }
                    if let Some(tb) = &tan[b.0] {
                        let term = values[a.0].matmul(tb)?;
                        out = Some(match out {
                            Some(o) => o.add(&term)?,
                            None => term,
                        });
                    }
                    out
                }
                Op::AddBias(a, b) => {
                    let shape = values[idx].shape().to_vec();
                    match (&tan[a.0], &tan[b.0]) {
                        (None, None) => None,
                        (ta, tb) => {
                            let mut out = ta.clone().unwrap_or_else(|| Tensor::zeros(shape));
                            if let Some(tb) = tb {
                                let m = out.cols();
                                for row in out.data_mut().chunks_mut(m) {
                                    for (o, v) in row.iter_mut().zip(tb.data()) {
                                        *o += v;
                                    }
                                }
                            }
                            Some(out)
                        }
                    }
                }
                Op::Add(a, b) => match (&tan[a.0], &tan[b.0]) {
                    (None, None) => None,
                    (Some(ta), None) => Some(ta.clone()),
                    (None, Some(tb)) => Some(tb.clone()),
                    (Some(ta), Some(tb)) => Some(ta.add(tb)?),
                },
                Op::Scale(a, s) => tan[a.0].as_ref().map(|t| t.scale(*s)),
                Op::Relu(a) => match &tan[a.0] {
                    Some(ta) => Some(ta.zip_with(&values[a.0], |tv, x| if x > 0.0 { tv } else { 0.0 })?),
                    None => None,
                },
                Op::Softmax(a) => match &tan[a.0] {
                    Some(ta) => {
                        let p = &values[idx];
                        let c = p.cols();
                        let mut out = ta.clone();
                        for (trow, prow) in out.data_mut().chunks_mut(c).zip(p.data().chunks(c)) {
                            let inner: f64 = trow.iter().zip(prow).map(|(x, y)| x * y).sum();
                            for (tv, pv) in trow.iter_mut().zip(prow) {
                                *tv = pv * (*tv - inner);
                            }
                        }
                        Some(out)
                    }
                    None => None,
                },
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let (tz, tt) = (&tan[logits.0], &tan[targets.0]);
                    if tz.is_none() && tt.is_none() {
                        None
                    } else {
                        let z = &values[logits.0];
                        let t = &values[targets.0];
                        let b = z.rows() as f64;
                        let c = z.cols();
                        let mut acc = 0.0;
                        let mut ls = vec![0.0; c];
                        for i in 0..z.rows() {
                            log_softmax(z.row(i), &mut ls);
                            for j in 0..c {
                                let p = ls[j].exp();
                                if let Some(tz) = tz {
                                    acc += (p - t.get(i, j)) * tz.get(i, j);
                                }
                                if let Some(tt) = tt {
                                    acc -= ls[j] * tt.get(i, j);
                                }
                            }
                        }
                        Some(Tensor::scalar(acc / b))
                    }
                }
                Op::Mse(a, b) => match (&tan[a.0], &tan[b.0]) {
                    (None, None) => None,
                    (ta, tb) => {
                        let va = &values[a.0];
                        let vb = &values[b.0];
                        let n = va.len() as f64;
                        let mut acc = 0.0;
                        for k in 0..va.len() {
                            let d = va.data()[k] - vb.data()[k];
                            let dt = ta.as_ref().map_or(0.0, |t| t.data()[k])
                                - tb.as_ref().map_or(0.0, |t| t.data()[k]);
                            acc += 2.0 * d * dt;
                        }
                        Some(Tensor::scalar(acc / n))
                    }
                },
                Op::Mean(a) => tan[a.0]
                    .as_ref()
                    .map(|t| Tensor::scalar(t.sum() / t.len() as f64)),
                Op::MaskColumns { input, columns } => tan[input.0].as_ref().map(|t| {
                    let mut t = t.clone();
                    zero_columns(&mut t, columns);
                    t
                }),
            };
            tan.push(t);
        }
        Ok(tan)
    }

    /// Derivative with respect to the target node `labels` of
    /// `⟨∇_θ loss, theta_tangent⟩`, where θ is the parameter set(s) given a
    /// tangent.
    ///
    /// Supported when `labels` is a graph input consumed only as the target of
    /// softmax cross-entropy nodes, and those nodes reach `loss` only through
    /// `add`, `scale` and `mean`. Under those conditions the logit gradient of
    /// each cross-entropy term is `w·(p − t)/B` with a constant weight `w`, so
    /// entry `(i, c)` of the result is `−Σ_k (w_k / B_k)·⟨∂z_{i,c}/∂θ, v⟩`.
    pub fn mixed_partial_vjp(
        &self,
        loss: NodeId,
        labels: NodeId,
        theta_tangent: &[Option<&[f64]>],
    ) -> Result<Tensor> {
        let values = self.values.as_ref().ok_or(Error::BackwardBeforeForward)?;
        if !matches!(self.ops[labels.0], Op::Input(_) | Op::Const(_)) {
            return Err(Error::UnsupportedMixedPartial(
                "label node must be a graph input".into(),
            ));
        }

        let mut ce_nodes = Vec::new();
        for (idx, op) in self.ops.iter().enumerate() {
            if !op.operands().contains(&labels) {
                continue;
            }
            match op {
                Op::SoftmaxCrossEntropy { logits, targets } if *targets == labels && *logits != labels => {
                    ce_nodes.push(idx)
                }
                other => {
                    return Err(Error::UnsupportedMixedPartial(format!(
                        "labels consumed by `{}`",
                        other.name()
                    )))
                }
            }
        }

        // Every node between a cross-entropy term and the loss must be linear.
        let mut downstream = vec![false; self.ops.len()];
        for &k in &ce_nodes {
            downstream[k] = true;
        }
        let mut upstream = vec![false; self.ops.len()];
        upstream[loss.0] = true;
        for idx in (0..=loss.0).rev() {
            if upstream[idx] {
                for o in self.ops[idx].operands() {
                    upstream[o.0] = true;
                }
            }
        }
        for idx in 0..self.ops.len() {
            if !downstream[idx] && self.ops[idx].operands().iter().any(|o| downstream[o.0]) {
                downstream[idx] = true;
                if upstream[idx] && !matches!(self.ops[idx], Op::Add(..) | Op::Scale(..) | Op::Mean(_)) {
                    return Err(Error::UnsupportedMixedPartial(format!(
                        "cross-entropy reaches the loss through non-linear `{}`",
                        self.ops[idx].name()
                    )));
                }
            }
        }

        let loss_shape = values[loss.0].shape().to_vec();
        let adj = self.backward(loss, &Tensor::full(loss_shape, 1.0))?;
        let tangents = self.jvp(theta_tangent)?;

        let mut out = Tensor::zeros(values[labels.0].shape().to_vec());
        for &k in &ce_nodes {
            let Op::SoftmaxCrossEntropy { logits, .. } = &self.ops[k] else { unreachable!() };
            let Some(w) = adj.wrt(NodeId(k)).map(|t| t.item()) else { continue };
            let Some(tz) = &tangents[logits.0] else { continue };
            let b = values[logits.0].rows() as f64;
            for (o, t) in out.data_mut().iter_mut().zip(tz.data()) {
                *o -= w / b * t;
            }
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zero_columns(t: &mut Tensor, columns: &[usize]) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c) {
        for &j in columns {
            row[j] = 0.0;
        }
    }
}

fn eval_op(op: &Op, values: &[Tensor], bindings: &Bindings<'_>) -> Result<Tensor> {
    Ok(match op {
        Op::Input(name) => {
            let idx = NodeId(values.len());
            bindings
                .inputs
                .iter()
                .find(|(id, _)| *id == idx)
                .map(|(_, t)| (*t).clone())
                .ok_or_else(|| Error::UnboundInput(name.clone()))?
        }
        Op::Param { set, segment } => {
            let ps = bindings.params.get(*set).ok_or_else(|| Error::BadParameterBinding {
                index: *set,
                detail: "not bound".into(),
            })?;
            if ps.segment(&segment.name) != Some(segment) {
                return Err(Error::BadParameterBinding {
                    index: *set,
                    detail: format!("segment `{}` missing or reshaped", segment.name),
                });
            }
            ps.tensor(segment)
        }
        Op::Const(t) => t.clone(),
        Op::MatMul(a, b) => values[a.0].matmul(&values[b.0])?,
        Op::AddBias(a, b) => {
            let (x, bias) = (&values[a.0], &values[b.0]);
            if !x.is_matrix() || bias.len() != x.cols() {
                return Err(Error::shape(
                    "add_bias",
                    format!("{:?} + {:?}", x.shape(), bias.shape()),
                ));
            }
            let mut out = x.clone();
            let m = out.cols();
            for row in out.data_mut().chunks_mut(m) {
                for (o, v) in row.iter_mut().zip(bias.data()) {
                    *o += v;
                }
            }
            out
        }
        Op::Add(a, b) => values[a.0].add(&values[b.0])?,
        Op::Scale(a, s) => values[a.0].scale(*s),
        Op::Relu(a) => values[a.0].map(|v| v.max(0.0)),
        Op::Softmax(a) => {
            if !values[a.0].is_matrix() {
                return Err(Error::shape("softmax", "expects a matrix"));
            }
            values[a.0].softmax_rows()
        }
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let (z, t) = (&values[logits.0], &values[targets.0]);
            if !z.is_matrix() || z.shape() != t.shape() {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("logits {:?} vs targets {:?}", z.shape(), t.shape()),
                ));
            }
            check_distribution_rows(t, DISTRIBUTION_TOL)?;
            let c = z.cols();
            let mut ls = vec![0.0; c];
            let mut total = 0.0;
            for i in 0..z.rows() {
                log_softmax(z.row(i), &mut ls);
                total -= ls.iter().zip(t.row(i)).map(|(l, tv)| l * tv).sum::<f64>();
            }
            Tensor::scalar(total / z.rows() as f64)
        }
        Op::Mse(a, b) => {
            let diff = values[a.0].sub(&values[b.0])?;
            Tensor::scalar(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
        }
        Op::Mean(a) => Tensor::scalar(values[a.0].sum() / values[a.0].len() as f64),
        Op::MaskColumns { input, columns } => {
            let mut out = values[input.0].clone();
            let c = out.cols();
            if let Some(&bad) = columns.iter().find(|&&j| j >= c) {
                return Err(Error::shape("mask_columns", format!("column {bad} >= {c}")));
            }
            for row in out.data_mut().chunks_mut(c) {
                for &j in columns {
                    row[j] = MASK_FILL;
                }
            }
            out
        }
    })
}
