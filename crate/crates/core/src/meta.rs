//! Bi-level training of the soft-label network through a one-step unrolled
//! classifier update, plus the gradient-matching diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Classifier, Ddn};
use crate::tensor_core::{dot, Bindings, Graph, NodeId, ParameterSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Learning rate of the unrolled trial step.
    pub eta: f64,
    /// Learning rate of the DDN optimizer.
    pub gamma: f64,
    pub alpha: f64,
    pub inner_batch: usize,
    pub outer_batch: usize,
    /// DDN updates per classifier iteration.
    pub steps_per_iter: usize,
    pub optimizer: OptimizerKind,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            eta: 0.03,
            gamma: 0.001,
            alpha: 1.0,
            inner_batch: 32,
            outer_batch: 32,
            steps_per_iter: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("meta.eta", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("meta.gamma", "must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("strategy.alpha", "must be non-negative"));
        }
        if self.inner_batch == 0 {
            return Err(Error::config("meta.inner_batch", "must be at least 1"));
        }
        if self.outer_batch == 0 {
            return Err(Error::config("meta.outer_batch", "must be at least 1"));
        }
        Ok(())
    }
}

/// First-order optimizer over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || grad.len() != self.m.len() {
            return Err(Error::shape("optimizer", "gradient length mismatch"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: "optimizer",
                node: 0,
            });
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - self.beta1.powi(self.t as i32);
                let c2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Inner batch of the unrolled step: inputs, hard targets and soft targets.
#[derive(Clone, Copy, Debug)]
pub struct InnerBatch<'a> {
    pub x: &'a Tensor,
    pub hard: &'a Tensor,
    pub soft: &'a Tensor,
}

/// Validation batch evaluated at the trial parameters.
#[derive(Clone, Copy, Debug)]
pub struct OuterBatch<'a> {
    pub x: &'a Tensor,
    pub targets: &'a Tensor,
}

/// A trial SGD step `θ' = θ − η ∇_θ [CE(hard) + α·CE(soft)]`.
///
/// The graph is kept so that `θ'` can be differentiated with respect to the
/// soft targets afterwards.
pub struct InnerStep {
    graph: Graph,
    loss: NodeId,
    soft: Option<NodeId>,
    eta: f64,
    pub theta_prime: ParameterSet,
    pub inner_loss: f64,
    pub inner_grad: Vec<f64>,
}

impl InnerStep {
    /// `(∂θ'/∂ỹ)ᵀ v`, shaped like the soft targets. Zero when α = 0.
    pub fn label_vjp(&self, v: &[f64], label_shape: &[usize]) -> Result<Tensor> {
        match self.soft {
            None => Ok(Tensor::zeros(label_shape.to_vec())),
            Some(node) => Ok(self.graph.mixed_partial_vjp(self.loss, node, &[Some(v)])?.scale(-self.eta)),
        }
    }
}

/// Never touches `classifier.theta`.
pub fn inner_step(classifier: &Classifier, batch: InnerBatch<'_>, eta: f64, alpha: f64) -> Result<InnerStep> {
    if batch.x.rows() == 0 {
        return Err(Error::EmptyBuffer);
    }
    if batch.hard.shape() != batch.soft.shape() {
        return Err(Error::shape("inner_step", "hard and soft targets differ in shape"));
    }
    let mut g = Graph::new();
    let x = g.input("x_in");
    let hard = g.input("y_in");
    let z = classifier.nodes(&mut g, 0).logits(&mut g, x);
    let mut loss = g.softmax_cross_entropy(z, hard);
    let mut soft = None;
    if alpha != 0.0 {
        let s = g.input("soft_in");
        let ce = g.softmax_cross_entropy(z, s);
        let weighted = g.scale(ce, alpha);
        loss = g.add(loss, weighted);
        soft = Some(s);
    }
    let mut bindings = Bindings::new(&[&classifier.theta]).input(x, batch.x).input(hard, batch.hard);
    if let Some(s) = soft {
        bindings = bindings.input(s, batch.soft);
    }
    g.forward(&bindings)?;
    let inner_loss = g.value(loss)?.item();
    let inner_grad = g.backward(loss, &Tensor::scalar(1.0))?.params.remove(0);
    let mut theta_prime = classifier.theta.clone();
    theta_prime.axpy(-eta, &inner_grad);
    Ok(InnerStep {
        graph: g,
        loss,
        soft,
        eta,
        theta_prime,
        inner_loss,
        inner_grad,
    })
}

/// Gradient of the unrolled outer loss with respect to the soft targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGradient {
    pub grad_labels: Tensor,
    pub inner_loss: f64,
    pub outer_loss_before: f64,
    pub outer_loss_after: f64,
    pub gm_objective: f64,
}

pub fn unrolled_label_gradient(
    classifier: &Classifier,
    inner: InnerBatch<'_>,
    outer: OuterBatch<'_>,
    eta: f64,
    alpha: f64,
) -> Result<LabelGradient> {
    let step = inner_step(classifier, inner, eta, alpha)?;
    let (outer_loss_before, outer_grad_before) = classifier.loss_and_grad(&classifier.theta, outer.x, outer.targets)?;
    let (outer_loss_after, outer_grad_after) = classifier.loss_and_grad(&step.theta_prime, outer.x, outer.targets)?;
    let grad_labels = step.label_vjp(&outer_grad_after, inner.soft.shape())?;
    if !grad_labels.all_finite() {
        return Err(Error::NonFinite {
            op: "hypergradient",
            node: 0,
        });
    }
    Ok(LabelGradient {
        grad_labels,
        inner_loss: step.inner_loss,
        outer_loss_before,
        outer_loss_after,
        gm_objective: -dot(&step.inner_grad, &outer_grad_before),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypergradResult {
    pub grad_omega: Vec<f64>,
    pub inner_loss: f64,
    pub outer_loss_before: f64,
    pub outer_loss_after: f64,
    /// `−⟨∇_θ L_in(θ), ∇_θ L_out(θ)⟩`.
    pub gm_objective: f64,
}

/// `dL_out(θ'(ω))/dω` for inner inputs `x_in` with one-hot labels `y_in`.
pub fn hypergradient(
    classifier: &Classifier,
    ddn: &Ddn,
    x_in: &Tensor,
    y_in: &Tensor,
    outer: OuterBatch<'_>,
    cfg: &MetaConfig,
) -> Result<HypergradResult> {
    let probs = classifier.probabilities(x_in)?;
    let soft = ddn.soft_labels_from_probs(&probs, y_in, Vec::new())?;
    let inner = InnerBatch {
        x: x_in,
        hard: y_in,
        soft: &soft.labels,
    };
    let lg = unrolled_label_gradient(classifier, inner, outer, cfg.eta, cfg.alpha)?;
    let grad_omega = if cfg.alpha == 0.0 {
        vec![0.0; ddn.omega.total_len()]
    } else {
        ddn.soft_label_vjp(&probs, y_in, &lg.grad_labels)?
    };
    Ok(HypergradResult {
        grad_omega,
        inner_loss: lg.inner_loss,
        outer_loss_before: lg.outer_loss_before,
        outer_loss_after: lg.outer_loss_after,
        gm_objective: lg.gm_objective,
    })
}

/// Applies the optimizer to ω; the cached checkpoint is left alone.
pub fn outer_step(ddn: &mut Ddn, result: &HypergradResult, optimizer: &mut Optimizer) -> Result<()> {
    optimizer.step(ddn.omega.values_mut(), &result.grad_omega)
}

/// `−⟨∇_θ L(θ; labeled), ∇_θ L(θ; reference)⟩` at the live θ.
pub fn gradient_match_objective(
    classifier: &Classifier,
    labeled: OuterBatch<'_>,
    reference: OuterBatch<'_>,
) -> Result<f64> {
    let (_, a) = classifier.loss_and_grad(&classifier.theta, labeled.x, labeled.targets)?;
    let (_, b) = classifier.loss_and_grad(&classifier.theta, reference.x, reference.targets)?;
    Ok(-dot(&a, &b))
}
