//! Replay training steps (ER, DER++, ER-ACE, optionally with learned soft
//! labels) and the alternative label generators used for ablations.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::BufferBatch;
use crate::error::{Error, Result};
use crate::meta::{unrolled_label_gradient, InnerBatch, OuterBatch};
use crate::models::{Classifier, SoftLabelBatch};
use crate::tensor_core::{Bindings, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    Er,
    DerPP,
    ErAce,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Er => "er",
            StrategyKind::DerPP => "derpp",
            StrategyKind::ErAce => "erace",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "er" => Some(StrategyKind::Er),
            "derpp" => Some(StrategyKind::DerPP),
            "erace" => Some(StrategyKind::ErAce),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Ablation {
    Random,
    LabelSmooth(f64),
    L2y,
}

/// Where replay targets come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelSource {
    OneHot,
    Ddn,
    Random,
    LabelSmooth(f64),
    L2y,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub use_ddn: bool,
    /// Weight of the replay cross-entropy.
    pub alpha: f64,
    /// Weight of the DER++ logit regression term.
    pub derpp_logit_weight: f64,
    pub ablation: Option<Ablation>,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            use_ddn: false,
            alpha: 1.0,
            derpp_logit_weight: 0.5,
            ablation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("strategy.alpha", "must be non-negative"));
        }
        if !(self.derpp_logit_weight >= 0.0 && self.derpp_logit_weight.is_finite()) {
            return Err(Error::config("strategy.derpp_logit_weight", "must be non-negative"));
        }
        if let Some(Ablation::LabelSmooth(eps)) = self.ablation {
            if !(0.0..1.0).contains(&eps) {
                return Err(Error::config("strategy.label_smooth_eps", "must lie in [0, 1)"));
            }
        }
        if self.use_ddn && self.ablation.is_some() {
            return Err(Error::config("strategy.ablation", "cannot be combined with strategy.use_ddn"));
        }
        Ok(())
    }

    pub fn label_source(&self) -> LabelSource {
        match (self.use_ddn, self.ablation) {
            (true, _) => LabelSource::Ddn,
            (false, None) => LabelSource::OneHot,
            (false, Some(Ablation::Random)) => LabelSource::Random,
            (false, Some(Ablation::LabelSmooth(e))) => LabelSource::LabelSmooth(e),
            (false, Some(Ablation::L2y)) => LabelSource::L2y,
        }
    }

    /// Short name such as `er`, `er+ddn`, `derpp+ls0.1`.
    pub fn label(&self) -> String {
        let base = self.kind.name();
        match self.label_source() {
            LabelSource::OneHot => base.to_string(),
            LabelSource::Ddn => format!("{base}+ddn"),
            LabelSource::Random => format!("{base}+random"),
            LabelSource::LabelSmooth(e) => format!("{base}+ls{e}"),
            LabelSource::L2y => format!("{base}+l2y"),
        }
    }
}

/// Loss terms of one classifier step. `replay` and `logit` are unweighted;
/// `total = new + α·replay + w·logit`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub new: f64,
    pub replay: f64,
    pub logit: f64,
    pub total: f64,
}

/// Replay half of a classifier step.
#[derive(Clone, Copy, Debug)]
pub struct Replay<'a> {
    pub batch: &'a BufferBatch,
    /// Required whenever the strategy's labels are not one-hot.
    pub soft_labels: Option<&'a SoftLabelBatch>,
}

/// One SGD step on `CE(new) + α·CE(replay) [+ w·MSE(replay logits, stored)]`.
///
/// `masked_classes` are blanked out of the new-sample logits for ER-ACE and
/// ignored otherwise. Returns the losses at the pre-step parameters.
pub fn classifier_step(
    cfg: &StrategyConfig,
    classifier: &mut Classifier,
    lr: f64,
    new_x: &Tensor,
    new_y: &Tensor,
    replay: Option<Replay<'_>>,
    masked_classes: &[usize],
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let xn = g.input("x_new");
    let yn = g.input("y_new");
    let nodes = classifier.nodes(&mut g, 0);
    let mut zn = nodes.logits(&mut g, xn);
    if cfg.kind == StrategyKind::ErAce && !masked_classes.is_empty() {
        zn = g.mask_columns(zn, masked_classes.to_vec());
    }
    let new_loss = g.softmax_cross_entropy(zn, yn);
    let mut total = new_loss;

    let use_logits = cfg.kind == StrategyKind::DerPP && cfg.derpp_logit_weight != 0.0;
    let mut replay_nodes = None;
    let mut logit_node = None;
    let mut bound: Vec<(crate::tensor_core::NodeId, &Tensor)> = Vec::new();
    if let Some(r) = replay {
        let targets = match cfg.label_source() {
            LabelSource::OneHot => &r.batch.y_onehot,
            _ => {
                let soft = r.soft_labels.ok_or(Error::MissingSoftLabels)?;
                if soft.sources != r.batch.sources {
                    return Err(Error::shape("classifier_step", "soft labels describe different buffer items"));
                }
                &soft.labels
            }
        };
        if cfg.alpha != 0.0 || use_logits {
            let xb = g.input("x_buf");
            bound.push((xb, &r.batch.x));
            let zb = nodes.logits(&mut g, xb);
            if cfg.alpha != 0.0 {
                let tb = g.input("y_buf");
                bound.push((tb, targets));
                let ce = g.softmax_cross_entropy(zb, tb);
                let w = g.scale(ce, cfg.alpha);
                total = g.add(total, w);
                replay_nodes = Some(ce);
            }
            if use_logits {
                let stored = r
                    .batch
                    .stored_logits
                    .as_ref()
                    .ok_or(Error::MissingStoredLogits(r.batch.missing_logits.unwrap_or(0)))?;
                let sn = g.input("stored_logits");
                bound.push((sn, stored));
                let mse = g.mse(zb, sn);
                let w = g.scale(mse, cfg.derpp_logit_weight);
                total = g.add(total, w);
                logit_node = Some(mse);
            }
        }
    }

    let mut bindings = Bindings::new(&[&classifier.theta]).input(xn, new_x).input(yn, new_y);
    for (id, t) in bound {
        bindings = bindings.input(id, t);
    }
    g.forward(&bindings)?;
    let grad = g.backward(total, &Tensor::scalar(1.0))?.params.remove(0);
    let losses = StepLosses {
        new: g.value(new_loss)?.item(),
        replay: match replay_nodes {
            Some(n) => g.value(n)?.item(),
            None => 0.0,
        },
        logit: match logit_node {
            Some(n) => g.value(n)?.item(),
            None => 0.0,
        },
        total: g.value(total)?.item(),
    };
    classifier.theta.axpy(-lr, &grad);
    Ok(losses)
}

/// `y + u` with `u ~ U[0,1)^C`, renormalized per row.
pub fn random_soft_labels<R: Rng + ?Sized>(y_onehot: &Tensor, sources: Vec<u64>, rng: &mut R) -> SoftLabelBatch {
    let mut labels = y_onehot.clone();
    for i in 0..labels.rows() {
        let row = labels.row_mut(i);
        for v in row.iter_mut() {
            *v += rng.random::<f64>();
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    SoftLabelBatch { labels, sources }
}

/// `(1 − eps)·y + eps/C`.
pub fn label_smooth(y_onehot: &Tensor, eps: f64, sources: Vec<u64>) -> Result<SoftLabelBatch> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config("strategy.label_smooth_eps", "must lie in [0, 1)"));
    }
    let c = y_onehot.cols() as f64;
    let labels = y_onehot.map(|v| (1.0 - eps) * v + eps / c);
    Ok(SoftLabelBatch { labels, sources })
}

/// Clamps negatives to zero and rescales to unit sum; an all-zero row
/// becomes uniform.
pub fn project_to_simplex(row: &mut [f64]) {
    row.iter_mut().for_each(|v| *v = v.max(0.0));
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|v| *v /= s);
    } else {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
    }
}

/// Free per-item label vectors optimized directly by the unrolled objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct L2yState {
    labels: BTreeMap<u64, Vec<f64>>,
}

/// Diagnostics of one direct label update.
#[derive(Clone, Debug, PartialEq)]
pub struct L2yStepResult {
    pub grad_norm: f64,
    pub inner_loss: f64,
    pub outer_loss_before: f64,
    pub outer_loss_after: f64,
    pub gm_objective: f64,
}

impl L2yState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, source: u64) -> Option<&[f64]> {
        self.labels.get(&source).map(Vec::as_slice)
    }

    /// Starts an item at its one-hot label unless it already has an entry.
    pub fn ensure(&mut self, source: u64, y_onehot: &[f64]) {
        self.labels.entry(source).or_insert_with(|| y_onehot.to_vec());
    }

    /// Drops entries for items no longer in the buffer.
    pub fn retain(&mut self, live: &[u64]) {
        let keep: std::collections::BTreeSet<u64> = live.iter().copied().collect();
        self.labels.retain(|k, _| keep.contains(k));
    }

    pub fn batch(&self, sources: &[u64]) -> Result<SoftLabelBatch> {
        let rows: Vec<&[f64]> = sources
            .iter()
            .map(|s| self.get(*s).ok_or(Error::MissingLabelEntry(*s)))
            .collect::<Result<_>>()?;
        Ok(SoftLabelBatch {
            labels: Tensor::from_rows(&rows)?,
            sources: sources.to_vec(),
        })
    }

    /// Gradient step of size `gamma` on the labels of `inner`'s items, then
    /// projection back to the simplex. Rows for a repeated item accumulate.
    pub fn apply_gradient(&mut self, sources: &[u64], grad: &Tensor, gamma: f64) -> Result<()> {
        let mut acc: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (i, s) in sources.iter().enumerate() {
            if !self.labels.contains_key(s) {
                return Err(Error::MissingLabelEntry(*s));
            }
            let e = acc.entry(*s).or_insert_with(|| vec![0.0; grad.cols()]);
            for (a, g) in e.iter_mut().zip(grad.row(i)) {
                *a += g;
            }
        }
        for (s, g) in acc {
            let row = self.labels.get_mut(&s).unwrap();
            for (v, d) in row.iter_mut().zip(&g) {
                *v -= gamma * d;
            }
            project_to_simplex(row);
        }
        Ok(())
    }
}

/// One direct label update through the unrolled step.
pub fn l2y_step(
    state: &mut L2yState,
    classifier: &Classifier,
    inner: &BufferBatch,
    outer: OuterBatch<'_>,
    eta: f64,
    alpha: f64,
    gamma: f64,
) -> Result<L2yStepResult> {
    let soft = state.batch(&inner.sources)?;
    let lg = unrolled_label_gradient(
        classifier,
        InnerBatch {
            x: &inner.x,
            hard: &inner.y_onehot,
            soft: &soft.labels,
        },
        outer,
        eta,
        alpha,
    )?;
    state.apply_gradient(&inner.sources, &lg.grad_labels, gamma)?;
    Ok(L2yStepResult {
        grad_norm: crate::tensor_core::norm(lg.grad_labels.data()),
        inner_loss: lg.inner_loss,
        outer_loss_before: lg.outer_loss_before,
        outer_loss_after: lg.outer_loss_after,
        gm_objective: lg.gm_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::one_hot;

    #[test]
    fn validation() {
        let mut c = StrategyConfig::new(StrategyKind::Er);
        c.use_ddn = true;
        c.ablation = Some(Ablation::Random);
        assert!(c.validate().is_err());
        let mut c = StrategyConfig::new(StrategyKind::Er);
        c.ablation = Some(Ablation::LabelSmooth(1.0));
        assert!(c.validate().is_err());
        c.alpha = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn labels() {
        let mut c = StrategyConfig::new(StrategyKind::DerPP);
        assert_eq!(c.label(), "derpp");
        c.use_ddn = true;
        assert_eq!(c.label(), "derpp+ddn");
    }

    #[test]
    fn label_smoothing_values() {
        let y = one_hot(&[3], 10);
        let s = label_smooth(&y, 0.1, vec![0]).unwrap();
        assert!((s.labels.get(0, 3) - 0.91).abs() < 1e-15);
        assert!((s.labels.get(0, 0) - 0.01).abs() < 1e-15);
        assert_eq!(label_smooth(&y, 0.0, vec![0]).unwrap().labels, y);
        assert!(label_smooth(&y, 1.0, vec![]).is_err());
    }

    #[test]
    fn projection() {
        let mut r = vec![0.5, -0.2, 0.7];
        project_to_simplex(&mut r);
        assert_eq!(r, vec![0.5 / 1.2, 0.0, 0.7 / 1.2]);
        let mut r = vec![-1.0, -1.0];
        project_to_simplex(&mut r);
        assert_eq!(r, vec![0.5, 0.5]);
    }

    #[test]
    fn l2y_missing_entry() {
        let st = L2yState::new();
        assert!(matches!(st.batch(&[4]), Err(Error::MissingLabelEntry(4))));
    }
}
