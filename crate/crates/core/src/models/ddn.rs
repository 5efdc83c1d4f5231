//! The soft-label hypernetwork.
//!
//! The DDN maps a classifier's (gradient-stopped) predicted probabilities
//! for a buffer example to a distribution over classes. Labels are built as
//!
//! ```text
//! raw = (1 − β)·softmax(G_ω(p)) + β·softmax(G_old(p))
//! ỹ   = (raw + onehot) / 2
//! ```
//!
//! Both addends of the last line are distributions, so `ỹ` is one too and
//! always keeps at least half its mass on the true class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::classifier::Classifier;
use crate::models::mlp::Mlp;
use crate::tensor_core::{check_distribution_rows, Bindings, Graph, NodeId, ParameterSet, Tensor, DISTRIBUTION_TOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdnConfig {
    pub num_classes: usize,
    pub hidden_dims: Vec<usize>,
    pub beta: f64,
    pub init_seed: u64,
}

impl DdnConfig {
    pub fn new(num_classes: usize) -> Self {
        DdnConfig {
            num_classes,
            hidden_dims: vec![200, 200],
            beta: 0.9,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("ddn.num_classes", "must be at least 2"));
        }
        if self.hidden_dims.iter().any(|&h| h < 1) {
            return Err(Error::config("ddn.hidden", "layer widths must be at least 1"));
        }
        check_beta(self.beta)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config("ddn.beta", "must lie in [0, 1]"));
    }
    Ok(())
}

/// Soft labels for a batch of buffer items.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelBatch {
    pub labels: Tensor,
    /// Stream indices of the buffer items each row labels.
    pub sources: Vec<u64>,
}

/// The label-construction graph. Parameter set 0 is ω, set 1 is ω_old.
pub struct SoftLabelGraph {
    pub graph: Graph,
    pub probs: NodeId,
    pub onehot: NodeId,
    pub output: NodeId,
}

#[derive(Clone, Debug)]
pub struct Ddn {
    config: DdnConfig,
    mlp: Mlp,
    pub omega: ParameterSet,
    pub omega_old: ParameterSet,
}

impl Ddn {
    pub fn new(config: DdnConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        Self::with_rng(config, &mut rng)
    }

    /// Random ω; the cached checkpoint starts as a copy of it.
    pub fn with_rng<R: rand::Rng + ?Sized>(config: DdnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.num_classes];
        dims.extend(&config.hidden_dims);
        dims.push(config.num_classes);
        let mlp = Mlp::new(dims);
        let omega = mlp.init(rng);
        let omega_old = omega.clone();
        Ok(Ddn {
            config,
            mlp,
            omega,
            omega_old,
        })
    }

    pub fn config(&self) -> &DdnConfig {
        &self.config
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        check_beta(beta)?;
        self.config.beta = beta;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Replaces ω and ω_old, checking both match the network layout.
    pub fn set_parameters(&mut self, omega: ParameterSet, omega_old: ParameterSet) -> Result<()> {
        if !omega.same_layout(&self.omega) || !omega_old.same_layout(&self.omega) {
            return Err(Error::shape("ddn", "parameter layout differs"));
        }
        self.omega = omega;
        self.omega_old = omega_old;
        Ok(())
    }

    fn check_probs(&self, probs: &Tensor) -> Result<()> {
        if !probs.is_matrix() || probs.cols() != self.config.num_classes {
            return Err(Error::shape(
                "ddn",
                format!("probs {:?}, expected [B, {}]", probs.shape(), self.config.num_classes),
            ));
        }
        check_distribution_rows(probs, DISTRIBUTION_TOL)
    }

    /// `softmax(G(p))` for the given parameter vector.
    pub fn raw_forward(&self, omega: &ParameterSet, probs: &Tensor) -> Result<Tensor> {
        self.check_probs(probs)?;
        let mut g = Graph::new();
        let p = g.input("probs");
        let nodes = self.mlp.nodes(&mut g, 0, omega);
        let z = self.mlp.apply(&mut g, &nodes, p);
        let out = g.softmax(z);
        g.eval(&Bindings::new(&[omega]).input(p, probs), out)
    }

    /// Builds the EMA-mixed, one-hot anchored label graph. A branch whose
    /// mixing weight is zero is left out entirely.
    pub fn soft_label_graph(&self) -> SoftLabelGraph {
        let beta = self.config.beta;
        let mut g = Graph::new();
        let probs = g.input("probs");
        let onehot = g.input("onehot");
        let mut mix: Option<NodeId> = None;
        for (set, weight, params) in [(0, 1.0 - beta, &self.omega), (1, beta, &self.omega_old)] {
            if weight == 0.0 {
                continue;
            }
            let nodes = self.mlp.nodes(&mut g, set, params);
            let z = self.mlp.apply(&mut g, &nodes, probs);
            let s = g.softmax(z);
            let s = g.scale(s, weight);
            mix = Some(match mix {
                Some(m) => g.add(m, s),
                None => s,
            });
        }
        let raw = mix.expect("1 − β and β cannot both be zero");
        let anchored = g.add(raw, onehot);
        let output = g.scale(anchored, 0.5);
        SoftLabelGraph {
            graph: g,
            probs,
            onehot,
            output,
        }
    }

    fn check_onehot(&self, probs: &Tensor, onehot: &Tensor) -> Result<()> {
        if onehot.shape() != probs.shape() {
            return Err(Error::shape(
                "soft_labels",
                format!("onehot {:?} vs probs {:?}", onehot.shape(), probs.shape()),
            ));
        }
        check_distribution_rows(onehot, DISTRIBUTION_TOL)
    }

    /// Soft labels from already gradient-stopped probabilities.
    pub fn soft_labels_from_probs(
        &self,
        probs: &Tensor,
        onehot: &Tensor,
        sources: Vec<u64>,
    ) -> Result<SoftLabelBatch> {
        self.check_probs(probs)?;
        self.check_onehot(probs, onehot)?;
        let mut sg = self.soft_label_graph();
        let labels = sg.graph.eval(
            &Bindings::new(&[&self.omega, &self.omega_old])
                .input(sg.probs, probs)
                .input(sg.onehot, onehot),
            sg.output,
        )?;
        Ok(SoftLabelBatch { labels, sources })
    }

    /// Soft labels for buffer inputs `x` with one-hot labels `onehot`.
    pub fn make_soft_labels(
        &self,
        classifier: &Classifier,
        x: &Tensor,
        onehot: &Tensor,
        sources: Vec<u64>,
    ) -> Result<SoftLabelBatch> {
        let probs = classifier.probabilities(x)?;
        self.soft_labels_from_probs(&probs, onehot, sources)
    }

    /// `Σ_i ⟨∂ỹ_i/∂ω, seed_i⟩`: the transpose-Jacobian product of the soft
    /// labels with respect to the live ω.
    pub fn soft_label_vjp(&self, probs: &Tensor, onehot: &Tensor, seed: &Tensor) -> Result<Vec<f64>> {
        self.check_probs(probs)?;
        self.check_onehot(probs, onehot)?;
        let mut sg = self.soft_label_graph();
        sg.graph.forward(
            &Bindings::new(&[&self.omega, &self.omega_old])
                .input(sg.probs, probs)
                .input(sg.onehot, onehot),
        )?;
        let grads = sg.graph.backward(sg.output, seed)?;
        Ok(grads.params.into_iter().next().unwrap())
    }

    /// Caches the current ω as the EMA checkpoint. Called at task boundaries.
    pub fn snapshot_old(&mut self) {
        self.omega_old = self.omega.clone();
    }
}
