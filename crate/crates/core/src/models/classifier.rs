use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::mlp::{Mlp, MlpNodes};
use crate::tensor_core::{Bindings, Graph, NodeId, ParameterSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ClassifierConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ClassifierConfig {
            input_dim,
            hidden_dims: vec![100, 100],
            num_classes,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be at least 2"));
        }
        if self.hidden_dims.iter().any(|&h| h < 1) {
            return Err(Error::config("model.hidden", "layer widths must be at least 1"));
        }
        Ok(())
    }

    fn mlp(&self) -> Mlp {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        Mlp::new(dims)
    }
}

/// The classifier `f_θ`: an MLP from features to class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    mlp: Mlp,
    pub theta: ParameterSet,
}

/// Classifier parameters wired into a graph (as parameter set `set`).
pub struct ClassifierNodes<'c> {
    classifier: &'c Classifier,
    nodes: MlpNodes,
}

impl ClassifierNodes<'_> {
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> NodeId {
        self.classifier.mlp.apply(g, &self.nodes, x)
    }
}

impl Classifier {
    /// He-initialized classifier drawn from `config.init_seed`.
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: rand::Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mlp = config.mlp();
        let theta = mlp.init(rng);
        Ok(Classifier { config, mlp, theta })
    }

    pub fn zeros(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mlp = config.mlp();
        let theta = mlp.zeros();
        Ok(Classifier { config, mlp, theta })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn set_theta(&mut self, theta: ParameterSet) -> Result<()> {
        if !theta.same_layout(&self.theta) {
            return Err(Error::shape("set_theta", "parameter layout differs"));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn nodes(&self, g: &mut Graph, set: usize) -> ClassifierNodes<'_> {
        ClassifierNodes {
            classifier: self,
            nodes: self.mlp.nodes(g, set, &self.theta),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "classifier_forward",
                format!("input {:?}, expected [B, {}]", x.shape(), self.config.input_dim),
            ));
        }
        Ok(())
    }

    /// Logits for a batch `[B, D] → [B, C]` at the live parameters.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(&self.theta, x)
    }

    /// Logits at an arbitrary parameter vector of the same layout.
    pub fn forward_with(&self, theta: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xn = g.input("x");
        let z = self.nodes(&mut g, 0).logits(&mut g, xn);
        g.eval(&Bindings::new(&[theta]).input(xn, x), z)
    }

    /// Softmax probabilities; a plain tensor, so nothing downstream can
    /// differentiate back into θ through it.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.softmax_rows())
    }

    /// Mean cross-entropy of `targets` and its gradient with respect to θ,
    /// evaluated at `theta`.
    pub fn loss_and_grad(
        &self,
        theta: &ParameterSet,
        x: &Tensor,
        targets: &Tensor,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xn = g.input("x");
        let tn = g.input("targets");
        let z = self.nodes(&mut g, 0).logits(&mut g, xn);
        let loss = g.softmax_cross_entropy(z, tn);
        g.forward(&Bindings::new(&[theta]).input(xn, x).input(tn, targets))?;
        let grads = g.backward(loss, &Tensor::scalar(1.0))?;
        let value = g.value(loss)?.item();
        Ok((value, grads.params.into_iter().next().unwrap()))
    }
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), num_classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[y] = 1.0;
    }
    t
}
