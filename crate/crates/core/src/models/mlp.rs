use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor_core::{Graph, NodeId, ParameterSet};

/// Fully connected ReLU network shape: `dims[0] → … → dims[last]`.
///
/// Layer `l` owns segments `fc{l}.weight` (`[in, out]`) and `fc{l}.bias`
/// (`[out]`). ReLU follows every layer except the last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    dims: Vec<usize>,
}

/// Parameter nodes of one MLP inside a graph.
#[derive(Clone, Debug)]
pub struct MlpNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    pub fn new(dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Mlp { dims }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn zeros(&self) -> ParameterSet {
        let mut layout = Vec::new();
        for (l, w) in self.dims.windows(2).enumerate() {
            layout.push((format!("fc{l}.weight"), vec![w[0], w[1]]));
            layout.push((format!("fc{l}.bias"), vec![w[1]]));
        }
        ParameterSet::zeros(&layout)
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut p = self.zeros();
        for (l, w) in self.dims.windows(2).enumerate() {
            let std = (2.0 / w[0] as f64).sqrt();
            let slice = p.slice_mut(&format!("fc{l}.weight")).unwrap();
            for v in slice.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        }
        p
    }

    pub fn nodes(&self, g: &mut Graph, set: usize, params: &ParameterSet) -> MlpNodes {
        let layers = (0..self.dims.len() - 1)
            .map(|l| {
                let w = g.param(set, params.segment(&format!("fc{l}.weight")).unwrap());
                let b = g.param(set, params.segment(&format!("fc{l}.bias")).unwrap());
                (w, b)
            })
            .collect();
        MlpNodes { layers }
    }

    /// Wires the network onto `input` and returns the pre-activation output.
    pub fn apply(&self, g: &mut Graph, nodes: &MlpNodes, input: NodeId) -> NodeId {
        let mut h = input;
        let last = nodes.layers.len() - 1;
        for (l, &(w, b)) in nodes.layers.iter().enumerate() {
            h = g.matmul(h, w);
            h = g.add_bias(h, b);
            if l < last {
                h = g.relu(h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn parameter_count() {
        let m = Mlp::new(vec![3, 4, 2]);
        assert_eq!(m.zeros().total_len(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn init_scale_tracks_fan_in() {
        let m = Mlp::new(vec![200, 200, 2]);
        let p = m.init(&mut ChaCha8Rng::seed_from_u64(1));
        let w = p.slice(p.segment("fc0.weight").unwrap());
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 0.01).abs() < 0.001, "variance {var}");
        assert!(p.slice(p.segment("fc0.bias").unwrap()).iter().all(|&b| b == 0.0));
    }
}
