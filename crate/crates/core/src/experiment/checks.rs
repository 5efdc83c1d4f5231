//! Standalone numerical checks: hypergradient against finite differences,
//! the first-order gradient-matching identity, and the reservoir law.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::stats::chi_square_sf;
use crate::buffer::Reservoir;
use crate::error::Result;
use crate::meta::{hypergradient, inner_step, InnerBatch, MetaConfig, OuterBatch};
use crate::models::{one_hot, Classifier, ClassifierConfig, Ddn, DdnConfig};
use crate::tensor_core::{finite_diff_directional, finite_diff_grad, norm, ParameterSet, Tensor, DEFAULT_EPS};

/// Outer loss after one unrolled step, computed from plain gradients
/// without any second-order machinery. Used as the finite-difference target.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_outer_loss(
    classifier: &Classifier,
    ddn: &Ddn,
    omega: &ParameterSet,
    x_in: &Tensor,
    y_in: &Tensor,
    x_out: &Tensor,
    y_out: &Tensor,
    eta: f64,
    alpha: f64,
) -> Result<f64> {
    let mut d = ddn.clone();
    d.set_parameters(omega.clone(), ddn.omega_old.clone())?;
    let probs = classifier.probabilities(x_in)?;
    let soft = d.soft_labels_from_probs(&probs, y_in, Vec::new())?;
    let (_, g_hard) = classifier.loss_and_grad(&classifier.theta, x_in, y_in)?;
    let (_, g_soft) = classifier.loss_and_grad(&classifier.theta, x_in, &soft.labels)?;
    let mut theta = classifier.theta.clone();
    theta.axpy(-eta, &g_hard);
    theta.axpy(-eta * alpha, &g_soft);
    Ok(classifier.loss_and_grad(&theta, x_out, y_out)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypergradCheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub input_dim: usize,
    pub num_classes: usize,
    pub classifier_hidden: Vec<usize>,
    pub batch: usize,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    /// DDN widths for the coordinate-wise comparison.
    pub fd_ddn_hidden: Vec<usize>,
    /// DDN widths for the directional comparison.
    pub full_ddn_hidden: Vec<usize>,
    pub directions: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for HypergradCheckOptions {
    fn default() -> Self {
        HypergradCheckOptions {
            instances: 20,
            seed: 0,
            input_dim: 3,
            num_classes: 3,
            classifier_hidden: vec![4],
            batch: 2,
            eta: 0.03,
            alpha: 1.0,
            beta: 0.9,
            fd_ddn_hidden: vec![8, 8],
            full_ddn_hidden: vec![200, 200],
            directions: 3,
            eps: DEFAULT_EPS,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypergradInstance {
    pub coordinate_error: f64,
    pub directional_error: f64,
    pub grad_norm: f64,
    pub full_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypergradCheckReport {
    pub options: HypergradCheckOptions,
    pub instances: Vec<HypergradInstance>,
    pub max_error: f64,
    pub max_grad_norm: f64,
    pub pass: bool,
}

/// Errors below this gradient scale are measured in absolute terms.
const ERROR_FLOOR: f64 = 1e-8;

struct Tiny {
    classifier: Classifier,
    x_in: Tensor,
    y_in: Tensor,
    x_out: Tensor,
    y_out: Tensor,
}

fn tiny_instance(opts: &HypergradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Tiny> {
    let classifier = Classifier::with_rng(
        ClassifierConfig {
            input_dim: opts.input_dim,
            hidden_dims: opts.classifier_hidden.clone(),
            num_classes: opts.num_classes,
            init_seed: 0,
        },
        rng,
    )?;
    let mut draw = |b: usize| -> Result<(Tensor, Tensor)> {
        let x: Vec<f64> = (0..b * opts.input_dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..opts.num_classes)).collect();
        Ok((Tensor::matrix(b, opts.input_dim, x)?, one_hot(&y, opts.num_classes)))
    };
    let (x_in, y_in) = draw(opts.batch)?;
    let (x_out, y_out) = draw(opts.batch)?;
    Ok(Tiny {
        classifier,
        x_in,
        y_in,
        x_out,
        y_out,
    })
}

fn ddn_for(opts: &HypergradCheckOptions, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Ddn> {
    let mut ddn = Ddn::with_rng(
        DdnConfig {
            num_classes: opts.num_classes,
            hidden_dims: hidden.to_vec(),
            beta: opts.beta,
            init_seed: 0,
        },
        rng,
    )?;
    // A cached checkpoint different from the live network.
    let old = Ddn::with_rng(ddn.config().clone(), rng)?;
    let live = with_random_biases(ddn.omega.clone(), rng);
    let old = with_random_biases(old.omega, rng);
    ddn.set_parameters(live, old)?;
    Ok(ddn)
}

/// With zero biases a row whose whole layer is dead feeds an exact zero
/// into the next ReLU, where finite differences are meaningless.
fn with_random_biases(mut params: ParameterSet, rng: &mut ChaCha8Rng) -> ParameterSet {
    let ranges: Vec<_> = params
        .segments()
        .iter()
        .filter(|s| s.name.ends_with(".bias"))
        .map(|s| s.range())
        .collect();
    for r in ranges {
        for v in &mut params.values_mut()[r] {
            let z: f64 = StandardNormal.sample(&mut *rng);
            *v = 0.1 * z;
        }
    }
    params
}

/// Compares the analytic hypergradient with central differences of the
/// unrolled outer loss on random tiny problems.
pub fn check_hypergrad(opts: &HypergradCheckOptions) -> Result<HypergradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let meta = MetaConfig {
        eta: opts.eta,
        alpha: opts.alpha,
        inner_batch: opts.batch,
        outer_batch: opts.batch,
        ..MetaConfig::default()
    };
    let mut instances = Vec::with_capacity(opts.instances);
    for _ in 0..opts.instances {
        let t = tiny_instance(opts, &mut rng)?;
        let outer = OuterBatch {
            x: &t.x_out,
            targets: &t.y_out,
        };
        let loss = |ddn: &Ddn, w: &[f64]| -> Result<f64> {
            let omega = ddn.omega.with_values(w.to_vec())?;
            unrolled_outer_loss(&t.classifier, ddn, &omega, &t.x_in, &t.y_in, &t.x_out, &t.y_out, opts.eta, opts.alpha)
        };

        let small = ddn_for(opts, &opts.fd_ddn_hidden, &mut rng)?;
        let hg = hypergradient(&t.classifier, &small, &t.x_in, &t.y_in, outer, &meta)?;
        let fd = finite_diff_grad(|w| loss(&small, w), small.omega.values(), opts.eps)?;
        let scale = norm_inf(&fd).max(ERROR_FLOOR);
        let coordinate_error = hg
            .grad_omega
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / scale;

        let full = ddn_for(opts, &opts.full_ddn_hidden, &mut rng)?;
        let hg_full = hypergradient(&t.classifier, &full, &t.x_in, &t.y_in, outer, &meta)?;
        let mut directional_error = 0.0f64;
        for _ in 0..opts.directions {
            let mut dir: Vec<f64> = (0..full.omega.total_len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let len = norm(&dir);
            dir.iter_mut().for_each(|d| *d /= len);
            let analytic: f64 = hg_full.grad_omega.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let numeric = finite_diff_directional(|w| loss(&full, w), full.omega.values(), &dir, opts.eps)?;
            // A random direction can be nearly orthogonal to the gradient, so
            // the error is measured against the gradient norm as well.
            let scale = numeric.abs().max(norm(&hg_full.grad_omega)).max(ERROR_FLOOR);
            directional_error = directional_error.max((analytic - numeric).abs() / scale);
        }
        instances.push(HypergradInstance {
            coordinate_error,
            directional_error,
            grad_norm: norm(&hg.grad_omega),
            full_grad_norm: norm(&hg_full.grad_omega),
        });
    }
    let max_error = instances
        .iter()
        .map(|i| i.coordinate_error.max(i.directional_error))
        .fold(0.0f64, f64::max);
    let max_grad_norm = instances
        .iter()
        .map(|i| i.grad_norm.max(i.full_grad_norm))
        .fold(0.0f64, f64::max);
    Ok(HypergradCheckReport {
        options: opts.clone(),
        instances,
        max_error,
        max_grad_norm,
        pass: max_error < opts.tolerance,
    })
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremCheckOptions {
    pub seed: u64,
    pub etas: Vec<f64>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub batch: usize,
    pub alpha: f64,
    /// Inner targets equal the classifier's own predictions, so every inner
    /// gradient vanishes.
    pub zero_gradient: bool,
    pub min_order: f64,
}

impl Default for TheoremCheckOptions {
    fn default() -> Self {
        TheoremCheckOptions {
            seed: 0,
            etas: vec![1e-2, 1e-3, 1e-4],
            input_dim: 4,
            num_classes: 3,
            hidden: vec![6],
            batch: 8,
            alpha: 1.0,
            zero_gradient: false,
            min_order: 1.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaylorPoint {
    pub eta: f64,
    pub outer_change: f64,
    pub gm_objective: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremCheckReport {
    pub options: TheoremCheckOptions,
    pub points: Vec<TaylorPoint>,
    /// Observed order between consecutive step sizes.
    pub orders: Vec<f64>,
    /// `None` when every residual is exactly zero.
    pub min_order: Option<f64>,
    pub pass: bool,
}

/// Checks that `L_out(θ') − L_out(θ) − η·gm` shrinks like `η²`.
pub fn check_theorems(opts: &TheoremCheckOptions) -> Result<TheoremCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let classifier = Classifier::with_rng(
        ClassifierConfig {
            input_dim: opts.input_dim,
            hidden_dims: opts.hidden.clone(),
            num_classes: opts.num_classes,
            init_seed: 0,
        },
        &mut rng,
    )?;
    let mut draw = |b: usize| -> Result<(Tensor, Vec<usize>)> {
        let x: Vec<f64> = (0..b * opts.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..opts.num_classes)).collect();
        Ok((Tensor::matrix(b, opts.input_dim, x)?, y))
    };
    let (x_in, y_in) = draw(opts.batch)?;
    let (x_out, y_out) = draw(opts.batch)?;
    let y_out = one_hot(&y_out, opts.num_classes);
    let (hard, soft) = if opts.zero_gradient {
        let p = classifier.probabilities(&x_in)?;
        (p.clone(), p)
    } else {
        let hard = one_hot(&y_in, opts.num_classes);
        let soft = hard.map(|v| 0.5 * v + 0.5 / opts.num_classes as f64);
        (hard, soft)
    };
    let inner = InnerBatch {
        x: &x_in,
        hard: &hard,
        soft: &soft,
    };
    let (before, g_out) = classifier.loss_and_grad(&classifier.theta, &x_out, &y_out)?;

    let mut points = Vec::new();
    for &eta in &opts.etas {
        let step = inner_step(&classifier, inner, eta, opts.alpha)?;
        let gm = 0.0 - crate::tensor_core::dot(&step.inner_grad, &g_out);
        let (after, _) = classifier.loss_and_grad(&step.theta_prime, &x_out, &y_out)?;
        let change = after - before;
        points.push(TaylorPoint {
            eta,
            outer_change: change,
            gm_objective: gm,
            residual: (change - eta * gm).abs(),
        });
    }
    let orders: Vec<f64> = points
        .windows(2)
        .filter(|w| w[0].residual > 0.0 && w[1].residual > 0.0)
        .map(|w| (w[0].residual / w[1].residual).ln() / (w[0].eta / w[1].eta).ln())
        .collect();
    let all_zero = points.iter().all(|p| p.residual == 0.0);
    let min_order = orders.iter().copied().reduce(f64::min);
    let pass = if all_zero {
        true
    } else {
        orders.len() == points.len() - 1 && min_order.is_some_and(|o| o >= opts.min_order)
    };
    Ok(TheoremCheckReport {
        options: opts.clone(),
        points,
        orders,
        min_order,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReservoirCheckOptions {
    pub capacity: usize,
    pub stream_len: usize,
    pub trials: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for ReservoirCheckOptions {
    fn default() -> Self {
        ReservoirCheckOptions {
            capacity: 5,
            stream_len: 20,
            trials: 100_000,
            seed: 0,
            alpha: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReservoirCheckReport {
    pub options: ReservoirCheckOptions,
    pub expected: f64,
    pub frequencies: Vec<f64>,
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    /// Items whose frequency is more than three standard errors from the
    /// expected inclusion probability.
    pub outliers: Vec<usize>,
    pub pass: bool,
}

/// Simulates many independent streams and tests inclusion frequencies
/// against `capacity / stream_len`.
///
/// Inclusion indicators of one stream always sum to the capacity, so the
/// counts are negatively correlated. The statistic divides the squared
/// deviations by their exact variance `T·p(1−p)·N/(N−1)`, which makes it
/// chi-square with `N − 1` degrees of freedom for large `T`.
pub fn check_reservoir(opts: &ReservoirCheckOptions) -> Result<ReservoirCheckReport> {
    let n = opts.stream_len;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut counts = vec![0u64; n];
    for _ in 0..opts.trials {
        let mut r = Reservoir::new(opts.capacity)?;
        for i in 0..n {
            r.offer(i, &mut rng);
        }
        for &i in r.items() {
            counts[i] += 1;
        }
    }
    let t = opts.trials as f64;
    let p = (opts.capacity as f64 / n as f64).min(1.0);
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / t).collect();
    let df = n.saturating_sub(1);
    let (chi_square, p_value, outliers) = if p >= 1.0 || n < 2 {
        (0.0, 1.0, Vec::new())
    } else {
        let var = t * p * (1.0 - p) * n as f64 / (n as f64 - 1.0);
        let stat: f64 = counts.iter().map(|&c| (c as f64 - t * p).powi(2)).sum::<f64>() / var;
        let se = (p * (1.0 - p) / t).sqrt();
        let outliers = (0..n).filter(|&i| (frequencies[i] - p).abs() > 3.0 * se).collect();
        (stat, chi_square_sf(stat, df as f64), outliers)
    };
    Ok(ReservoirCheckReport {
        options: opts.clone(),
        expected: p,
        frequencies,
        chi_square,
        degrees_of_freedom: df,
        p_value,
        outliers,
        pass: p_value > opts.alpha,
    })
}
