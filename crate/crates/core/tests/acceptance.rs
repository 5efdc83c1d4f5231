//! End-to-end acceptance checks. Each test prints one `criterion N:` line
//! with its measurement before asserting.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ddn_core::experiment::checks::{
    check_hypergrad, check_reservoir, check_theorems, HypergradCheckOptions, ReservoirCheckOptions, TheoremCheckOptions,
};
use ddn_core::experiment::runner::metrics_csv;
use ddn_core::experiment::{load, run_in_memory};
use ddn_core::metrics::{compute_acc, AccuracyMatrix};
use ddn_core::models::{one_hot, Classifier, ClassifierConfig, Ddn, DdnConfig};
use ddn_core::tensor_core::{
    finite_diff_grad, max_relative_error, Bindings, Graph, NodeId, ParameterSet, Tensor, DEFAULT_EPS,
};

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn overrides(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[test]
fn criterion_01_acc_fixture() {
    let last = [18.42, 18.64, 23.38, 36.36, 83.44];
    let columns: Vec<Vec<f64>> = (0..5).map(|k| last[..=k].to_vec()).collect();
    let acc = compute_acc(&AccuracyMatrix::from_columns(&columns).unwrap()).unwrap();
    let pass = (acc - 36.05).abs() < 0.01;
    report(1, pass, format!("acc={acc:.4} target=36.05±0.01"));
    assert!(pass);
}

#[test]
fn criterion_02_hypergradient_oracle() {
    let start = Instant::now();
    let opts = HypergradCheckOptions::default();
    let r = check_hypergrad(&opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = r.pass && r.instances.len() >= 20 && opts.eps == 1e-5 && r.max_error < 1e-4 && secs < 30.0;
    report(
        2,
        pass,
        format!("instances={} max_rel_err={:.3e} tol=1e-4 time={secs:.1}s", r.instances.len(), r.max_error),
    );
    assert!(pass);
}

#[test]
fn criterion_03_first_order_identity() {
    let start = Instant::now();
    let r = check_theorems(&TheoremCheckOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let order = r.min_order.unwrap_or(f64::NAN);
    let pass = order >= 1.9 && secs < 10.0;
    report(3, pass, format!("orders={:?} min_order={order:.3} time={secs:.1}s", r.orders));
    assert!(pass);
}

#[test]
fn criterion_04_boundary_zeros() {
    let base = HypergradCheckOptions {
        instances: 3,
        full_ddn_hidden: vec![32, 32],
        ..HypergradCheckOptions::default()
    };
    let alpha_zero = check_hypergrad(&HypergradCheckOptions { alpha: 0.0, ..base.clone() }).unwrap();
    let beta_one = check_hypergrad(&HypergradCheckOptions { beta: 1.0, ..base }).unwrap();
    let pass = alpha_zero.max_grad_norm == 0.0 && beta_one.max_grad_norm == 0.0;
    report(
        4,
        pass,
        format!(
            "alpha=0 norm={:e} beta=1 norm={:e}",
            alpha_zero.max_grad_norm, beta_one.max_grad_norm
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_soft_label_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    let mut min_true = f64::INFINITY;
    let draws = 10_000;
    for _ in 0..draws {
        let num_classes = rng.random_range(2..=6);
        let input_dim = rng.random_range(1..=5);
        let batch = rng.random_range(1..=4);
        let beta = if rng.random_bool(0.1) { rng.random_range(0..=1) as f64 } else { rng.random_range(0.0..=1.0) };
        let classifier = Classifier::with_rng(
            ClassifierConfig {
                input_dim,
                hidden_dims: vec![4],
                num_classes,
                init_seed: 0,
            },
            &mut rng,
        )
        .unwrap();
        let cfg = DdnConfig {
            num_classes,
            hidden_dims: vec![6, 6],
            beta,
            init_seed: 0,
        };
        let mut ddn = Ddn::with_rng(cfg.clone(), &mut rng).unwrap();
        let old = Ddn::with_rng(cfg, &mut rng).unwrap();
        // Large weights push the network outputs towards saturation.
        let spread = 10f64.powf(rng.random_range(-1.0..1.5));
        let live = ddn.omega.values().iter().map(|v| v * spread).collect();
        ddn.set_parameters(ddn.omega.with_values(live).unwrap(), old.omega).unwrap();

        let x: Vec<f64> = (0..batch * input_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                3.0 * z
            })
            .collect();
        let x = Tensor::matrix(batch, input_dim, x).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..num_classes)).collect();
        let out = ddn
            .make_soft_labels(&classifier, &x, &one_hot(&labels, num_classes), vec![0; batch])
            .unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let row = out.labels.row(i);
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            min_entry = row.iter().fold(min_entry, |m, &v| m.min(v));
            min_true = min_true.min(row[y]);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_sum < 1e-9 && min_entry >= 0.0 && min_true >= 0.5 && secs < 10.0;
    report(
        5,
        pass,
        format!("draws={draws} max|sum-1|={worst_sum:.1e} min_entry={min_entry:.2e} min_true_mass={min_true:.6} time={secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_reservoir_law() {
    let start = Instant::now();
    let opts = ReservoirCheckOptions::default();
    let r = check_reservoir(&opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = opts.trials >= 100_000 && opts.stream_len == 20 && opts.capacity == 5 && r.p_value > 0.01 && secs < 20.0;
    report(
        6,
        pass,
        format!("chi2={:.2} dof={} p={:.4} time={secs:.1}s", r.chi_square, r.degrees_of_freedom, r.p_value),
    );
    assert!(pass);
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
    for i in 0..rows {
        let s: f64 = t.row(i).iter().sum();
        t.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// A primitive under test: inputs are bound as parameter segments so one
/// backward sweep yields every input gradient.
struct Case {
    params: ParameterSet,
    fixed: Vec<(String, Tensor)>,
    build: fn(&mut Graph, &[NodeId], &[NodeId]) -> NodeId,
}

fn bind<'a>(params: &'a ParameterSet, ids: &[NodeId], fixed: &'a [(String, Tensor)]) -> Bindings<'a> {
    let mut b = Bindings::new(&[params]);
    for (id, (_, t)) in ids.iter().zip(fixed) {
        b = b.input(*id, t);
    }
    b
}

/// Worst relative error between the reverse sweep of `⟨seed, f⟩` and its
/// central differences.
fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let p: Vec<NodeId> = case
        .params
        .segments()
        .iter()
        .map(|s| g.param(0, s))
        .collect();
    let f: Vec<NodeId> = case.fixed.iter().map(|(name, _)| g.input(name.clone())).collect();
    let out = (case.build)(&mut g, &p, &f);
    let value = g.eval(&bind(&case.params, &f, &case.fixed), out).unwrap();
    let seed = random_tensor(rng, value.shape().to_vec());
    let grads = g.backward(out, &seed).unwrap();
    let fd = finite_diff_grad(
        |v| {
            let q = case.params.with_values(v.to_vec())?;
            let y = g.eval(&bind(&q, &f, &case.fixed), out)?;
            Ok(y.data().iter().zip(seed.data()).map(|(a, b)| a * b).sum())
        },
        case.params.values(),
        DEFAULT_EPS,
    )
    .unwrap();
    max_relative_error(&grads.params[0], &fd, 1e-8)
}

fn params(rng: &mut ChaCha8Rng, layout: &[(&str, Vec<usize>)]) -> ParameterSet {
    let mut p = ParameterSet::zeros(layout);
    p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    p
}

fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let (b, n, m) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..5));
    match name {
        "matmul" => Case {
            params: params(rng, &[("a", vec![b, n]), ("w", vec![n, m])]),
            fixed: vec![],
            build: |g, p, _| g.matmul(p[0], p[1]),
        },
        "add_bias" => Case {
            params: params(rng, &[("a", vec![b, m]), ("bias", vec![m])]),
            fixed: vec![],
            build: |g, p, _| g.add_bias(p[0], p[1]),
        },
        "add" => Case {
            params: params(rng, &[("a", vec![b, m]), ("b", vec![b, m])]),
            fixed: vec![],
            build: |g, p, _| g.add(p[0], p[1]),
        },
        "scale" => Case {
            params: params(rng, &[("a", vec![b, m])]),
            fixed: vec![],
            build: |g, p, _| g.scale(p[0], -1.7),
        },
        "relu" => {
            let mut p = params(rng, &[("a", vec![b, m])]);
            // Keep every entry well away from the kink.
            p.values_mut().iter_mut().for_each(|v| {
                if v.abs() < 0.01 {
                    *v = if *v < 0.0 { -0.5 } else { 0.5 };
                }
            });
            Case {
                params: p,
                fixed: vec![],
                build: |g, p, _| g.relu(p[0]),
            }
        }
        "softmax" => Case {
            params: params(rng, &[("z", vec![b, m])]),
            fixed: vec![],
            build: |g, p, _| g.softmax(p[0]),
        },
        "softmax_ce" => Case {
            params: params(rng, &[("z", vec![b, m])]),
            fixed: vec![("t".into(), random_distribution(rng, b, m))],
            build: |g, p, f| g.softmax_cross_entropy(p[0], f[0]),
        },
        "mse" => Case {
            params: params(rng, &[("a", vec![b, m]), ("b", vec![b, m])]),
            fixed: vec![],
            build: |g, p, _| g.mse(p[0], p[1]),
        },
        "mean" => Case {
            params: params(rng, &[("a", vec![b, m])]),
            fixed: vec![],
            build: |g, p, _| g.mean(p[0]),
        },
        "mask_columns" => Case {
            params: params(rng, &[("z", vec![b, 4])]),
            fixed: vec![("t".into(), random_distribution(rng, b, 4))],
            build: |g, p, f| {
                let masked = g.mask_columns(p[0], vec![1, 3]);
                let s = g.softmax(masked);
                g.mse(s, f[0])
            },
        },
        "mlp" => Case {
            params: params(
                rng,
                &[("w0", vec![n, 5]), ("b0", vec![5]), ("w1", vec![5, m]), ("b1", vec![m])],
            ),
            fixed: vec![
                ("x".into(), random_tensor(rng, vec![b, n])),
                ("t".into(), random_distribution(rng, b, m)),
            ],
            build: |g, p, f| {
                let h = g.matmul(f[0], p[0]);
                let h = g.add_bias(h, p[1]);
                let h = g.relu(h);
                let z = g.matmul(h, p[2]);
                let z = g.add_bias(z, p[3]);
                g.softmax_cross_entropy(z, f[1])
            },
        },
        _ => unreachable!(),
    }
}

#[test]
fn criterion_07_autodiff_oracle() {
    let start = Instant::now();
    let names = [
        "matmul",
        "add_bias",
        "add",
        "scale",
        "relu",
        "softmax",
        "softmax_ce",
        "mse",
        "mean",
        "mask_columns",
        "mlp",
    ];
    let instances = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for name in names {
        for _ in 0..instances {
            let err = check_case(&primitive_case(name, &mut rng), &mut rng);
            if err > worst {
                worst = err;
                worst_name = name;
            }
        }
    }

    // Closed-form logit gradient of the mean cross-entropy.
    let mut ce_err = 0.0f64;
    for _ in 0..instances {
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..6));
        let z = random_tensor(&mut rng, vec![b, c]).scale(3.0);
        let t = random_distribution(&mut rng, b, c);
        let mut g = Graph::new();
        let zn = g.input("z");
        let tn = g.input("t");
        let loss = g.softmax_cross_entropy(zn, tn);
        g.forward(&Bindings::new(&[]).input(zn, &z).input(tn, &t)).unwrap();
        let grad = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
        let closed = z.softmax_rows().sub(&t).unwrap().scale(1.0 / b as f64);
        ce_err = ce_err.max(grad.wrt(zn).unwrap().sub(&closed).unwrap().max_abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && ce_err < 1e-12 && secs < 30.0;
    report(
        7,
        pass,
        format!(
            "instances={instances}/op max_rel_err={worst:.2e} ({worst_name}) ce_closed_form_err={ce_err:.1e} time={secs:.1}s"
        ),
    );
    assert!(pass);
}

/// The end-to-end comparison and its determinism rerun share one test so
/// the full benchmark is trained only twice.
#[test]
fn criteria_08_09_benchmark_direction_and_determinism() {
    let start = Instant::now();
    let (_, cfg) = load(
        None,
        &overrides(&["seeds=1-10", "strategy.use_ddn=true", "compare_baseline=true"]),
    )
    .unwrap();
    let t = &cfg.trainer;
    assert_eq!(
        (t.buffer_capacity, t.batch_size, t.lr, t.strategy.alpha, t.beta),
        (100, 32, 0.03, 1.0, 0.9)
    );
    let (report8, outcomes) = run_in_memory(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let cmp = report8.comparison.as_ref().unwrap();
    let er = report8.strategy("er").unwrap();
    let ddn = report8.strategy("er+ddn").unwrap();
    let pass8 = cmp.acc_sign_test.p_value < 0.05 && ddn.fm_mean < er.fm_mean && secs < 300.0;
    report(
        8,
        pass8,
        format!(
            "ER acc={:.2} fm={:.2} | ER+DDN acc={:.2} fm={:.2} | wins={}/{} p={:.4} time={secs:.0}s",
            er.acc_mean,
            er.fm_mean,
            ddn.acc_mean,
            ddn.fm_mean,
            cmp.acc_sign_test.wins,
            er.seeds.len(),
            cmp.acc_sign_test.p_value
        ),
    );

    let (_, again) = run_in_memory(&cfg).unwrap();
    let (a, b) = (metrics_csv(&outcomes), metrics_csv(&again));
    let pass9 = a.as_bytes() == b.as_bytes();
    report(9, pass9, format!("metrics.csv bytes={} identical={pass9}", a.len()));

    assert!(pass9);
    assert!(pass8);
}

#[test]
fn criterion_10_fine_tuning_bias() {
    let start = Instant::now();
    let (_, cfg) = load(None, &overrides(&["seeds=1-3", "strategy.alpha=0"])).unwrap();
    let (report10, _) = run_in_memory(&cfg).unwrap();
    let summary = &report10.strategies[0];
    let final_classes = [8usize, 9];
    let mut checked = 0;
    let mut biased = 0;
    let mut smallest_margin = f64::INFINITY;
    for seed in &summary.seeds {
        for (c, profile) in seed.class_prob_profiles.iter().enumerate() {
            if final_classes.contains(&c) {
                continue;
            }
            let p = profile.as_ref().unwrap();
            let new_mass: f64 = final_classes.iter().map(|&k| p[k]).sum();
            checked += 1;
            if new_mass > p[c] {
                biased += 1;
            }
            smallest_margin = smallest_margin.min(new_mass - p[c]);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = checked > 0 && biased == checked && secs < 60.0;
    report(
        10,
        pass,
        format!(
            "old classes biased={biased}/{checked} min(new_mass-true_mass)={smallest_margin:.3} acc={:.2} time={secs:.1}s",
            summary.acc_mean
        ),
    );
    assert!(pass);
}
