use std::collections::BTreeSet;

use ddn_core::datasets::{
    contiguous_partition, encode_idx, load_split_image_dataset, make_synthetic_tasks, parse_csv, parse_idx, read_csv,
    write_csv, write_sequence_csv, DataFiles, Examples, Protocol, SyntheticConfig, TaskSequence,
};
use ddn_core::rng::{SeedTree, Stream};
use ddn_core::tensor_core::Tensor;
use ddn_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synthetic(cfg: &SyntheticConfig, seed: u64) -> TaskSequence {
    make_synthetic_tasks(cfg, &mut SeedTree::new(seed).rng(Stream::Data)).unwrap()
}

fn small_cfg() -> SyntheticConfig {
    SyntheticConfig {
        n_train_per_class: 50,
        n_test_per_class: 20,
        ..SyntheticConfig::default()
    }
}

#[test]
fn default_benchmark_has_five_two_class_tasks() {
    let seq = synthetic(&SyntheticConfig::default(), 1);
    assert_eq!(seq.num_tasks(), 5);
    for (t, task) in seq.tasks.iter().enumerate() {
        assert_eq!(task.class_ids, vec![2 * t, 2 * t + 1]);
        assert_eq!(task.train.len(), 1000);
        assert_eq!(task.test.len(), 200);
    }
    assert_eq!(seq.input_dim, 32);
    assert_eq!(seq.protocol, Protocol::Online);
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(synthetic(&small_cfg(), 4), synthetic(&small_cfg(), 4));
    assert_ne!(synthetic(&small_cfg(), 4), synthetic(&small_cfg(), 5));
}

#[test]
fn indivisible_class_count_is_rejected() {
    let cfg = SyntheticConfig {
        classes_per_task: 3,
        ..small_cfg()
    };
    assert!(make_synthetic_tasks(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(contiguous_partition(10, 4).is_err());
    assert!(contiguous_partition(10, 0).is_err());
}

/// Nearest-class-mean prediction using means estimated on `train`.
fn nearest_mean_accuracy(train: &Examples, test: &Examples, num_classes: usize) -> f64 {
    let d = train.x.cols();
    let mut means = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0.0; num_classes];
    for (i, &y) in train.labels.iter().enumerate() {
        for (m, v) in means[y].iter_mut().zip(train.x.row(i)) {
            *m += v;
        }
        counts[y] += 1.0;
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n);
    }
    let hits = test
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = test.x.row(i);
            let dist = |m: &Vec<f64>| m.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..num_classes)
                .min_by(|&a, &b| dist(&means[a]).partial_cmp(&dist(&means[b])).unwrap())
                .unwrap();
            best == y
        })
        .count();
    hits as f64 / test.len() as f64
}

fn union(parts: Vec<&Examples>) -> Examples {
    let xs: Vec<&Tensor> = parts.iter().map(|e| &e.x).collect();
    Examples::new(
        Tensor::vstack(&xs).unwrap(),
        parts.iter().flat_map(|e| e.labels.iter().copied()).collect(),
    )
    .unwrap()
}

#[test]
fn zero_separation_gives_chance_accuracy() {
    let cfg = SyntheticConfig {
        separation: 0.0,
        n_train_per_class: 50,
        n_test_per_class: 100,
        ..SyntheticConfig::default()
    };
    let seeds = 20;
    let mut total = 0.0;
    let mut n_test = 0;
    for s in 0..seeds {
        let seq = synthetic(&cfg, s);
        let train = union(seq.tasks.iter().map(|t| &t.train).collect());
        let test = union(seq.tasks.iter().map(|t| &t.test).collect());
        total += nearest_mean_accuracy(&train, &test, 10);
        n_test += test.len();
    }
    let mean = total / seeds as f64;
    let p = 0.1;
    let sigma = (p * (1.0 - p) / n_test as f64).sqrt();
    assert!((mean - p).abs() < 3.0 * sigma, "{mean} vs {p} ± {sigma}");

    // The default separation is far from chance.
    let seq = synthetic(&small_cfg(), 0);
    let train = union(seq.tasks.iter().map(|t| &t.train).collect());
    let test = union(seq.tasks.iter().map(|t| &t.test).collect());
    assert!(nearest_mean_accuracy(&train, &test, 10) > 0.5);
}

#[test]
fn online_batches_cover_the_task_once() {
    let cfg = SyntheticConfig {
        num_classes: 2,
        classes_per_task: 2,
        n_train_per_class: 50,
        n_test_per_class: 5,
        ..SyntheticConfig::default()
    };
    let seq = synthetic(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batches = seq.iterate(0, 32, &mut rng).unwrap();
    let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![32, 32, 32, 4]);
    let all: BTreeSet<usize> = batches.iter().flatten().copied().collect();
    assert_eq!(all.len(), 100);
    let again = seq.iterate(0, 32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(batches, again);
}

#[test]
fn offline_batches_repeat_per_epoch() {
    let mut seq = synthetic(&small_cfg(), 0);
    seq.set_protocol(Protocol::Offline, 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = seq.iterate(1, 32, &mut rng).unwrap();
    assert_eq!(batches.len(), 50 * 100usize.div_ceil(32));
    assert_ne!(batches[0], batches[4]);
    assert!(seq.set_protocol(Protocol::Online, 3).is_err());
    assert!(seq.set_protocol(Protocol::Offline, 0).is_err());
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synthetic(&small_cfg(), 2);
    let (tr, te) = (dir.path().join("train.csv"), dir.path().join("test.csv"));
    write_sequence_csv(&seq, &tr, &te).unwrap();
    let loaded = load_split_image_dataset(&DataFiles::Csv(tr.clone()), &DataFiles::Csv(te), 5).unwrap();
    assert_eq!(loaded, seq);

    let (x, labels) = read_csv(&tr).unwrap();
    let path = dir.path().join("again.csv");
    write_csv(&path, &x, &labels).unwrap();
    assert_eq!(std::fs::read(&tr).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn csv_errors_carry_offsets() {
    let err = parse_csv("label,f0\n1,0.5\n2,oops\n".as_bytes()).unwrap_err();
    match err {
        Error::Parse { offset, .. } => assert_eq!(offset, 15),
        e => panic!("{e}"),
    }
    assert!(matches!(parse_csv("y,f0\n1,2\n".as_bytes()), Err(Error::Parse { offset: 0, .. })));
}

#[test]
fn idx_round_trip_and_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };
    // 10 classes labelled 10..19, 3 train and 1 test image each, 2×2 pixels.
    let mut train_img = Vec::new();
    let mut train_lab = Vec::new();
    for c in 0..10u8 {
        for k in 0..3u8 {
            train_img.extend([255, 0, c, k]);
            train_lab.push(10 + c);
        }
    }
    let test_img: Vec<u8> = (0..10u8).flat_map(|c| [0, 255, c, 0]).collect();
    let test_lab: Vec<u8> = (10..20u8).collect();
    let train = DataFiles::Idx {
        images: write("tr-img", encode_idx(&[30, 2, 2], &train_img)),
        labels: write("tr-lab", encode_idx(&[30], &train_lab)),
    };
    let test = DataFiles::Idx {
        images: write("te-img", encode_idx(&[10, 2, 2], &test_img)),
        labels: write("te-lab", encode_idx(&[10], &test_lab)),
    };
    let seq = load_split_image_dataset(&train, &test, 5).unwrap();
    assert_eq!(seq.num_tasks(), 5);
    assert_eq!(seq.num_classes, 10);
    assert_eq!(seq.input_dim, 4);
    for (t, task) in seq.tasks.iter().enumerate() {
        assert_eq!(task.class_ids, vec![2 * t, 2 * t + 1]);
        assert_eq!(task.train.len(), 6);
        assert_eq!(task.test.len(), 2);
    }
    assert_eq!(seq.tasks[0].train.x.get(0, 0), 1.0);
    assert_eq!(seq.tasks[0].train.x.get(0, 1), 0.0);
    assert!(load_split_image_dataset(&train, &test, 3).is_err());
}

#[test]
fn idx_header_errors_name_offsets() {
    let good = encode_idx(&[2], &[1, 2]);
    assert_eq!(parse_idx(&good).unwrap().data, vec![1, 2]);
    let mut bad = good.clone();
    bad[1] = 7;
    assert!(matches!(parse_idx(&bad), Err(Error::Parse { offset: 1, .. })));
    let mut bad = good.clone();
    bad[2] = 0x0d;
    assert!(matches!(parse_idx(&bad), Err(Error::Parse { offset: 2, .. })));
    assert!(matches!(parse_idx(&good[..9]), Err(Error::Parse { offset: 9, .. })));
    assert!(matches!(parse_idx(&[0, 0]), Err(Error::Parse { offset: 2, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partitions_are_disjoint_and_cover(per_task in 1usize..5, tasks in 1usize..6, seed in any::<u64>()) {
        let cfg = SyntheticConfig {
            num_classes: per_task * tasks,
            classes_per_task: per_task,
            dim: 3,
            n_train_per_class: 3,
            n_test_per_class: 2,
            ..SyntheticConfig::default()
        };
        prop_assume!(cfg.num_classes >= 2);
        let seq = make_synthetic_tasks(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut seen = BTreeSet::new();
        for t in &seq.tasks {
            for &c in &t.class_ids {
                prop_assert!(seen.insert(c));
            }
            prop_assert!(t.train.labels.iter().all(|l| t.class_ids.contains(l)));
        }
        prop_assert_eq!(seen.len(), cfg.num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 0..seq.num_tasks() {
            let mut idx: Vec<usize> = seq.iterate(t, 4, &mut rng).unwrap().concat();
            idx.sort_unstable();
            prop_assert_eq!(idx, (0..seq.tasks[t].train.len()).collect::<Vec<_>>());
        }
    }
}
