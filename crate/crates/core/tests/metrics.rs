use ddn_core::datasets::{make_synthetic_tasks, SyntheticConfig, TaskSequence};
use ddn_core::metrics::{
    accuracy, class_probability_profile, compute_acc, compute_fm, confusion_matrix, evaluate_task_row, AccuracyMatrix,
};
use ddn_core::models::{Classifier, ClassifierConfig};
use ddn_core::rng::{SeedTree, Stream};
use ddn_core::Error;
use proptest::prelude::*;

/// Final column padded into a full matrix whose earlier entries are the
/// final values, so only the last column matters for ACC.
fn with_final_column(values: &[f64]) -> AccuracyMatrix {
    let n = values.len();
    let columns: Vec<Vec<f64>> = (0..n).map(|k| values[..=k].to_vec()).collect();
    AccuracyMatrix::from_columns(&columns).unwrap()
}

#[test]
fn acc_of_the_published_er_row() {
    let m = with_final_column(&[18.42, 18.64, 23.38, 36.36, 83.44]);
    assert!((compute_acc(&m).unwrap() - 36.05).abs() < 0.01);
}

#[test]
fn acc_trivial_cases() {
    assert_eq!(compute_acc(&with_final_column(&[100.0; 4])).unwrap(), 100.0);
    assert_eq!(compute_acc(&with_final_column(&[42.5])).unwrap(), 42.5);
}

#[test]
fn fm_of_a_constructed_matrix() {
    let mut m = AccuracyMatrix::new(3);
    m.set(0, 0, 90.0).unwrap();
    m.set(0, 1, 70.0).unwrap();
    m.set(1, 1, 80.0).unwrap();
    m.set(0, 2, 50.0).unwrap();
    m.set(1, 2, 60.0).unwrap();
    m.set(2, 2, 75.0).unwrap();
    // A* = [90, 80, 75], final = [50, 60, 75]: gaps 40, 20, 0.
    assert!((compute_fm(&m).unwrap() - 20.0).abs() < 1e-12);
    let m = AccuracyMatrix::from_columns(&[vec![90.0], vec![50.0, 80.0]]).unwrap();
    assert_eq!(compute_fm(&m).unwrap(), 20.0);
}

#[test]
fn fm_is_zero_for_non_decreasing_accuracy() {
    let m = AccuracyMatrix::from_columns(&[vec![10.0], vec![20.0, 30.0], vec![20.0, 35.0, 50.0]]).unwrap();
    assert_eq!(compute_fm(&m).unwrap(), 0.0);
}

#[test]
fn incomplete_matrix_is_an_error() {
    let m = AccuracyMatrix::new(3);
    assert!(matches!(compute_fm(&m), Err(Error::IncompleteMatrix(_))));
}

fn sequence() -> TaskSequence {
    let cfg = SyntheticConfig {
        num_classes: 6,
        n_train_per_class: 10,
        n_test_per_class: 7,
        ..SyntheticConfig::default()
    };
    make_synthetic_tasks(&cfg, &mut SeedTree::new(3).rng(Stream::Data)).unwrap()
}

fn zero_classifier(seq: &TaskSequence) -> Classifier {
    Classifier::zeros(ClassifierConfig {
        input_dim: seq.input_dim,
        hidden_dims: vec![4],
        num_classes: seq.num_classes,
        init_seed: 0,
    })
    .unwrap()
}

#[test]
fn tied_logits_pick_the_lowest_class() {
    let seq = sequence();
    let clf = zero_classifier(&seq);
    // All logits tie, so every prediction is class 0.
    let mut m = AccuracyMatrix::new(seq.num_tasks());
    evaluate_task_row(&mut m, &clf, &seq, 2).unwrap();
    assert_eq!(m.get(0, 2), Some(50.0));
    assert_eq!(m.get(1, 2), Some(0.0));
    assert_eq!(m.get(2, 2), Some(0.0));
}

#[test]
fn constant_classifier_scores_the_class_fraction() {
    let seq = sequence();
    let mut clf = zero_classifier(&seq);
    // Output bias favouring class 3 makes every prediction 3.
    let last = clf.theta.segments().last().unwrap().clone();
    clf.theta.values_mut()[last.range()][3] = 1.0;
    assert_eq!(accuracy(&clf, &seq.tasks[1].test).unwrap(), 50.0);
    assert_eq!(accuracy(&clf, &seq.tasks[0].test).unwrap(), 0.0);
}

#[test]
fn uniform_classifier_profiles_are_uniform() {
    let seq = sequence();
    let clf = zero_classifier(&seq);
    for row in class_probability_profile(&clf, &seq).unwrap() {
        let row = row.unwrap();
        assert!(row.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }
}

#[test]
fn profiles_and_confusion_rows_are_consistent() {
    let seq = sequence();
    let clf = Classifier::new(ClassifierConfig {
        input_dim: seq.input_dim,
        hidden_dims: vec![8],
        num_classes: seq.num_classes,
        init_seed: 5,
    })
    .unwrap();
    for row in class_probability_profile(&clf, &seq).unwrap() {
        assert!((row.unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let conf = confusion_matrix(&clf, &seq).unwrap();
    for (c, row) in conf.iter().enumerate() {
        let n = seq.tasks.iter().flat_map(|t| &t.test.labels).filter(|&&y| y == c).count();
        assert_eq!(row.iter().sum::<u64>(), n as u64);
    }
}

#[test]
fn matrix_rejects_out_of_range_entries() {
    let mut m = AccuracyMatrix::new(2);
    assert!(m.set(1, 0, 50.0).is_err());
    assert!(m.set(0, 2, 50.0).is_err());
    assert!(m.set(0, 0, -1.0).is_err());
    assert!(m.set(0, 0, 101.0).is_err());
}

proptest! {
    #[test]
    fn fm_is_non_negative(values in proptest::collection::vec(0.0f64..=100.0, 10)) {
        let mut m = AccuracyMatrix::new(4);
        let mut it = values.into_iter();
        for k in 0..4 {
            for t in 0..=k {
                m.set(t, k, it.next().unwrap()).unwrap();
            }
        }
        prop_assert!(compute_fm(&m).unwrap() >= 0.0);
        let acc = compute_acc(&m).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
    }
}
