//! Accuracy bookkeeping across tasks and the derived summary metrics.

use serde::{Deserialize, Serialize};

use crate::datasets::{Examples, TaskSequence};
use crate::error::{Error, Result};
use crate::models::Classifier;

/// `A[t][k]`: accuracy in percent on task `t` after training task `k`
/// (`t ≤ k`), plus the running best per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    entries: Vec<Vec<Option<f64>>>,
    best: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            entries: vec![vec![None; num_tasks]; num_tasks],
            best: vec![None; num_tasks],
        }
    }

    /// Builds a matrix from columns: `columns[k]` holds `A[0..=k][k]`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(columns.len());
        for (k, col) in columns.iter().enumerate() {
            if col.len() != k + 1 {
                return Err(Error::IncompleteMatrix(format!("column {k} has {} entries", col.len())));
            }
            for (t, &v) in col.iter().enumerate() {
                m.set(t, k, v)?;
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.best.len()
    }

    pub fn set(&mut self, t: usize, k: usize, value: f64) -> Result<()> {
        let n = self.num_tasks();
        if t > k || k >= n {
            return Err(Error::config("accuracy_matrix", format!("entry ({t}, {k}) outside t ≤ k < {n}")));
        }
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::config("accuracy_matrix", format!("accuracy {value} outside [0, 100]")));
        }
        self.entries[t][k] = Some(value);
        self.best[t] = Some(self.best[t].map_or(value, |b: f64| b.max(value)));
        Ok(())
    }

    pub fn get(&self, t: usize, k: usize) -> Option<f64> {
        self.entries.get(t)?.get(k).copied().flatten()
    }

    pub fn best(&self, t: usize) -> Option<f64> {
        self.best.get(t).copied().flatten()
    }

    /// Entries `A[0..=k][k]`, padded with `None` for later tasks.
    pub fn column(&self, k: usize) -> Vec<Option<f64>> {
        (0..self.num_tasks()).map(|t| self.get(t, k)).collect()
    }

    pub fn final_column(&self) -> Result<Vec<f64>> {
        let last = self
            .num_tasks()
            .checked_sub(1)
            .ok_or_else(|| Error::IncompleteMatrix("no tasks".into()))?;
        self.column(last)
            .into_iter()
            .enumerate()
            .map(|(t, v)| v.ok_or_else(|| Error::IncompleteMatrix(format!("A[{t}][{last}] missing"))))
            .collect()
    }
}

pub fn compute_acc(m: &AccuracyMatrix) -> Result<f64> {
    let col = m.final_column()?;
    Ok(col.iter().sum::<f64>() / col.len() as f64)
}

pub fn compute_fm(m: &AccuracyMatrix) -> Result<f64> {
    let col = m.final_column()?;
    let gaps: f64 = col
        .iter()
        .enumerate()
        .map(|(t, v)| m.best(t).unwrap() - v)
        .sum();
    Ok(gaps / col.len() as f64)
}

/// Percent of `examples` whose argmax over all classes is the true label.
pub fn accuracy(classifier: &Classifier, examples: &Examples) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::IncompleteMatrix("empty test set".into()));
    }
    let pred = classifier.forward(&examples.x)?.argmax_rows();
    let hits = pred.iter().zip(&examples.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / examples.len() as f64)
}

/// Fills column `k` with the accuracy on every task seen so far.
pub fn evaluate_task_row(m: &mut AccuracyMatrix, classifier: &Classifier, seq: &TaskSequence, k: usize) -> Result<()> {
    for t in 0..=k {
        let a = accuracy(classifier, &seq.tasks[t].test)?;
        m.set(t, k, a)?;
    }
    Ok(())
}

/// `counts[true][predicted]` over all test sets.
pub fn confusion_matrix(classifier: &Classifier, seq: &TaskSequence) -> Result<Vec<Vec<u64>>> {
    let c = seq.num_classes;
    let mut counts = vec![vec![0u64; c]; c];
    for task in &seq.tasks {
        let pred = classifier.forward(&task.test.x)?.argmax_rows();
        for (p, &y) in pred.iter().zip(&task.test.labels) {
            counts[y][*p] += 1;
        }
    }
    Ok(counts)
}

/// Mean softmax output per true class over all test sets. Classes without
/// test examples get `None`.
pub fn class_probability_profile(classifier: &Classifier, seq: &TaskSequence) -> Result<Vec<Option<Vec<f64>>>> {
    let c = seq.num_classes;
    let mut sums = vec![vec![0.0; c]; c];
    let mut counts = vec![0usize; c];
    for task in &seq.tasks {
        let p = classifier.probabilities(&task.test.x)?;
        for (i, &y) in task.test.labels.iter().enumerate() {
            for (s, v) in sums[y].iter_mut().zip(p.row(i)) {
                *s += v;
            }
            counts[y] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(row, n)| (n > 0).then(|| row.iter().map(|s| s / n as f64).collect()))
        .collect())
}

/// End-of-run metrics for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub fm: f64,
    pub per_task_final: Vec<f64>,
    pub matrix: AccuracyMatrix,
    pub confusion: Vec<Vec<u64>>,
    pub class_prob_profiles: Vec<Option<Vec<f64>>>,
}

impl MetricsReport {
    pub fn build(matrix: AccuracyMatrix, classifier: &Classifier, seq: &TaskSequence) -> Result<Self> {
        Ok(MetricsReport {
            acc: compute_acc(&matrix)?,
            fm: compute_fm(&matrix)?,
            per_task_final: matrix.final_column()?,
            confusion: confusion_matrix(classifier, seq)?,
            class_prob_profiles: class_probability_profile(classifier, seq)?,
            matrix,
        })
    }
}
