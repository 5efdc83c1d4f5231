//! Fixed-capacity replay memory filled by reservoir sampling.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{one_hot, Classifier};
use crate::rng::Rng as StreamRng;
use crate::tensor_core::Tensor;

/// One stored example.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferItem {
    pub x: Vec<f64>,
    pub label: usize,
    pub y_onehot: Vec<f64>,
    /// Logits captured at insertion (DER++ only).
    pub stored_logits: Option<Vec<f64>>,
    /// Position in the training stream; unique per item.
    pub stream_index: u64,
    pub task_id: usize,
}

impl BufferItem {
    pub fn new(x: Vec<f64>, label: usize, num_classes: usize, stream_index: u64, task_id: usize) -> Self {
        let mut y_onehot = vec![0.0; num_classes];
        y_onehot[label] = 1.0;
        BufferItem {
            x,
            label,
            y_onehot,
            stored_logits: None,
            stream_index,
            task_id,
        }
    }
}

/// What happened to an offered item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Appended,
    Replaced { slot: usize },
    Discarded,
}

/// Vitter's algorithm R over arbitrary items.
#[derive(Clone, Debug, PartialEq)]
pub struct Reservoir<T> {
    capacity: usize,
    items: Vec<T>,
    seen: u64,
}

impl<T> Reservoir<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer.capacity", "must be at least 1"));
        }
        Ok(Reservoir {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [T] {
        &mut self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Keeps `item` with probability `capacity / (seen + 1)` once full,
    /// evicting a uniformly chosen slot.
    pub fn offer<R: Rng + ?Sized>(&mut self, item: T, rng: &mut R) -> InsertOutcome {
        let outcome = if self.items.len() < self.capacity {
            self.items.push(item);
            InsertOutcome::Appended
        } else {
            let j = rng.random_range(0..=self.seen);
            if j < self.capacity as u64 {
                self.items[j as usize] = item;
                InsertOutcome::Replaced { slot: j as usize }
            } else {
                InsertOutcome::Discarded
            }
        };
        self.seen += 1;
        outcome
    }

    pub(crate) fn restore(capacity: usize, items: Vec<T>, seen: u64) -> Result<Self> {
        let mut r = Reservoir::new(capacity)?;
        if items.len() as u64 != seen.min(capacity as u64) {
            return Err(Error::config(
                "buffer",
                format!("{} items inconsistent with seen={seen}, capacity={capacity}", items.len()),
            ));
        }
        r.items = items;
        r.seen = seen;
        Ok(r)
    }
}

/// A replay minibatch assembled into tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferBatch {
    pub x: Tensor,
    pub y_onehot: Tensor,
    pub labels: Vec<usize>,
    pub sources: Vec<u64>,
    pub task_ids: Vec<usize>,
    /// Present only when every item carries stored logits.
    pub stored_logits: Option<Tensor>,
    /// Stream index of the first item lacking stored logits, if any.
    pub missing_logits: Option<u64>,
}

impl BufferBatch {
    pub fn from_items(items: &[&BufferItem], num_classes: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let rows: Vec<&[f64]> = items.iter().map(|it| it.x.as_slice()).collect();
        let x = Tensor::from_rows(&rows)?;
        let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
        let stored_logits = if items.iter().all(|it| it.stored_logits.is_some()) {
            let rows: Vec<&[f64]> = items
                .iter()
                .map(|it| it.stored_logits.as_deref().unwrap())
                .collect();
            Some(Tensor::from_rows(&rows)?)
        } else {
            None
        };
        let missing_logits = items
            .iter()
            .find(|it| it.stored_logits.is_none())
            .map(|it| it.stream_index);
        Ok(BufferBatch {
            missing_logits,
            x,
            y_onehot: one_hot(&labels, num_classes),
            labels,
            sources: items.iter().map(|it| it.stream_index).collect(),
            task_ids: items.iter().map(|it| it.task_id).collect(),
            stored_logits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reservoir of [`BufferItem`]s with separate generators for insertion
/// decisions and minibatch draws.
#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    pub(crate) reservoir: Reservoir<BufferItem>,
    pub(crate) num_classes: usize,
    pub(crate) insert_rng: StreamRng,
    pub(crate) sample_rng: StreamRng,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, num_classes: usize, insert_rng: StreamRng, sample_rng: StreamRng) -> Result<Self> {
        Ok(MemoryBuffer {
            reservoir: Reservoir::new(capacity)?,
            num_classes,
            insert_rng,
            sample_rng,
        })
    }

    pub fn capacity(&self) -> usize {
        self.reservoir.capacity()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.reservoir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reservoir.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.reservoir.seen()
    }

    pub fn items(&self) -> &[BufferItem] {
        self.reservoir.items()
    }

    pub fn reservoir_insert(&mut self, item: BufferItem) -> Result<InsertOutcome> {
        let ones = item.y_onehot.iter().filter(|&&v| v == 1.0).count();
        let zeros = item.y_onehot.iter().filter(|&&v| v == 0.0).count();
        if item.y_onehot.len() != self.num_classes || ones != 1 || ones + zeros != self.num_classes {
            return Err(Error::shape("reservoir_insert", "y_onehot is not a one-hot vector"));
        }
        if item.y_onehot[item.label] != 1.0 {
            return Err(Error::shape("reservoir_insert", "label disagrees with y_onehot"));
        }
        if let Some(l) = &item.stored_logits {
            if l.len() != self.num_classes {
                return Err(Error::shape("reservoir_insert", "stored logits length"));
            }
        }
        Ok(self.reservoir.offer(item, &mut self.insert_rng))
    }

    /// Offers an example whose stream index is the running count of offers.
    pub fn offer_example(&mut self, x: Vec<f64>, label: usize, task_id: usize) -> Result<InsertOutcome> {
        let item = BufferItem::new(x, label, self.num_classes, self.seen(), task_id);
        self.reservoir_insert(item)
    }

    /// Slot indices for a minibatch of `b`, drawn with `rng`.
    pub fn sample_indices_with<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<usize>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyBuffer);
        }
        if b == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(if b > n {
            (0..b).map(|_| rng.random_range(0..n)).collect()
        } else {
            index::sample(rng, n, b).into_vec()
        })
    }

    pub fn sample_indices(&mut self, b: usize) -> Result<Vec<usize>> {
        let mut rng = self.sample_rng.clone();
        let idx = self.sample_indices_with(b, &mut rng)?;
        self.sample_rng = rng;
        Ok(idx)
    }

    pub fn sample_minibatch(&mut self, b: usize) -> Result<Vec<BufferItem>> {
        let idx = self.sample_indices(b)?;
        Ok(idx.into_iter().map(|i| self.items()[i].clone()).collect())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<BufferBatch> {
        let items: Vec<&BufferItem> = indices.iter().map(|&i| &self.items()[i]).collect();
        BufferBatch::from_items(&items, self.num_classes)
    }

    /// Fills in logits for items stored without them; existing logits stay.
    /// Returns how many items were updated.
    pub fn update_stored_logits(&mut self, classifier: &Classifier) -> Result<usize> {
        if classifier.num_classes() != self.num_classes {
            return Err(Error::shape("update_stored_logits", "class count mismatch"));
        }
        let missing: Vec<usize> = (0..self.len())
            .filter(|&i| self.items()[i].stored_logits.is_none())
            .collect();
        if missing.is_empty() {
            return Ok(0);
        }
        let rows: Vec<&[f64]> = missing.iter().map(|&i| self.items()[i].x.as_slice()).collect();
        let logits = classifier.forward(&Tensor::from_rows(&rows)?)?;
        let items = self.reservoir.items_mut();
        for (r, &i) in missing.iter().enumerate() {
            items[i].stored_logits = Some(logits.row(r).to_vec());
        }
        Ok(missing.len())
    }
}
