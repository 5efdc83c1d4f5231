//! Class-incremental task sequences: a synthetic Gaussian benchmark and
//! loaders for IDX and CSV files.
//!
//! # File formats
//!
//! IDX files follow the MNIST layout: two zero bytes, a type byte (only
//! `0x08`, unsigned bytes, is accepted), a byte holding the number of
//! dimensions, one big-endian `u32` per dimension, then the raw data. An
//! image file has at least two dimensions (count, then feature dims, which
//! are flattened); a label file has exactly one. Pixels are divided by 255.
//!
//! CSV files have a header `label,f0,f1,…` and one example per row. Feature
//! values are taken as written (they are expected to be in `[0, 1]`
//! already), so writing a task set out and reading it back is lossless.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Online,
    Offline,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Online => "online",
            Protocol::Offline => "offline",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "online" => Some(Protocol::Online),
            "offline" => Some(Protocol::Offline),
            _ => None,
        }
    }
}

/// A set of examples: one feature row per label.
#[derive(Clone, Debug, PartialEq)]
pub struct Examples {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Examples {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self> {
        if !x.is_matrix() || x.rows() != labels.len() {
            return Err(Error::shape(
                "examples",
                format!("{:?} features for {} labels", x.shape(), labels.len()),
            ));
        }
        Ok(Examples { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Examples {
        Examples {
            x: self.x.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train: Examples,
    pub test: Examples,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub protocol: Protocol,
    pub epochs_per_task: usize,
}

impl TaskSequence {
    /// Checks class partitioning and label membership.
    pub fn new(tasks: Vec<TaskSpec>, num_classes: usize, protocol: Protocol, epochs_per_task: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("num_tasks", "at least one task is required"));
        }
        let input_dim = tasks[0].train.x.cols();
        let mut seen = BTreeSet::new();
        for t in &tasks {
            for &c in &t.class_ids {
                if c >= num_classes || !seen.insert(c) {
                    return Err(Error::config("dataset", format!("class {c} repeated or out of range")));
                }
            }
            for ex in [&t.train, &t.test] {
                if ex.x.cols() != input_dim {
                    return Err(Error::shape("task_sequence", "feature width differs between tasks"));
                }
                if let Some(bad) = ex.labels.iter().find(|l| !t.class_ids.contains(l)) {
                    return Err(Error::config(
                        "dataset",
                        format!("label {bad} is not a class of task {}", t.task_id),
                    ));
                }
            }
        }
        if seen.len() != num_classes {
            return Err(Error::config("dataset", "tasks do not cover every class"));
        }
        let mut seq = TaskSequence {
            tasks,
            num_classes,
            input_dim,
            protocol: Protocol::Online,
            epochs_per_task: 1,
        };
        seq.set_protocol(protocol, epochs_per_task)?;
        Ok(seq)
    }

    pub fn set_protocol(&mut self, protocol: Protocol, epochs: usize) -> Result<()> {
        match protocol {
            Protocol::Online if epochs != 1 => {
                return Err(Error::config("epochs", "the online protocol uses exactly one epoch"))
            }
            Protocol::Offline if epochs == 0 => return Err(Error::config("epochs", "must be at least 1")),
            _ => {}
        }
        self.protocol = protocol;
        self.epochs_per_task = epochs;
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks before `task`.
    pub fn classes_before(&self, task: usize) -> Vec<usize> {
        self.tasks[..task].iter().flat_map(|t| t.class_ids.iter().copied()).collect()
    }

    /// Shuffled minibatches of training-row indices for one task. Each epoch
    /// is a fresh permutation; the last batch of an epoch may be short.
    pub fn iterate<R: Rng + ?Sized>(&self, task: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        let spec = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::config("task", format!("no task {task}")))?;
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let n = spec.train.len();
        let mut batches = Vec::new();
        for _ in 0..self.epochs_per_task {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            batches.extend(order.chunks(batch_size).map(<[usize]>::to_vec));
        }
        Ok(batches)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub separation: f64,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 10,
            classes_per_task: 2,
            dim: 32,
            separation: 3.0,
            n_train_per_class: 500,
            n_test_per_class: 100,
        }
    }
}

/// Splits sorted classes `0..C` into `num_tasks` contiguous groups.
pub fn contiguous_partition(num_classes: usize, num_tasks: usize) -> Result<Vec<Vec<usize>>> {
    if num_tasks == 0 || !num_classes.is_multiple_of(num_tasks) {
        return Err(Error::config(
            "num_tasks",
            format!("{num_classes} classes cannot be split evenly into {num_tasks} tasks"),
        ));
    }
    let per = num_classes / num_tasks;
    Ok((0..num_tasks).map(|t| (t * per..(t + 1) * per).collect()).collect())
}

fn group_by_task(
    x: &Tensor,
    labels: &[usize],
    partition: &[Vec<usize>],
) -> Vec<Examples> {
    partition
        .iter()
        .map(|classes| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| classes.contains(&labels[i])).collect();
            Examples {
                x: x.select_rows(&idx),
                labels: idx.iter().map(|&i| labels[i]).collect(),
            }
        })
        .collect()
}

/// Gaussian clusters `N(μ_c, I)` with `μ_c` uniform on the sphere of radius
/// `separation`. Classes go to tasks in index order.
pub fn make_synthetic_tasks<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<TaskSequence> {
    if cfg.num_classes < 2 {
        return Err(Error::config("synthetic.num_classes", "must be at least 2"));
    }
    if cfg.classes_per_task == 0 || !cfg.num_classes.is_multiple_of(cfg.classes_per_task) {
        return Err(Error::config(
            "synthetic.classes_per_task",
            "must divide synthetic.num_classes",
        ));
    }
    if cfg.dim < 2 {
        return Err(Error::config("synthetic.dim", "must be at least 2"));
    }
    if !(cfg.separation >= 0.0 && cfg.separation.is_finite()) {
        return Err(Error::config("synthetic.separation", "must be non-negative"));
    }
    if cfg.n_train_per_class == 0 || cfg.n_test_per_class == 0 {
        return Err(Error::config("synthetic.n_train_per_class", "sample counts must be positive"));
    }
    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / n * cfg.separation).collect()
        })
        .collect();
    let mut draw = |per_class: usize| -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(cfg.num_classes * per_class * cfg.dim);
        let mut labels = Vec::with_capacity(cfg.num_classes * per_class);
        for (c, mu) in means.iter().enumerate() {
            for _ in 0..per_class {
                for m in mu {
                    let z: f64 = StandardNormal.sample(rng);
                    data.push(m + z);
                }
                labels.push(c);
            }
        }
        (Tensor::matrix(labels.len(), cfg.dim, data).unwrap(), labels)
    };
    let (train_x, train_y) = draw(cfg.n_train_per_class);
    let (test_x, test_y) = draw(cfg.n_test_per_class);
    let num_tasks = cfg.num_classes / cfg.classes_per_task;
    build_sequence(cfg.num_classes, num_tasks, (&train_x, &train_y), (&test_x, &test_y))
}

fn build_sequence(
    num_classes: usize,
    num_tasks: usize,
    train: (&Tensor, &[usize]),
    test: (&Tensor, &[usize]),
) -> Result<TaskSequence> {
    let partition = contiguous_partition(num_classes, num_tasks)?;
    let trains = group_by_task(train.0, train.1, &partition);
    let tests = group_by_task(test.0, test.1, &partition);
    let tasks = partition
        .into_iter()
        .zip(trains.into_iter().zip(tests))
        .enumerate()
        .map(|(task_id, (class_ids, (train, test)))| TaskSpec {
            task_id,
            class_ids,
            train,
            test,
        })
        .collect();
    TaskSequence::new(tasks, num_classes, Protocol::Online, 1)
}

/// Location of one split on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataFiles {
    Idx { images: PathBuf, labels: PathBuf },
    Csv(PathBuf),
}

/// Parsed IDX content: dimension sizes and raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let perr = |offset: usize, message: String| Error::Parse { offset, message };
    if bytes.len() < 4 {
        return Err(perr(bytes.len(), "file shorter than the 4-byte magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        let at = if bytes[0] != 0 { 0 } else { 1 };
        return Err(perr(at, format!("bad magic number {:02x?}", &bytes[..4])));
    }
    if bytes[2] != 0x08 {
        return Err(perr(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(perr(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(perr(bytes.len(), "truncated dimension list".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != expected {
        return Err(perr(
            header + body.len().min(expected),
            format!("expected {expected} data bytes, found {}", body.len()),
        ));
    }
    Ok(IdxData {
        dims,
        data: body.to_vec(),
    })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

fn read_idx_pair(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    let img = parse_idx(&std::fs::read(images)?)?;
    let lab = parse_idx(&std::fs::read(labels)?)?;
    if img.dims.len() < 2 || lab.dims.len() != 1 || img.dims[0] != lab.dims[0] {
        return Err(Error::shape(
            "load_idx",
            format!("images {:?} vs labels {:?}", img.dims, lab.dims),
        ));
    }
    let n = img.dims[0];
    let d: usize = img.dims[1..].iter().product();
    let x = Tensor::matrix(n, d, img.data.iter().map(|&b| b as f64 / 255.0).collect())?;
    Ok((x, lab.data.iter().map(|&b| b as usize).collect()))
}

pub fn read_csv(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let file = std::fs::File::open(path)?;
    parse_csv(file)
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    Error::Parse {
        offset,
        message: e.to_string(),
    }
}

pub fn parse_csv<R: std::io::Read>(reader: R) -> Result<(Tensor, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let ok_header = header.get(0) == Some("label")
        && header.len() >= 2
        && header.iter().skip(1).enumerate().all(|(i, h)| h == format!("f{i}"));
    if !ok_header {
        return Err(Error::Parse {
            offset: 0,
            message: "header must be `label,f0,f1,…`".into(),
        });
    }
    let d = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte() as usize);
        let bad = |what: &str| Error::Parse {
            offset,
            message: format!("bad {what}"),
        };
        labels.push(rec[0].trim().parse::<usize>().map_err(|_| bad("label"))?);
        for f in rec.iter().skip(1) {
            let v: f64 = f.trim().parse().map_err(|_| bad("feature"))?;
            if !v.is_finite() {
                return Err(bad("feature"));
            }
            data.push(v);
        }
    }
    Ok((Tensor::matrix(labels.len(), d, data)?, labels))
}

pub fn write_csv(path: &Path, x: &Tensor, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..x.cols()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, l) in labels.iter().enumerate() {
        let mut row = vec![l.to_string()];
        row.extend(x.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_files(files: &DataFiles) -> Result<(Tensor, Vec<usize>)> {
    match files {
        DataFiles::Idx { images, labels } => read_idx_pair(images, labels),
        DataFiles::Csv(p) => read_csv(p),
    }
}

/// Loads train and test splits and cuts the sorted class list into
/// `num_tasks` contiguous tasks. Labels are renumbered to `0..C` in
/// ascending order.
pub fn load_split_image_dataset(train: &DataFiles, test: &DataFiles, num_tasks: usize) -> Result<TaskSequence> {
    let (train_x, train_y) = read_files(train)?;
    let (test_x, test_y) = read_files(test)?;
    if train_x.cols() != test_x.cols() {
        return Err(Error::shape("load_split_image_dataset", "train and test feature widths differ"));
    }
    let classes: Vec<usize> = train_y.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let remap = |labels: &[usize]| -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                classes
                    .binary_search(l)
                    .map_err(|_| Error::config("dataset", format!("test label {l} never appears in training data")))
            })
            .collect()
    };
    let train_y = remap(&train_y)?;
    let test_y = remap(&test_y)?;
    build_sequence(classes.len(), num_tasks, (&train_x, &train_y), (&test_x, &test_y))
}

/// Writes every task's train and test examples to two CSV files.
pub fn write_sequence_csv(seq: &TaskSequence, train_path: &Path, test_path: &Path) -> Result<()> {
    for (path, pick) in [(train_path, true), (test_path, false)] {
        let parts: Vec<&Examples> = seq
            .tasks
            .iter()
            .map(|t| if pick { &t.train } else { &t.test })
            .collect();
        let xs: Vec<&Tensor> = parts.iter().map(|e| &e.x).collect();
        let labels: Vec<usize> = parts.iter().flat_map(|e| e.labels.iter().copied()).collect();
        write_csv(path, &Tensor::vstack(&xs)?, &labels)?;
    }
    Ok(())
}
