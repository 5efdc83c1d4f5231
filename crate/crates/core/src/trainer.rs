//! The per-task training loop tying classifier steps, DDN meta-updates and
//! buffer maintenance together.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferBatch, InsertOutcome, MemoryBuffer};
use crate::datasets::{Examples, TaskSequence};
use crate::error::{Error, Result};
use crate::meta::{hypergradient, outer_step, MetaConfig, Optimizer, OuterBatch};
use crate::metrics::{evaluate_task_row, AccuracyMatrix, MetricsReport};
use crate::models::{one_hot, Classifier, ClassifierConfig, Ddn, DdnConfig, SoftLabelBatch};
use crate::rng::{Rng, SeedTree, Stream};
use crate::strategies::{
    classifier_step, l2y_step, label_smooth, random_soft_labels, L2yState, LabelSource, Replay, StepLosses,
    StrategyConfig, StrategyKind,
};
use crate::tensor_core::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub strategy: StrategyConfig,
    pub meta: MetaConfig,
    /// Classifier SGD learning rate.
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub classifier_hidden: Vec<usize>,
    pub ddn_hidden: Vec<usize>,
    pub beta: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            strategy: StrategyConfig::new(StrategyKind::Er),
            meta: MetaConfig::default(),
            lr: 0.03,
            batch_size: 32,
            buffer_capacity: 100,
            classifier_hidden: vec![100, 100],
            ddn_hidden: vec![200, 200],
            beta: 0.9,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        self.strategy.validate()?;
        self.meta.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("buffer.capacity", "must be at least 1"));
        }
        if (self.meta.alpha - self.strategy.alpha).abs() > 0.0 {
            return Err(Error::config("meta.alpha", "must equal strategy.alpha"));
        }
        Ok(())
    }
}

/// How often each component ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub classifier_steps: u64,
    pub replay_steps: u64,
    pub ddn_label_calls: u64,
    pub ddn_updates: u64,
    pub l2y_updates: u64,
}

/// One row of the per-iteration log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub iteration: u64,
    pub task: usize,
    pub losses: StepLosses,
    pub inner_loss: Option<f64>,
    pub outer_loss_before: Option<f64>,
    pub outer_loss_after: Option<f64>,
    pub gm_objective: Option<f64>,
}

pub const DIAGNOSTICS_HEADER: &str =
    "iteration,task,loss_new,loss_replay,loss_logit,loss_total,inner_loss,outer_loss_before,outer_loss_after,gm_objective";

impl DiagnosticRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6e}"));
        format!(
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{},{}",
            self.iteration,
            self.task + 1,
            self.losses.new,
            self.losses.replay,
            self.losses.logit,
            self.losses.total,
            opt(self.inner_loss),
            opt(self.outer_loss_before),
            opt(self.outer_loss_after),
            opt(self.gm_objective)
        )
    }
}

/// Complete training state for one seed.
pub struct Learner {
    cfg: TrainerConfig,
    pub classifier: Classifier,
    pub ddn: Ddn,
    ddn_optimizer: Optimizer,
    pub buffer: MemoryBuffer,
    pub l2y: L2yState,
    batch_rng: Rng,
    meta_rng: Rng,
    ablation_rng: Rng,
    pub counters: Counters,
    pub diagnostics: Vec<DiagnosticRow>,
    pub matrix: AccuracyMatrix,
    iteration: u64,
}

impl Learner {
    pub fn new(cfg: TrainerConfig, seq: &TaskSequence, seeds: &SeedTree) -> Result<Self> {
        cfg.validate()?;
        let c = seq.num_classes;
        let classifier = Classifier::with_rng(
            ClassifierConfig {
                input_dim: seq.input_dim,
                hidden_dims: cfg.classifier_hidden.clone(),
                num_classes: c,
                init_seed: seeds.seed_for(Stream::Init),
            },
            &mut seeds.rng(Stream::Init),
        )?;
        let ddn = Ddn::with_rng(
            DdnConfig {
                num_classes: c,
                hidden_dims: cfg.ddn_hidden.clone(),
                beta: cfg.beta,
                init_seed: seeds.seed_for(Stream::DdnInit),
            },
            &mut seeds.rng(Stream::DdnInit),
        )?;
        let ddn_optimizer = Optimizer::new(cfg.meta.optimizer, cfg.meta.gamma, ddn.omega.total_len());
        let buffer = MemoryBuffer::new(
            cfg.buffer_capacity,
            c,
            seeds.rng(Stream::Buffer),
            seeds.rng(Stream::Replay),
        )?;
        Ok(Learner {
            cfg,
            classifier,
            ddn,
            ddn_optimizer,
            buffer,
            l2y: L2yState::new(),
            batch_rng: seeds.rng(Stream::Batch),
            meta_rng: seeds.rng(Stream::Meta),
            ablation_rng: seeds.rng(Stream::Ablation),
            counters: Counters::default(),
            diagnostics: Vec::new(),
            matrix: AccuracyMatrix::new(seq.num_tasks()),
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    fn replay_labels(&mut self, batch: &BufferBatch) -> Result<Option<SoftLabelBatch>> {
        Ok(match self.cfg.strategy.label_source() {
            LabelSource::OneHot => None,
            LabelSource::Ddn => {
                self.counters.ddn_label_calls += 1;
                Some(self.ddn.make_soft_labels(
                    &self.classifier,
                    &batch.x,
                    &batch.y_onehot,
                    batch.sources.clone(),
                )?)
            }
            LabelSource::Random => Some(random_soft_labels(
                &batch.y_onehot,
                batch.sources.clone(),
                &mut self.ablation_rng,
            )),
            LabelSource::LabelSmooth(eps) => Some(label_smooth(&batch.y_onehot, eps, batch.sources.clone())?),
            LabelSource::L2y => Some(self.l2y.batch(&batch.sources)?),
        })
    }

    /// Half of the validation batch comes from the current minibatch, half
    /// from buffer items of earlier tasks (all from the minibatch when there
    /// are none).
    fn outer_batch(&mut self, new: &Examples, task: usize) -> Result<(Tensor, Tensor)> {
        let b = self.cfg.meta.outer_batch;
        let old: Vec<usize> = (0..self.buffer.len())
            .filter(|&i| self.buffer.items()[i].task_id < task)
            .collect();
        let n_old = if old.is_empty() { 0 } else { b / 2 };
        let n_new = (b - n_old).min(new.len());
        let pick_new = index::sample(&mut self.meta_rng, new.len(), n_new).into_vec();
        let pick_old: Vec<usize> = if n_old <= old.len() {
            index::sample(&mut self.meta_rng, old.len(), n_old)
                .into_iter()
                .map(|i| old[i])
                .collect()
        } else {
            (0..n_old)
                .map(|_| old[self.meta_rng.random_range(0..old.len())])
                .collect()
        };
        let part_new = new.select(&pick_new);
        let mut labels = part_new.labels.clone();
        let mut x = part_new.x;
        if !pick_old.is_empty() {
            let ob = self.buffer.batch(&pick_old)?;
            x = Tensor::vstack(&[&x, &ob.x])?;
            labels.extend(&ob.labels);
        }
        Ok((x, one_hot(&labels, self.buffer.num_classes())))
    }

    fn iterate_once(&mut self, seq: &TaskSequence, task: usize, idx: &[usize]) -> Result<()> {
        let c = seq.num_classes;
        let new = seq.tasks[task].train.select(idx);
        let new_y = one_hot(&new.labels, c);
        let strategy = self.cfg.strategy.clone();
        let masked = if strategy.kind == StrategyKind::ErAce {
            seq.classes_before(task)
        } else {
            Vec::new()
        };

        let replay_batch = if task > 0 && !self.buffer.is_empty() {
            let indices = self.buffer.sample_indices(self.cfg.batch_size)?;
            Some(self.buffer.batch(&indices)?)
        } else {
            None
        };
        let soft = match &replay_batch {
            Some(b) => self.replay_labels(b)?,
            None => None,
        };
        let losses = classifier_step(
            &strategy,
            &mut self.classifier,
            self.cfg.lr,
            &new.x,
            &new_y,
            replay_batch.as_ref().map(|batch| Replay {
                batch,
                soft_labels: soft.as_ref(),
            }),
            &masked,
        )?;
        self.counters.classifier_steps += 1;
        if replay_batch.is_some() {
            self.counters.replay_steps += 1;
        }

        let mut row = DiagnosticRow {
            iteration: self.iteration,
            task,
            losses,
            inner_loss: None,
            outer_loss_before: None,
            outer_loss_after: None,
            gm_objective: None,
        };
        let source = strategy.label_source();
        let meta_active = task > 0 && !self.buffer.is_empty() && matches!(source, LabelSource::Ddn | LabelSource::L2y);
        if meta_active {
            for _ in 0..self.cfg.meta.steps_per_iter {
                let inner_idx = self.buffer.sample_indices_with(self.cfg.meta.inner_batch, &mut self.meta_rng)?;
                let inner = self.buffer.batch(&inner_idx)?;
                let (ox, oy) = self.outer_batch(&new, task)?;
                let outer = OuterBatch { x: &ox, targets: &oy };
                let (inner_loss, before, after, gm) = if source == LabelSource::Ddn {
                    self.counters.ddn_label_calls += 1;
                    let hg = hypergradient(&self.classifier, &self.ddn, &inner.x, &inner.y_onehot, outer, &self.cfg.meta)?;
                    outer_step(&mut self.ddn, &hg, &mut self.ddn_optimizer)?;
                    self.counters.ddn_updates += 1;
                    (hg.inner_loss, hg.outer_loss_before, hg.outer_loss_after, hg.gm_objective)
                } else {
                    let r = l2y_step(
                        &mut self.l2y,
                        &self.classifier,
                        &inner,
                        outer,
                        self.cfg.meta.eta,
                        self.cfg.meta.alpha,
                        self.cfg.meta.gamma,
                    )?;
                    self.counters.l2y_updates += 1;
                    (r.inner_loss, r.outer_loss_before, r.outer_loss_after, r.gm_objective)
                };
                row.inner_loss = Some(inner_loss);
                row.outer_loss_before = Some(before);
                row.outer_loss_after = Some(after);
                row.gm_objective = Some(gm);
            }
        }

        let mut changed = false;
        for (i, &label) in new.labels.iter().enumerate() {
            let outcome = self.buffer.offer_example(new.x.row(i).to_vec(), label, task)?;
            changed |= outcome != InsertOutcome::Discarded;
        }
        if changed {
            if strategy.kind == StrategyKind::DerPP {
                self.buffer.update_stored_logits(&self.classifier)?;
            }
            if source == LabelSource::L2y {
                let live: Vec<u64> = self.buffer.items().iter().map(|it| it.stream_index).collect();
                self.l2y.retain(&live);
                for it in self.buffer.items() {
                    self.l2y.ensure(it.stream_index, &it.y_onehot);
                }
            }
        }
        self.diagnostics.push(row);
        self.iteration += 1;
        Ok(())
    }

    /// Trains on task `task`, snapshots the DDN and records accuracies.
    pub fn train_task(&mut self, seq: &TaskSequence, task: usize) -> Result<()> {
        if seq.tasks.get(task).is_none_or(|t| t.train.is_empty()) {
            return Err(Error::config("task", format!("task {task} has no training data")));
        }
        let batches = seq.iterate(task, self.cfg.batch_size, &mut self.batch_rng)?;
        for idx in &batches {
            self.iterate_once(seq, task, idx)?;
        }
        if self.cfg.strategy.use_ddn {
            self.ddn.snapshot_old();
        }
        evaluate_task_row(&mut self.matrix, &self.classifier, seq, task)
    }

    /// Trains every task in order and summarizes.
    pub fn run(&mut self, seq: &TaskSequence) -> Result<MetricsReport> {
        for task in 0..seq.num_tasks() {
            self.train_task(seq, task)?;
        }
        MetricsReport::build(self.matrix.clone(), &self.classifier, seq)
    }
}
