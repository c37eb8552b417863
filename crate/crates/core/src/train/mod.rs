//! Teacher pretraining, the distillation loop and their persistence.
//!
//! Both trainers are stepwise: construct, then call `run_epoch` until done.
//! A checkpoint taken before the first epoch holds the initialization.

mod checkpoint;
mod config;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedParameter, FORMAT_VERSION, MAGIC};
pub use config::{BankConfig, Config, EvalConfig, LrDecay, ProbeSettings, Seeds, TrainConfig};
pub use optim::{sgd_update, zero_velocity};

use crate::data::{batch_iterator, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::top1_accuracy;
use crate::fsutil::write_atomic;
use crate::losses::{cross_entropy_loss, kd_kl_loss, rrd_loss, LossWeights};
use crate::memory_bank::{DistributionMode, MemoryBank, UpdateStrategy};
use crate::nn::{LinearLayer, Model, ModelSpec};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// One-based epoch the row summarizes.
    pub epoch: usize,
    pub split: &'static str,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_kd: f64,
    pub loss_rrd: f64,
    pub top1: f64,
}

/// Per-epoch train and test metrics, serialized as CSV with columns
/// `epoch,split,loss_total,loss_sup,loss_kd,loss_rrd,top1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,split,loss_total,loss_sup,loss_kd,loss_rrd,top1";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.split, r.loss_total, r.loss_sup, r.loss_kd, r.loss_rrd, r.top1
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &MetricsRow> + '_ {
        let split = split.to_string();
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn last(&self, split: &str) -> Option<&MetricsRow> {
        self.split(split).last()
    }
}

/// Result of a completed training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// The trained model, frozen.
    pub model: Model,
    pub log: MetricsLog,
}

#[derive(Default)]
struct Accumulator {
    samples: usize,
    correct: f64,
    total: f64,
    sup: f64,
    kd: f64,
    rrd: f64,
}

impl Accumulator {
    fn add(&mut self, n: usize, top1: f64, total: f64, sup: f64, kd: f64, rrd: f64) {
        let w = n as f64;
        self.samples += n;
        self.correct += top1 * w;
        self.total += total * w;
        self.sup += sup * w;
        self.kd += kd * w;
        self.rrd += rrd * w;
    }

    fn row(&self, epoch: usize, split: &'static str) -> MetricsRow {
        let n = self.samples as f64;
        MetricsRow {
            epoch,
            split,
            loss_total: self.total / n,
            loss_sup: self.sup / n,
            loss_kd: self.kd / n,
            loss_rrd: self.rrd / n,
            top1: self.correct / n,
        }
    }
}

fn check_dataset(spec: &ModelSpec, dataset: &Dataset, who: &str) -> Result<()> {
    if dataset.dim() != spec.input_dim() {
        return Err(Error::invalid(format!(
            "{who} expects {} input features, dataset has {}",
            spec.input_dim(),
            dataset.dim()
        )));
    }
    if dataset.num_classes() > spec.num_classes {
        return Err(Error::invalid(format!(
            "{who} has {} classes, dataset has {}",
            spec.num_classes,
            dataset.num_classes()
        )));
    }
    Ok(())
}

fn finite(value: f64, epoch: usize, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged {
            epoch,
            what: what.to_string(),
        })
    }
}

fn gradients(params: &[Tensor]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

fn step_lr(train: &TrainConfig, epoch: usize, total_epochs: usize) -> f64 {
    train.learning_rate * train.lr_decay.multiplier(epoch, total_epochs)
}

/// Pretrains the teacher with cross-entropy on its classifier plus an
/// auxiliary linear classifier on the normalized embedding, so the
/// projection head is trained too. The auxiliary head is discarded.
pub struct TeacherTrainer<'a> {
    config: Config,
    dataset: &'a Dataset,
    template: Model,
    /// Teacher parameters followed by the auxiliary weight and bias.
    values: Vec<Vec<f64>>,
    velocity: Vec<Vec<f64>>,
    aux_shape: [usize; 2],
    epoch: usize,
    log: MetricsLog,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(config: &Config, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let spec = &config.model_teacher;
        check_dataset(spec, dataset, "teacher")?;
        let template = Model::init(spec, rng::derive_seed(config.seeds.init, rng::TEACHER_INIT))?;
        let aux = LinearLayer::he_init(
            spec.proj_dim,
            spec.num_classes,
            true,
            &mut rng::stream(config.seeds.init, rng::AUX_HEAD_INIT),
        );
        let mut values = template.parameter_values();
        values.push(aux.weight.data().to_vec());
        values.push(aux.bias.data().to_vec());
        let velocity = zero_velocity(&values);
        Ok(Self {
            config: config.clone(),
            dataset,
            template,
            values,
            velocity,
            aux_shape: [spec.proj_dim, spec.num_classes],
            epoch: 0,
            log: MetricsLog::default(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.train.teacher_epochs
    }

    fn split_values(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        self.values.split_at(self.values.len() - 2)
    }

    /// The teacher as currently trained, frozen.
    pub fn model(&self) -> Result<Model> {
        self.template.freeze().with_parameter_values(self.split_values().0)
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let n = self.values.len() - 2;
        Ok(Checkpoint::from_model(
            &self.model()?,
            self.velocity[..n].to_vec(),
            None,
            self.config.to_json(),
            self.epoch,
            self.config.seeds,
        ))
    }

    fn losses(&self, model: &Model, aux: &LinearLayer, x: &Tensor, y: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let out = model.forward(x)?;
        let sup = cross_entropy_loss(&out.logits, y)?;
        let aux_ce = cross_entropy_loss(&aux.forward(&out.embedding)?, y)?;
        Ok((sup.add(&aux_ce)?, sup, out.logits))
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let t = self.config.train.clone();
        let epoch_no = self.epoch + 1;
        let lr = step_lr(&t, self.epoch, t.teacher_epochs);
        let mut acc = Accumulator::default();
        for batch in batch_iterator(self.dataset, Split::Train, t.batch_size, self.config.seeds.shuffle, self.epoch)? {
            let (model_vals, aux_vals) = self.split_values();
            let model = self.template.with_parameter_values(model_vals)?;
            let aux = LinearLayer {
                weight: Tensor::param(aux_vals[0].clone(), self.aux_shape)?,
                bias: Tensor::param(aux_vals[1].clone(), [1, self.aux_shape[1]])?,
            };
            let (total, sup, logits) = self.losses(&model, &aux, &batch.features, &batch.labels)?;
            let total_v = finite(total.item()?, epoch_no, "teacher loss")?;
            total.backward()?;
            let mut params: Vec<Tensor> = model.parameters().into_iter().map(|(_, p)| p).collect();
            params.push(aux.weight.clone());
            params.push(aux.bias.clone());
            let grads = gradients(&params);
            sgd_update(&mut self.values, &grads, lr, t.momentum, t.weight_decay, &mut self.velocity)?;
            let top1 = top1_accuracy(&logits, &batch.labels)?;
            acc.add(batch.labels.len(), top1, total_v, sup.item()?, 0.0, 0.0);
        }
        self.log.rows.push(acc.row(epoch_no, "train"));

        let model = self.model()?;
        let (aux_w, aux_b) = (&self.split_values().1[0], &self.split_values().1[1]);
        let aux = LinearLayer {
            weight: Tensor::new(aux_w.clone(), self.aux_shape)?,
            bias: Tensor::new(aux_b.clone(), [1, self.aux_shape[1]])?,
        };
        let (x, y) = self.dataset.split(Split::Test);
        if !y.is_empty() {
            let (total, sup, logits) = self.losses(&model, &aux, &x, &y)?;
            let mut test = Accumulator::default();
            test.add(y.len(), top1_accuracy(&logits, &y)?, total.item()?, sup.item()?, 0.0, 0.0);
            self.log.rows.push(test.row(epoch_no, "test"));
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.run_epoch()?;
            log::info!("teacher epoch {} done: {:?}", self.epoch, self.log.rows.last());
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint()?,
            model: self.model()?,
            log: self.log,
        })
    }
}

pub fn train_teacher(config: &Config, dataset: &Dataset) -> Result<TrainOutcome> {
    TeacherTrainer::new(config, dataset)?.run()
}

/// Batch losses of the student objective. Terms whose weight is zero are
/// never computed and report 0.
struct StudentLosses {
    total: Tensor,
    sup: Tensor,
    kd: Option<Tensor>,
    rrd: Option<Tensor>,
    logits: Tensor,
}

/// Trains the student with `CE + λ·KD + β·RRD` against a frozen teacher.
/// Per batch: teacher forward, student forward, bank update (before the loss
/// in enqueue-first mode, after it in append mode), backward, SGD step on
/// the student only.
pub struct Distiller<'a> {
    config: Config,
    dataset: &'a Dataset,
    teacher: Option<Model>,
    /// Teacher logits and embeddings for every dataset row, computed once.
    /// Rows of a forward pass do not depend on the rest of the batch, so
    /// gathering from here equals a per-batch teacher forward bit for bit.
    teacher_outputs: Option<(Tensor, Tensor)>,
    template: Model,
    values: Vec<Vec<f64>>,
    velocity: Vec<Vec<f64>>,
    bank: Option<MemoryBank>,
    epoch: usize,
    log: MetricsLog,
}

fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * t.cols());
    for &i in indices {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(data, [indices.len(), t.cols()])
}

impl<'a> Distiller<'a> {
    /// `teacher` may be omitted only when both distillation weights are 0.
    pub fn new(config: &Config, teacher: Option<&Checkpoint>, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let w = config.loss;
        check_dataset(&config.model_student, dataset, "student")?;
        let teacher = teacher.map(|c| c.model(&config.model_teacher)).transpose()?;
        let needs_teacher = w.lambda_kd > 0.0 || w.beta_rrd > 0.0;
        if needs_teacher && teacher.is_none() {
            return Err(Error::invalid("distillation weights are nonzero but no teacher was given"));
        }
        let proj = config.model_student.proj_dim;
        if let Some(t) = &teacher {
            if t.spec().proj_dim != proj {
                return Err(Error::invalid(format!(
                    "student embeds into {proj} dims, teacher into {}",
                    t.spec().proj_dim
                )));
            }
        }
        let bank = if w.beta_rrd > 0.0 {
            let b = &config.bank;
            if b.strategy == UpdateStrategy::Fifo && config.train.batch_size > b.capacity {
                return Err(Error::Config {
                    path: "bank.capacity".into(),
                    msg: format!("FIFO bank of {} rows cannot take batches of {}", b.capacity, config.train.batch_size),
                });
            }
            Some(MemoryBank::new(b.capacity, proj, b.strategy, config.seeds.bank)?)
        } else {
            None
        };
        let teacher_outputs = match &teacher {
            Some(t) if needs_teacher => {
                check_dataset(t.spec(), dataset, "teacher")?;
                let out = t.forward(dataset.features())?;
                Some((out.logits, out.embedding))
            }
            _ => None,
        };
        let template = Model::init(&config.model_student, rng::derive_seed(config.seeds.init, rng::STUDENT_INIT))?;
        let values = template.parameter_values();
        let velocity = zero_velocity(&values);
        Ok(Self {
            config: config.clone(),
            dataset,
            teacher,
            teacher_outputs,
            template,
            values,
            velocity,
            bank,
            epoch: 0,
            log: MetricsLog::default(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.train.epochs
    }

    pub fn model(&self) -> Result<Model> {
        self.template.freeze().with_parameter_values(&self.values)
    }

    pub fn teacher(&self) -> Option<&Model> {
        self.teacher.as_ref()
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_model(
            &self.model()?,
            self.velocity.clone(),
            self.bank.clone(),
            self.config.to_json(),
            self.epoch,
            self.config.seeds,
        ))
    }

    fn update_bank(bank: &mut MemoryBank, indices: &[usize], embedding: &Tensor) -> Result<()> {
        match bank.strategy() {
            UpdateStrategy::Fifo => bank.enqueue_batch(embedding),
            UpdateStrategy::Momentum { .. } => {
                // Slots must be distinct within one update; colliding samples
                // are applied in later chunks, in batch order.
                let k = bank.capacity();
                let mut start = 0;
                while start < indices.len() {
                    let mut seen = std::collections::HashSet::new();
                    let mut end = start;
                    while end < indices.len() && seen.insert(indices[end] % k) {
                        end += 1;
                    }
                    let slots: Vec<usize> = indices[start..end].iter().map(|i| i % k).collect();
                    let rows: Vec<f64> = (start..end).flat_map(|r| embedding.row(r).to_vec()).collect();
                    bank.momentum_update(&slots, &Tensor::new(rows, [end - start, embedding.cols()])?)?;
                    start = end;
                }
                Ok(())
            }
        }
    }

    /// Student losses on one batch. With `update`, the bank is written as
    /// in training; otherwise it is only read.
    fn losses(&mut self, student: &Model, batch: &Batch, update: bool) -> Result<StudentLosses> {
        let w: LossWeights = self.config.loss;
        let s = student.forward(&batch.features)?;
        let sup = cross_entropy_loss(&s.logits, &batch.labels)?;
        let mut total = sup.clone();
        let t = match &self.teacher_outputs {
            Some((logits, emb)) => Some((gather_rows(logits, &batch.indices)?, gather_rows(emb, &batch.indices)?)),
            None => None,
        };
        let mut kd = None;
        if w.lambda_kd > 0.0 {
            let (t_logits, _) = t.as_ref().expect("teacher present");
            let l = kd_kl_loss(&s.logits, t_logits, w.tau_kd)?;
            total = total.add(&l.mul_scalar(w.lambda_kd))?;
            kd = Some(l);
        }
        let mut rrd = None;
        if let Some(bank) = self.bank.as_mut() {
            let (_, t_emb) = t.as_ref().expect("teacher present");
            let mode = self.config.bank.mode;
            if update && mode == DistributionMode::EnqueueFirst {
                Self::update_bank(bank, &batch.indices, t_emb)?;
            }
            let l = rrd_loss(&s.embedding, t_emb, bank, w.tau_s, w.tau_t, mode)?;
            if update && mode == DistributionMode::Append {
                Self::update_bank(bank, &batch.indices, t_emb)?;
            }
            total = total.add(&l.mul_scalar(w.beta_rrd))?;
            rrd = Some(l);
        }
        Ok(StudentLosses {
            total,
            sup,
            kd,
            rrd,
            logits: s.logits,
        })
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let t = self.config.train.clone();
        let epoch_no = self.epoch + 1;
        let lr = step_lr(&t, self.epoch, t.epochs);
        let mut acc = Accumulator::default();
        let batches: Vec<Batch> =
            batch_iterator(self.dataset, Split::Train, t.batch_size, self.config.seeds.shuffle, self.epoch)?.collect();
        for batch in &batches {
            let student = self.template.with_parameter_values(&self.values)?;
            let l = self.losses(&student, batch, true)?;
            let total = finite(l.total.item()?, epoch_no, "distillation loss")?;
            l.total.backward()?;
            let params: Vec<Tensor> = student.parameters().into_iter().map(|(_, p)| p).collect();
            sgd_update(&mut self.values, &gradients(&params), lr, t.momentum, t.weight_decay, &mut self.velocity)?;
            let value = |x: &Option<Tensor>| x.as_ref().map_or(Ok(0.0), Tensor::item);
            acc.add(
                batch.labels.len(),
                top1_accuracy(&l.logits, &batch.labels)?,
                total,
                l.sup.item()?,
                value(&l.kd)?,
                value(&l.rrd)?,
            );
        }
        self.log.rows.push(acc.row(epoch_no, "train"));

        let test_idx = self.dataset.indices(Split::Test);
        if !test_idx.is_empty() {
            let (features, labels) = self.dataset.select(&test_idx);
            let batch = Batch {
                indices: test_idx,
                features,
                labels,
            };
            let student = self.model()?;
            let l = self.losses(&student, &batch, false)?;
            let value = |x: &Option<Tensor>| x.as_ref().map_or(Ok(0.0), Tensor::item);
            let mut test = Accumulator::default();
            test.add(
                batch.labels.len(),
                top1_accuracy(&l.logits, &batch.labels)?,
                l.total.item()?,
                l.sup.item()?,
                value(&l.kd)?,
                value(&l.rrd)?,
            );
            self.log.rows.push(test.row(epoch_no, "test"));
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.run_epoch()?;
            log::info!("student epoch {} done: {:?}", self.epoch, self.log.rows.last());
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint()?,
            model: self.model()?,
            log: self.log,
        })
    }
}

pub fn distill(config: &Config, teacher: &Checkpoint, dataset: &Dataset) -> Result<TrainOutcome> {
    Distiller::new(config, Some(teacher), dataset)?.run()
}

/// Trains the student with cross-entropy alone, ignoring the distillation
/// weights in `config`.
pub fn train_supervised(config: &Config, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.loss.lambda_kd = 0.0;
    config.loss.beta_rrd = 0.0;
    Distiller::new(&config, None, dataset)?.run()
}
