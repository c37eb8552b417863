//! Finite-difference checks of every training loss, differentiated through
//! all parameters of a small two-layer student.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    combined_objective, cross_entropy_loss, infonce_loss, kd_kl_loss, rrd_loss, LossWeights, DEFAULT_TAU_KD,
    DEFAULT_TAU_S, DEFAULT_TAU_T,
};
use crate::memory_bank::{DistributionMode, MemoryBank, UpdateStrategy};
use crate::nn::{Model, ModelSpec};
use crate::rng;
use crate::tensor::{finite_difference_report, Tensor, DEFAULT_FD_EPS};

/// Problem sizes of one check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GradcheckSizes {
    pub batch: usize,
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub proj: usize,
    pub bank: usize,
}

impl Default for GradcheckSizes {
    fn default() -> Self {
        Self {
            batch: 4,
            input: 3,
            hidden: 16,
            classes: 4,
            proj: 8,
            bank: 16,
        }
    }
}

impl GradcheckSizes {
    /// Parses `batch,input,hidden,classes,proj,bank`.
    pub fn parse(text: &str) -> Result<Self> {
        let v: Vec<usize> = text
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("sizes `{text}`: {e}")))?;
        let [batch, input, hidden, classes, proj, bank] = v[..] else {
            return Err(Error::invalid(format!(
                "sizes `{text}` must list batch,input,hidden,classes,proj,bank"
            )));
        };
        let s = Self {
            batch,
            input,
            hidden,
            classes,
            proj,
            bank,
        };
        if v.contains(&0) || s.bank < s.batch {
            return Err(Error::invalid(format!("sizes `{text}`: all >= 1 and bank >= batch")));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: &'static str,
    pub seed: u64,
    pub max_relative_error: f64,
}

pub const LOSS_NAMES: [&str; 6] = ["rrd_append", "rrd_enqueue_first", "infonce", "kd_kl", "cross_entropy", "combined"];

/// Runs every loss on one random instance and returns the worst relative
/// error for each, compared with central differences of step `1e-5`.
pub fn check_losses(seed: u64, sizes: GradcheckSizes) -> Result<Vec<LossCheck>> {
    let s = sizes;
    let student_spec = ModelSpec::new(&[s.input, s.hidden], s.classes, s.proj);
    let teacher_spec = ModelSpec::new(&[s.input, 2 * s.hidden], s.classes, s.proj);
    let student = Model::init(&student_spec, rng::derive_seed(seed, rng::STUDENT_INIT))?;
    let teacher = Model::init(&teacher_spec, rng::derive_seed(seed, rng::TEACHER_INIT))?.freeze();
    let mut r = rng::stream(seed, rng::DATA);
    let x = Tensor::new((0..s.batch * s.input).map(|_| r.random_range(-2.0..2.0)).collect(), [s.batch, s.input])?;
    let labels: Vec<usize> = (0..s.batch).map(|_| r.random_range(0..s.classes)).collect();
    let t = teacher.forward(&x)?;
    let bank = MemoryBank::new(s.bank, s.proj, UpdateStrategy::Fifo, seed)?;
    let mut queued = bank.clone();
    queued.enqueue_batch(&t.embedding)?;

    let params: Vec<Tensor> = student.parameters().into_iter().map(|(_, p)| p).collect();
    let weights = LossWeights::with_kd();
    let mut out = Vec::with_capacity(LOSS_NAMES.len());
    for name in LOSS_NAMES {
        let f = |p: &[Tensor]| -> Result<Tensor> {
            let out = student.with_parameters(p)?.forward(&x)?;
            match name {
                "rrd_append" => rrd_loss(&out.embedding, &t.embedding, &bank, DEFAULT_TAU_S, DEFAULT_TAU_T, DistributionMode::Append),
                "rrd_enqueue_first" => rrd_loss(
                    &out.embedding,
                    &t.embedding,
                    &queued,
                    DEFAULT_TAU_S,
                    DEFAULT_TAU_T,
                    DistributionMode::EnqueueFirst,
                ),
                "infonce" => infonce_loss(&out.embedding, &t.embedding, &bank, DEFAULT_TAU_S),
                "kd_kl" => kd_kl_loss(&out.logits, &t.logits, DEFAULT_TAU_KD),
                "cross_entropy" => cross_entropy_loss(&out.logits, &labels),
                _ => combined_objective(
                    &cross_entropy_loss(&out.logits, &labels)?,
                    &kd_kl_loss(&out.logits, &t.logits, DEFAULT_TAU_KD)?,
                    &rrd_loss(&out.embedding, &t.embedding, &queued, DEFAULT_TAU_S, DEFAULT_TAU_T, DistributionMode::EnqueueFirst)?,
                    &weights,
                ),
            }
        };
        let report = finite_difference_report(f, &params, DEFAULT_FD_EPS)?;
        out.push(LossCheck {
            loss: name,
            seed,
            max_relative_error: report.max_relative_error,
        });
    }
    Ok(out)
}
