//! Training objectives.
//!
//! The relational loss compares two distributions over the memory bank for
//! every sample: a teacher distribution at temperature `tau_t` and a student
//! distribution at `tau_s`. The teacher side is always a constant target;
//! gradients reach the student embeddings only. All batch reductions are
//! arithmetic means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory_bank::{DistributionMode, MemoryBank, UNIT_NORM_TOL};
use crate::tensor::Tensor;

pub const DEFAULT_TAU_S: f64 = 0.1;
pub const DEFAULT_TAU_T: f64 = 0.02;
pub const DEFAULT_TAU_KD: f64 = 4.0;

/// Row-stochastic matrix of probabilities over bank entries.
#[derive(Debug, Clone)]
pub struct SimilarityDistribution {
    probs: Tensor,
    temperature: f64,
}

impl SimilarityDistribution {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Shannon entropy (nats) of each row.
    pub fn row_entropies(&self) -> Vec<f64> {
        (0..self.probs.rows()).map(|i| entropy(self.probs.row(i))).collect()
    }
}

/// Temperature-scaled softmax over raw similarities.
pub fn similarity_distribution(raw: &Tensor, temperature: f64) -> Result<SimilarityDistribution> {
    Ok(SimilarityDistribution {
        probs: raw.softmax_rows(temperature)?,
        temperature,
    })
}

/// Weights and temperatures of the full objective
/// `L_sup + lambda_kd·L_KD + beta_rrd·L_RRD`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub beta_rrd: f64,
    pub tau_kd: f64,
    pub tau_s: f64,
    pub tau_t: f64,
}

impl LossWeights {
    /// RRD combined with logit distillation.
    pub fn with_kd() -> Self {
        Self {
            lambda_kd: 0.9,
            beta_rrd: 1.5,
            ..Self::rrd_only()
        }
    }

    /// RRD on its own (no logit distillation term).
    pub fn rrd_only() -> Self {
        Self {
            lambda_kd: 0.0,
            beta_rrd: 1.0,
            tau_kd: DEFAULT_TAU_KD,
            tau_s: DEFAULT_TAU_S,
            tau_t: DEFAULT_TAU_T,
        }
    }

    /// Supervised cross-entropy only.
    pub fn supervised() -> Self {
        Self {
            lambda_kd: 0.0,
            beta_rrd: 0.0,
            ..Self::rrd_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_kd", self.lambda_kd), ("beta_rrd", self.beta_rrd)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {w}")));
            }
        }
        for (name, t) in [("tau_kd", self.tau_kd), ("tau_s", self.tau_s), ("tau_t", self.tau_t)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::with_kd()
    }
}

fn check_embeddings(student: &Tensor, teacher: &Tensor) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            op: "relational loss embeddings",
            left: student.shape(),
            right: teacher.shape(),
        });
    }
    for (who, t) in [("student", student), ("teacher", teacher)] {
        for i in 0..t.rows() {
            let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::Degenerate {
                    op: "relational loss",
                    msg: format!("{who} embedding row {i} has norm {norm}, expected 1"),
                });
            }
        }
    }
    Ok(())
}

fn check_temperature(name: &str, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("{name} must be positive, got {tau}")));
    }
    Ok(())
}

/// Teacher and student similarity matrices for one batch. The teacher matrix
/// is built from a detached copy and carries no graph.
fn relational_similarities(
    student_emb: &Tensor,
    teacher_emb: &Tensor,
    bank: &MemoryBank,
    mode: DistributionMode,
) -> Result<(Tensor, Tensor)> {
    let teacher = teacher_emb.detach();
    match mode {
        DistributionMode::Append => Ok((
            bank.extended_similarities(&teacher, &teacher)?,
            bank.extended_similarities(student_emb, &teacher)?,
        )),
        DistributionMode::EnqueueFirst => {
            Ok((bank.similarities(&teacher)?, bank.similarities(student_emb)?))
        }
    }
}

/// Teacher-side distribution (constant) of the relational loss.
pub fn teacher_distribution(
    teacher_emb: &Tensor,
    bank: &MemoryBank,
    tau_t: f64,
    mode: DistributionMode,
) -> Result<SimilarityDistribution> {
    let (t_sims, _) = relational_similarities(teacher_emb, teacher_emb, bank, mode)?;
    similarity_distribution(&t_sims, tau_t)
}

/// Relational representation distillation loss: the batch mean of the
/// cross-entropy `−Σ_j p^T_j log p^S_j` between the teacher's and student's
/// similarity distributions over the bank.
///
/// In [`DistributionMode::EnqueueFirst`] the caller must already have
/// written the teacher batch into `bank`.
pub fn rrd_loss(
    student_emb: &Tensor,
    teacher_emb: &Tensor,
    bank: &MemoryBank,
    tau_s: f64,
    tau_t: f64,
    mode: DistributionMode,
) -> Result<Tensor> {
    check_temperature("tau_s", tau_s)?;
    check_temperature("tau_t", tau_t)?;
    check_embeddings(student_emb, teacher_emb)?;
    let (t_sims, s_sims) = relational_similarities(student_emb, teacher_emb, bank, mode)?;
    let target = t_sims.softmax_rows(tau_t)?;
    let log_student = s_sims.log_softmax_rows(tau_s)?;
    let n = student_emb.rows() as f64;
    Ok(target.mul(&log_student)?.sum().mul_scalar(-1.0 / n))
}

/// InfoNCE with the sample's own teacher embedding as the positive and the
/// bank rows as negatives; the positive also appears in the denominator.
pub fn infonce_loss(
    student_emb: &Tensor,
    teacher_emb: &Tensor,
    bank: &MemoryBank,
    tau: f64,
) -> Result<Tensor> {
    check_temperature("tau", tau)?;
    check_embeddings(student_emb, teacher_emb)?;
    let sims = bank.extended_similarities(student_emb, &teacher_emb.detach())?;
    let positive = vec![bank.capacity(); student_emb.rows()];
    Ok(sims.log_softmax_rows(tau)?.gather(&positive)?.mean()?.neg())
}

/// Hinton-style logit distillation: batch mean of
/// `τ²·KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn kd_kl_loss(student_logits: &Tensor, teacher_logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature("tau", tau)?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kd_kl_loss",
            left: student_logits.shape(),
            right: teacher_logits.shape(),
        });
    }
    let teacher = teacher_logits.detach();
    let p_t = teacher.softmax_rows(tau)?;
    let log_p_t = teacher.log_softmax_rows(tau)?;
    let log_p_s = student_logits.log_softmax_rows(tau)?;
    let n = student_logits.rows() as f64;
    Ok(p_t.mul(&log_p_t.sub(&log_p_s)?)?.sum().mul_scalar(tau * tau / n))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if labels.len() != logits.rows() {
        return Err(Error::invalid(format!(
            "cross_entropy_loss: {} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(logits.log_softmax_rows(1.0)?.gather(labels)?.mean()?.neg())
}

/// `sup + lambda_kd·kd + beta_rrd·rrd`.
pub fn combined_objective(
    sup: &Tensor,
    kd: &Tensor,
    rrd: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    for t in [sup, kd, rrd] {
        t.item()?;
    }
    sup.add(&kd.mul_scalar(weights.lambda_kd))?
        .add(&rrd.mul_scalar(weights.beta_rrd))
}

/// `Σ p log(p/q)`; terms with `p = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.ln()))
        .sum()
}

/// `−Σ p log q`
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * q.ln())
        .sum::<f64>()
}

/// `−Σ p log p`
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}
