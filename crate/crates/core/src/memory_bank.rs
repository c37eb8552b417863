//! Fixed-capacity store of unit-norm teacher embeddings.
//!
//! Rows live in `K` slots. A FIFO bank writes new rows at a cursor that wraps
//! around, so the oldest row is always the one under the cursor. A momentum
//! bank never replaces rows; each update blends a new embedding into an
//! existing slot with an exponential moving average and re-projects the
//! result onto the unit sphere.
//!
//! Similarity columns are reported in slot order. The relational losses are
//! invariant to a common permutation of bank entries, so slot order and age
//! order give identical losses.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tensor, NORM_EPS};

/// Rows handed to the bank must be unit-norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-6;

pub const DEFAULT_CAPACITY: usize = 16384;
pub const DEFAULT_MOMENTUM: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStrategy {
    Fifo,
    /// `m ← normalize(α·m + (1−α)·z)`
    Momentum { alpha: f64 },
}

impl UpdateStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UpdateStrategy::Fifo => Ok(()),
            UpdateStrategy::Momentum { alpha } if alpha > 0.0 && alpha < 1.0 => Ok(()),
            UpdateStrategy::Momentum { alpha } => Err(Error::invalid(format!(
                "momentum coefficient must lie in (0, 1), got {alpha}"
            ))),
        }
    }
}

/// How the similarity distributions are assembled during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    /// Each sample sees the `K` stored rows plus its own teacher embedding
    /// appended as entry `K+1`; the bank is updated after the loss.
    Append,
    /// The teacher batch is written to the bank first and every sample sees
    /// the resulting `K` rows.
    EnqueueFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    /// `capacity × dim`, row-major, one unit-norm row per slot.
    storage: Vec<f64>,
    strategy: UpdateStrategy,
    write_cursor: usize,
    total_enqueued: u64,
}

fn check_unit_rows(op: &'static str, x: &Tensor) -> Result<()> {
    for i in 0..x.rows() {
        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Degenerate {
                op,
                msg: format!("row {i} has norm {norm}, expected 1"),
            });
        }
    }
    Ok(())
}

impl MemoryBank {
    /// Fills every slot with a normalized Gaussian draw so the bank is usable
    /// from the first step.
    pub fn new(capacity: usize, dim: usize, strategy: UpdateStrategy, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "memory bank needs capacity and dim >= 1, got {capacity}×{dim}"
            )));
        }
        strategy.validate()?;
        let mut rng = rng::stream(seed, rng::BANK_INIT);
        let mut storage = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            loop {
                let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > NORM_EPS {
                    storage.extend(row.iter().map(|v| v / norm));
                    break;
                }
            }
        }
        Ok(Self {
            capacity,
            dim,
            storage,
            strategy,
            write_cursor: 0,
            total_enqueued: 0,
        })
    }

    /// Builds a bank from explicit contents, oldest first.
    pub fn from_rows(rows: &Tensor, strategy: UpdateStrategy) -> Result<Self> {
        Self::from_parts(rows.rows(), rows.cols(), rows.data().to_vec(), strategy, 0, 0)
    }

    /// Restores a bank from its raw state (slot-order storage).
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        storage: Vec<f64>,
        strategy: UpdateStrategy,
        write_cursor: usize,
        total_enqueued: u64,
    ) -> Result<Self> {
        if capacity == 0 || dim == 0 || storage.len() != capacity * dim {
            return Err(Error::invalid(format!(
                "memory bank of {capacity}×{dim} cannot hold {} values",
                storage.len()
            )));
        }
        if write_cursor >= capacity {
            return Err(Error::invalid(format!(
                "write cursor {write_cursor} outside capacity {capacity}"
            )));
        }
        strategy.validate()?;
        check_unit_rows("memory bank contents", &Tensor::new(storage.clone(), [capacity, dim])?)?;
        Ok(Self {
            capacity,
            dim,
            storage,
            strategy,
            write_cursor,
            total_enqueued,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn strategy(&self) -> UpdateStrategy {
        self.strategy
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn total_enqueued(&self) -> u64 {
        self.total_enqueued
    }

    /// Number of usable rows. The bank is pre-filled, so this is always `K`.
    pub fn initialized_count(&self) -> usize {
        self.capacity
    }

    pub fn storage(&self) -> &[f64] {
        &self.storage
    }

    pub fn slot(&self, k: usize) -> &[f64] {
        &self.storage[k * self.dim..(k + 1) * self.dim]
    }

    /// Rows from oldest to newest. For a momentum bank this is slot order.
    pub fn rows_oldest_first(&self) -> Vec<&[f64]> {
        (0..self.capacity)
            .map(|i| self.slot((self.write_cursor + i) % self.capacity))
            .collect()
    }

    /// Replaces the `N` oldest rows with the rows of `features`.
    pub fn enqueue_batch(&mut self, features: &Tensor) -> Result<()> {
        if self.strategy != UpdateStrategy::Fifo {
            return Err(Error::invalid("enqueue_batch called on a momentum bank"));
        }
        self.check_dim("enqueue_batch", features)?;
        let n = features.rows();
        if n > self.capacity {
            return Err(Error::invalid(format!(
                "cannot enqueue {n} rows into a bank of capacity {}",
                self.capacity
            )));
        }
        check_unit_rows("enqueue_batch", features)?;
        for i in 0..n {
            let k = self.write_cursor;
            self.storage[k * self.dim..(k + 1) * self.dim].copy_from_slice(features.row(i));
            self.write_cursor = (k + 1) % self.capacity;
        }
        self.total_enqueued += n as u64;
        Ok(())
    }

    /// Blends row `i` of `features` into slot `indices[i]`. Slots must be
    /// distinct within one call.
    pub fn momentum_update(&mut self, indices: &[usize], features: &Tensor) -> Result<()> {
        let UpdateStrategy::Momentum { alpha } = self.strategy else {
            return Err(Error::invalid("momentum_update called on a FIFO bank"));
        };
        self.check_dim("momentum_update", features)?;
        if indices.len() != features.rows() {
            return Err(Error::invalid(format!(
                "momentum_update: {} indices for {} rows",
                indices.len(),
                features.rows()
            )));
        }
        let mut seen = vec![false; self.capacity];
        for &k in indices {
            if k >= self.capacity {
                return Err(Error::invalid(format!(
                    "momentum_update: slot {k} out of range for capacity {}",
                    self.capacity
                )));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::invalid(format!("momentum_update: slot {k} repeated")));
            }
        }
        check_unit_rows("momentum_update", features)?;
        for (i, &k) in indices.iter().enumerate() {
            let slot = &mut self.storage[k * self.dim..(k + 1) * self.dim];
            for (m, z) in slot.iter_mut().zip(features.row(i)) {
                *m = alpha * *m + (1.0 - alpha) * z;
            }
            let norm = slot.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                // Only reachable when z ≈ −m·α/(1−α), i.e. antipodal with a tiny α.
                return Err(Error::Degenerate {
                    op: "momentum_update",
                    msg: format!("slot {k} collapsed to norm {norm}"),
                });
            }
            slot.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(())
    }

    /// Constant `d × K` matrix whose columns are the stored rows.
    fn transposed(&self) -> Tensor {
        let (k, d) = (self.capacity, self.dim);
        let mut t = vec![0.0; k * d];
        for slot in 0..k {
            for j in 0..d {
                t[j * k + slot] = self.storage[slot * d + j];
            }
        }
        Tensor::new(t, [d, k]).expect("sized buffer")
    }

    fn check_dim(&self, op: &'static str, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape(),
                right: [x.rows(), self.dim],
            });
        }
        Ok(())
    }

    /// `N×K` inner products against every slot. Differentiable in `z_query`;
    /// the bank itself is a constant.
    pub fn similarities(&self, z_query: &Tensor) -> Result<Tensor> {
        self.check_dim("similarities", z_query)?;
        z_query.matmul(&self.transposed())
    }

    /// `N×(K+1)`: the `K` slot similarities followed by `z_query_i · z_append_i`.
    pub fn extended_similarities(&self, z_query: &Tensor, z_append: &Tensor) -> Result<Tensor> {
        self.check_dim("extended_similarities", z_query)?;
        if z_append.shape() != z_query.shape() {
            return Err(Error::ShapeMismatch {
                op: "extended_similarities",
                left: z_query.shape(),
                right: z_append.shape(),
            });
        }
        self.similarities(z_query)?.concat_cols(&z_query.row_dot(z_append)?)
    }
}
