use super::{Tensor, NORM_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(super) enum Op {
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(f64),
    Neg,
    Exp,
    Log,
    Relu,
    Sum,
    Mean,
    SumRows,
    MatMul,
    Transpose,
    AddRow,
    ConcatCols,
    RowDot,
    Gather(Vec<usize>),
    RowNormalize,
    Softmax(f64),
    LogSoftmax(f64),
}

impl Op {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::AddRow => "add_row",
            Op::ConcatCols => "concat_cols",
            Op::RowDot => "row_dot",
            Op::Gather(_) => "gather",
            Op::RowNormalize => "row_l2_normalize",
            Op::Softmax(_) => "softmax_rows",
            Op::LogSoftmax(_) => "log_softmax_rows",
        }
    }

    /// Vector-Jacobian products for each input. `out` is the forward value,
    /// `g` the upstream gradient with the output's shape. Entries are `None`
    /// for inputs that do not require gradients.
    pub(super) fn backward(
        &self,
        inputs: &[Tensor],
        out: &[f64],
        out_shape: [usize; 2],
        g: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let wants = |i: usize| inputs[i].requires_grad();
        let unary = |f: &dyn Fn() -> Vec<f64>| vec![wants(0).then(f)];
        match self {
            Op::Add => vec![wants(0).then(|| g.to_vec()), wants(1).then(|| g.to_vec())],
            Op::Sub => vec![
                wants(0).then(|| g.to_vec()),
                wants(1).then(|| g.iter().map(|v| -v).collect()),
            ],
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    wants(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    wants(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::AddScalar => unary(&|| g.to_vec()),
            Op::MulScalar(c) => unary(&|| g.iter().map(|v| v * c).collect()),
            Op::Neg => unary(&|| g.iter().map(|v| -v).collect()),
            Op::Exp => unary(&|| g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log => unary(&|| {
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(g, x)| g / x)
                    .collect()
            }),
            Op::Relu => unary(&|| {
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect()
            }),
            Op::Sum => unary(&|| vec![g[0]; inputs[0].len()]),
            Op::Mean => unary(&|| {
                let n = inputs[0].len() as f64;
                vec![g[0] / n; inputs[0].len()]
            }),
            Op::SumRows => unary(&|| {
                let c = inputs[0].cols();
                g.iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect()
            }),
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let [n, d] = a.shape();
                let m = b.cols();
                vec![
                    // g · bᵀ
                    wants(0).then(|| matmul_nt(g, b.data(), n, m, d)),
                    // aᵀ · g
                    wants(1).then(|| matmul_tn(a.data(), g, n, d, m)),
                ]
            }
            Op::Transpose => unary(&|| transpose(g, out_shape[0], out_shape[1])),
            Op::AddRow => {
                let m = out_shape[1];
                vec![
                    wants(0).then(|| g.to_vec()),
                    wants(1).then(|| {
                        let mut acc = vec![0.0; m];
                        for row in g.chunks_exact(m) {
                            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        acc
                    }),
                ]
            }
            Op::ConcatCols => {
                let p = inputs[0].cols();
                let q = inputs[1].cols();
                let w = p + q;
                vec![
                    wants(0).then(|| g.chunks_exact(w).flat_map(|r| r[..p].to_vec()).collect()),
                    wants(1).then(|| g.chunks_exact(w).flat_map(|r| r[p..].to_vec()).collect()),
                ]
            }
            Op::RowDot => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let d = a.cols();
                let scale = |other: &Tensor| -> Vec<f64> {
                    other
                        .data()
                        .chunks_exact(d)
                        .zip(g)
                        .flat_map(|(row, gi)| row.iter().map(move |v| v * gi))
                        .collect()
                };
                vec![wants(0).then(|| scale(b)), wants(1).then(|| scale(a))]
            }
            Op::Gather(idx) => unary(&|| {
                let c = inputs[0].cols();
                let mut gx = vec![0.0; inputs[0].len()];
                for (i, (&j, gi)) in idx.iter().zip(g).enumerate() {
                    gx[i * c + j] = *gi;
                }
                gx
            }),
            Op::RowNormalize => unary(&|| {
                let d = out_shape[1];
                let mut gx = Vec::with_capacity(out.len());
                for ((x, y), gr) in inputs[0]
                    .data()
                    .chunks_exact(d)
                    .zip(out.chunks_exact(d))
                    .zip(g.chunks_exact(d))
                {
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gy: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(y).map(|(gi, yi)| (gi - yi * gy) / norm));
                }
                gx
            }),
            Op::Softmax(tau) => unary(&|| {
                let m = out_shape[1];
                let mut gx = Vec::with_capacity(out.len());
                for (y, gr) in out.chunks_exact(m).zip(g.chunks_exact(m)) {
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(y).map(|(gi, yi)| yi * (gi - dot) / tau));
                }
                gx
            }),
            Op::LogSoftmax(tau) => unary(&|| {
                let m = out_shape[1];
                let mut gx = Vec::with_capacity(out.len());
                for (y, gr) in out.chunks_exact(m).zip(g.chunks_exact(m)) {
                    let total: f64 = gr.iter().sum();
                    gx.extend(gr.iter().zip(y).map(|(gi, yi)| (gi - yi.exp() * total) / tau));
                }
                gx
            }),
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// a[n×d] · b[d×m]
fn matmul_nn(a: &[f64], b: &[f64], n: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for k in 0..d {
            let aik = a[i * d + k];
            let brow = &b[k * m..(k + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aik * bv);
        }
    }
    out
}

/// g[n×m] · b[d×m]ᵀ → n×d
fn matmul_nt(g: &[f64], b: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for k in 0..d {
            let brow = &b[k * m..(k + 1) * m];
            out[i * d + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a[n×d]ᵀ · g[n×m] → d×m
fn matmul_tn(a: &[f64], g: &[f64], n: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for k in 0..d {
            let aik = a[i * d + k];
            let orow = &mut out[k * m..(k + 1) * m];
            orow.iter_mut().zip(grow).for_each(|(o, gv)| *o += aik * gv);
        }
    }
    out
}

fn check_temperature(op: &'static str, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("{op}: temperature must be positive, got {tau}")));
    }
    Ok(())
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op.name())?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(data, self.shape(), op, vec![self.clone(), other.clone()]))
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(data, self.shape(), op, vec![self.clone()])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Sub, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, Op::Mul, |a, b| a * b)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(Op::AddScalar, |v| v + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.map(Op::MulScalar(c), |v| v * c)
    }

    pub fn div_scalar(&self, c: f64) -> Result<Tensor> {
        if c == 0.0 || !c.is_finite() {
            return Err(Error::Domain {
                op: "div_scalar",
                msg: format!("divisor must be finite and non-zero, got {c}"),
            });
        }
        Ok(self.mul_scalar(1.0 / c))
    }

    pub fn neg(&self) -> Tensor {
        self.map(Op::Neg, |v| -v)
    }

    pub fn exp(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "exp",
                msg: format!("non-finite input {v}"),
            });
        }
        Ok(self.map(Op::Exp, f64::exp))
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("input must be positive and finite, got {v}"),
            });
        }
        Ok(self.map(Op::Log, f64::ln))
    }

    pub fn relu(&self) -> Tensor {
        self.map(Op::Relu, |v| v.max(0.0))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], [1, 1], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let m = self.data().iter().sum::<f64>() / self.len() as f64;
        Ok(Tensor::from_op(vec![m], [1, 1], Op::Mean, vec![self.clone()]))
    }

    /// Per-row sums, `N×M → N×1`.
    pub fn sum_rows(&self) -> Tensor {
        let data = self
            .data()
            .chunks_exact(self.cols().max(1))
            .map(|r| r.iter().sum())
            .collect::<Vec<f64>>();
        let data = if self.cols() == 0 { vec![0.0; self.rows()] } else { data };
        Tensor::from_op(data, [self.rows(), 1], Op::SumRows, vec![self.clone()])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [n, d] = self.shape();
        let [d2, m] = other.shape();
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = matmul_nn(self.data(), other.data(), n, d, m);
        Ok(Tensor::from_op(data, [n, m], Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape();
        let data = transpose(self.data(), r, c);
        Tensor::from_op(data, [c, r], Op::Transpose, vec![self.clone()])
    }

    /// Adds a `1×M` row to every row of an `N×M` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if row.rows() != 1 || row.cols() != self.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let data = self
            .data()
            .chunks_exact(self.cols().max(1))
            .flat_map(|r| r.iter().zip(row.data()).map(|(a, b)| a + b))
            .collect();
        Ok(Tensor::from_op(data, self.shape(), Op::AddRow, vec![self.clone(), row.clone()]))
    }

    /// `[self | other]` along the column axis.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (p, q) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.len() + other.len());
        for i in 0..self.rows() {
            data.extend_from_slice(&self.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&other.data()[i * q..(i + 1) * q]);
        }
        Ok(Tensor::from_op(
            data,
            [self.rows(), p + q],
            Op::ConcatCols,
            vec![self.clone(), other.clone()],
        ))
    }

    /// Row-wise inner products, `N×D, N×D → N×1`.
    pub fn row_dot(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "row_dot")?;
        let d = self.cols();
        let data = (0..self.rows())
            .map(|i| {
                self.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&other.data()[i * d..(i + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(Tensor::from_op(data, [self.rows(), 1], Op::RowDot, vec![self.clone(), other.clone()]))
    }

    /// Picks column `index[i]` from row `i`, `N×M → N×1`.
    pub fn gather(&self, index: &[usize]) -> Result<Tensor> {
        if index.len() != self.rows() {
            return Err(Error::invalid(format!(
                "gather: {} indices for {} rows",
                index.len(),
                self.rows()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= self.cols()) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of range for {} columns",
                self.cols()
            )));
        }
        let data = index.iter().enumerate().map(|(i, &j)| self.get(i, j)).collect();
        Ok(Tensor::from_op(data, [self.rows(), 1], Op::Gather(index.to_vec()), vec![self.clone()]))
    }

    /// Scales each row onto the unit sphere.
    pub fn row_l2_normalize(&self) -> Result<Tensor> {
        let d = self.cols();
        let mut data = Vec::with_capacity(self.len());
        for (i, row) in self.data().chunks_exact(d.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) || !norm.is_finite() {
                return Err(Error::Degenerate {
                    op: "row_l2_normalize",
                    msg: format!("row {i} has norm {norm}"),
                });
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        Ok(Tensor::from_op(data, self.shape(), Op::RowNormalize, vec![self.clone()]))
    }

    /// Row-wise `exp(x_j/τ) / Σ_k exp(x_k/τ)`, max-shifted for stability.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        check_temperature("softmax_rows", temperature)?;
        let m = self.cols();
        if m == 0 {
            return Err(Error::invalid("softmax_rows: zero columns"));
        }
        let mut data = Vec::with_capacity(self.len());
        for row in self.data().chunks_exact(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|v| ((v - max) / temperature).exp()));
            let total: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|v| *v /= total);
        }
        Ok(Tensor::from_op(data, self.shape(), Op::Softmax(temperature), vec![self.clone()]))
    }

    /// Row-wise log of [`Tensor::softmax_rows`] via a stable log-sum-exp.
    pub fn log_softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        check_temperature("log_softmax_rows", temperature)?;
        let m = self.cols();
        if m == 0 {
            return Err(Error::invalid("log_softmax_rows: zero columns"));
        }
        let mut data = Vec::with_capacity(self.len());
        for row in self.data().chunks_exact(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| (v - max) / temperature - lse));
        }
        Ok(Tensor::from_op(data, self.shape(), Op::LogSoftmax(temperature), vec![self.clone()]))
    }
}
