//! Evaluation: accuracy, teacher/student logit-correlation alignment, linear
//! probing of frozen features and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::losses::cross_entropy_loss;
use crate::nn::{LinearLayer, Model};
use crate::rng;
use crate::tensor::Tensor;

/// Fraction of rows whose argmax equals the label. Ties go to the lowest
/// class index.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::invalid("top1_accuracy on empty logits"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::invalid(format!(
            "top1_accuracy: {} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `C×C` Pearson correlation between the logit columns over the rows.
pub fn logit_correlation_matrix(logits: &Tensor) -> Result<Vec<f64>> {
    let (n, c) = (logits.rows(), logits.cols());
    if n < 2 {
        return Err(Error::invalid(format!("correlation needs at least 2 samples, got {n}")));
    }
    let mut centered = vec![0.0; n * c];
    let mut norms = vec![0.0; c];
    for j in 0..c {
        let mean = (0..n).map(|i| logits.get(i, j)).sum::<f64>() / n as f64;
        let mut ss = 0.0;
        for i in 0..n {
            let d = logits.get(i, j) - mean;
            centered[i * c + j] = d;
            ss += d * d;
        }
        if !(ss > 0.0) {
            return Err(Error::Degenerate {
                op: "logit correlation",
                msg: format!("class {j} has zero logit variance"),
            });
        }
        norms[j] = ss.sqrt();
    }
    let mut corr = vec![0.0; c * c];
    for a in 0..c {
        for b in a..c {
            let dot: f64 = (0..n).map(|i| centered[i * c + a] * centered[i * c + b]).sum();
            let r = (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0);
            corr[a * c + b] = r;
            corr[b * c + a] = r;
        }
    }
    Ok(corr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationDiff {
    pub classes: usize,
    /// Teacher minus student correlation, `classes × classes`, row-major.
    pub diff: Vec<f64>,
    /// Mean of `|diff|` over all `C²` entries, diagonal included.
    pub mean_abs: f64,
    pub max_abs: f64,
}

impl CorrelationDiff {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.diff[a * self.classes + b]
    }

    /// Header `class,c0..c{C-1}`, then one row per class.
    pub fn to_csv(&self) -> String {
        let c = self.classes;
        let mut s = String::from("class");
        for j in 0..c {
            write!(s, ",c{j}").expect("writing to a String");
        }
        s.push('\n');
        for a in 0..c {
            write!(s, "{a}").expect("writing to a String");
            for b in 0..c {
                write!(s, ",{}", self.get(a, b)).expect("writing to a String");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Difference between the teacher's and the student's inter-class logit
/// correlation matrices over the same samples; smaller means the student
/// reproduces more of the teacher's class-similarity structure.
pub fn logit_correlation_difference(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<CorrelationDiff> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "logit_correlation_difference",
            left: teacher_logits.shape(),
            right: student_logits.shape(),
        });
    }
    let t = logit_correlation_matrix(teacher_logits)?;
    let s = logit_correlation_matrix(student_logits)?;
    let diff: Vec<f64> = t.iter().zip(&s).map(|(a, b)| a - b).collect();
    let mean_abs = diff.iter().map(|d| d.abs()).sum::<f64>() / diff.len() as f64;
    let max_abs = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(CorrelationDiff {
        classes: teacher_logits.cols(),
        diff,
        mean_abs,
        max_abs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            steps: 200,
            learning_rate: 0.1,
            seed,
        }
    }
}

/// Trains a linear classifier on the frozen encoder's backbone features of
/// the train split with full-batch gradient descent and returns its test
/// split accuracy.
pub fn linear_probe_transfer(encoder: &Model, dataset: &Dataset, probe: &ProbeConfig) -> Result<f64> {
    if !encoder.is_frozen() {
        return Err(Error::invalid("linear probe requires a frozen encoder"));
    }
    if probe.steps == 0 || !(probe.learning_rate > 0.0) {
        return Err(Error::invalid("probe needs steps >= 1 and a positive learning rate"));
    }
    let (x_train, y_train) = dataset.split(Split::Train);
    let (x_test, y_test) = dataset.split(Split::Test);
    if y_train.is_empty() || y_test.is_empty() {
        return Err(Error::invalid("probe dataset needs non-empty train and test splits"));
    }
    let f_train = encoder.features(&x_train)?;
    let f_test = encoder.features(&x_test)?;
    let init = LinearLayer::he_init(
        f_train.cols(),
        dataset.num_classes(),
        false,
        &mut rng::stream(probe.seed, rng::PROBE_INIT),
    );
    let (w_shape, b_shape) = (init.weight.shape(), init.bias.shape());
    let mut w = init.weight.data().to_vec();
    let mut b = init.bias.data().to_vec();
    for step in 0..probe.steps {
        let layer = LinearLayer {
            weight: Tensor::param(w.clone(), w_shape)?,
            bias: Tensor::param(b.clone(), b_shape)?,
        };
        let loss = cross_entropy_loss(&layer.forward(&f_train)?, &y_train)?;
        if !loss.item()?.is_finite() {
            return Err(Error::NonFinite(format!("probe loss at step {step}")));
        }
        loss.backward()?;
        let gw = layer.weight.grad().expect("weight is on the graph");
        let gb = layer.bias.grad().expect("bias is on the graph");
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= probe.learning_rate * g);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= probe.learning_rate * g);
    }
    let layer = LinearLayer {
        weight: Tensor::new(w, w_shape)?,
        bias: Tensor::new(b, b_shape)?,
    };
    top1_accuracy(&layer.forward(&f_test)?, &y_test)
}

/// Projection-head embeddings of every sample as CSV:
/// `sample_index,label,e_0..e_{d-1}`.
pub fn embeddings_csv(model: &Model, dataset: &Dataset) -> Result<String> {
    let (x, labels) = dataset.split(Split::All);
    let emb = model.freeze().forward(&x)?.embedding;
    let mut s = String::from("sample_index,label");
    for j in 0..emb.cols() {
        write!(s, ",e_{j}").expect("writing to a String");
    }
    s.push('\n');
    for (i, y) in labels.iter().enumerate() {
        write!(s, "{i},{y}").expect("writing to a String");
        for v in emb.row(i) {
            write!(s, ",{v}").expect("writing to a String");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings(model: &Model, dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, embeddings_csv(model, dataset)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::generate_blobs;
    use crate::nn::ModelSpec;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn top1_examples() {
        let logits = t(&[&[2.0, 1.0], &[0.0, 3.0]]);
        assert_eq!(top1_accuracy(&logits, &[0, 0]).unwrap(), 0.5);
        assert_eq!(top1_accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 0]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&t(&[&[1.0, 1.0]]), &[0]).unwrap(), 1.0);
        assert!(top1_accuracy(&Tensor::zeros([0, 2]), &[]).is_err());
    }

    #[test]
    fn identical_logits_have_zero_difference() {
        let l = t(&[&[1.0, 0.2, -1.0], &[0.3, 2.0, 0.1], &[-0.5, 0.4, 1.5], &[0.0, -1.0, 0.7]]);
        let d = logit_correlation_difference(&l, &l).unwrap();
        assert_eq!((d.mean_abs, d.max_abs), (0.0, 0.0));
        assert!(d.to_csv().starts_with("class,c0,c1,c2\n0,"));
    }

    #[test]
    fn constant_class_is_named() {
        let l = t(&[&[1.0, 5.0], &[2.0, 5.0]]);
        let err = logit_correlation_difference(&l, &l).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
        assert!(logit_correlation_difference(&t(&[&[1.0, 2.0]]), &t(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn probe_requires_frozen_encoder() {
        let model = Model::init(&ModelSpec::new(&[2, 8], 3, 4), 0).unwrap();
        let data = generate_blobs(3, 8, 2, 0.1, 0.0, 0).unwrap();
        assert!(linear_probe_transfer(&model, &data, &ProbeConfig::new(0)).is_err());
        let frozen = model.freeze();
        let before = frozen.parameter_values();
        let a = linear_probe_transfer(&frozen, &data, &ProbeConfig::new(0)).unwrap();
        let b = linear_probe_transfer(&frozen, &data, &ProbeConfig::new(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(frozen.parameter_values(), before);
    }

    proptest! {
        #[test]
        fn top1_invariant_under_increasing_maps(
            data in proptest::collection::vec(-5.0f64..5.0, 12),
            labels in proptest::collection::vec(0usize..3, 4),
        ) {
            let logits = Tensor::new(data.clone(), [4, 3]).unwrap();
            let mapped = Tensor::new(data.iter().map(|v| v.exp() * 3.0 + 1.0).collect(), [4, 3]).unwrap();
            prop_assert_eq!(top1_accuracy(&logits, &labels).unwrap(), top1_accuracy(&mapped, &labels).unwrap());
        }

        #[test]
        fn diff_matrix_is_symmetric_and_bounded(
            a in proptest::collection::vec(-3.0f64..3.0, 24),
            b in proptest::collection::vec(-3.0f64..3.0, 24),
        ) {
            let ta = Tensor::new(a, [6, 4]).unwrap();
            let tb = Tensor::new(b, [6, 4]).unwrap();
            if let Ok(d) = logit_correlation_difference(&ta, &tb) {
                for i in 0..4 {
                    for j in 0..4 {
                        prop_assert_eq!(d.get(i, j), d.get(j, i));
                        prop_assert!(d.get(i, j).abs() <= 2.0);
                    }
                }
            }
        }
    }
}
