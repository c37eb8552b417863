//! Feed-forward teacher and student networks.
//!
//! A [`Model`] is an MLP backbone (linear + ReLU per layer) feeding two heads:
//! a linear classifier producing logits and a linear projection whose output
//! rows are L2-normalized into the embedding used by the relational losses.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Architecture of a [`Model`]. `layer_sizes[0]` is the input width; each
/// following entry adds one hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub num_classes: usize,
    pub proj_dim: usize,
}

impl ModelSpec {
    pub fn new(layer_sizes: &[usize], num_classes: usize, proj_dim: usize) -> Self {
        Self {
            layer_sizes: layer_sizes.to_vec(),
            num_classes,
            proj_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() {
            return Err(Error::invalid("layer_sizes must not be empty"));
        }
        if self.layer_sizes.contains(&0) || self.num_classes == 0 || self.proj_dim == 0 {
            return Err(Error::invalid(format!("all model sizes must be >= 1, got {self}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Width of the backbone output fed to both heads.
    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "mlp{:?} classes={} proj={}",
            self.layer_sizes, self.num_classes, self.proj_dim
        )
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

impl LinearLayer {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero bias.
    pub fn he_init<R: Rng>(fan_in: usize, fan_out: usize, trainable: bool, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        let weight = Tensor::new(w, [fan_in, fan_out]).expect("sized buffer");
        let bias = Tensor::zeros([1, fan_out]);
        Self {
            weight: weight.with_requires_grad(trainable),
            bias: bias.with_requires_grad(trainable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn set_trainable(&self, trainable: bool) -> Self {
        Self {
            weight: self.weight.with_requires_grad(trainable),
            bias: self.bias.with_requires_grad(trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Backbone output, the input to both heads.
    pub features: Tensor,
    pub logits: Tensor,
    /// Projection-head output, unit-norm rows.
    pub embedding: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    backbone: Vec<LinearLayer>,
    classifier: LinearLayer,
    projection: LinearLayer,
    frozen: bool,
}

impl Model {
    /// Builds a trainable model; identical `(spec, seed)` gives bit-identical
    /// parameters.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, 0);
        let backbone = spec
            .layer_sizes
            .windows(2)
            .map(|w| LinearLayer::he_init(w[0], w[1], true, &mut rng))
            .collect();
        let feat = spec.feature_dim();
        let classifier = LinearLayer::he_init(feat, spec.num_classes, true, &mut rng);
        let projection = LinearLayer::he_init(feat, spec.proj_dim, true, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            backbone,
            classifier,
            projection,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Copy whose parameters never require gradients, so forward passes
    /// record no graph.
    pub fn freeze(&self) -> Self {
        self.with_trainable(false)
    }

    pub fn unfreeze(&self) -> Self {
        self.with_trainable(true)
    }

    fn with_trainable(&self, trainable: bool) -> Self {
        Self {
            spec: self.spec.clone(),
            backbone: self.backbone.iter().map(|l| l.set_trainable(trainable)).collect(),
            classifier: self.classifier.set_trainable(trainable),
            projection: self.projection.set_trainable(trainable),
            frozen: !trainable,
        }
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.spec.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: x.shape(),
                right: [x.rows(), self.spec.input_dim()],
            });
        }
        let mut h = x.clone();
        for layer in &self.backbone {
            h = layer.forward(&h)?.relu();
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        let features = self.features(x)?;
        let logits = self.classifier.forward(&features)?;
        let embedding = self.projection.forward(&features)?.row_l2_normalize()?;
        Ok(ModelOutput {
            features,
            logits,
            embedding,
        })
    }

    /// Named parameters in a fixed order: backbone layers first, then the
    /// classifier, then the projection head; weight before bias.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.backbone.len() + 4);
        let mut push = |name: String, layer: &LinearLayer| {
            out.push((format!("{name}.weight"), layer.weight.clone()));
            out.push((format!("{name}.bias"), layer.bias.clone()));
        };
        for (i, layer) in self.backbone.iter().enumerate() {
            push(format!("backbone.{i}"), layer);
        }
        push("classifier".into(), &self.classifier);
        push("projection".into(), &self.projection);
        out
    }

    /// Rebuilds the model with new parameter values given in
    /// [`Model::parameters`] order. Freezing is preserved.
    pub fn with_parameter_values(&self, values: &[Vec<f64>]) -> Result<Self> {
        let trainable = !self.frozen;
        let current = self.parameters();
        if values.len() != current.len() {
            return Err(Error::ArchitectureMismatch {
                expected: format!("{} parameter tensors", current.len()),
                found: format!("{}", values.len()),
            });
        }
        let leaves = current
            .iter()
            .zip(values)
            .map(|((name, old), new)| {
                if new.len() != old.len() {
                    return Err(Error::ArchitectureMismatch {
                        expected: format!("{name} with {} values", old.len()),
                        found: format!("{} values", new.len()),
                    });
                }
                Ok(Tensor::new(new.clone(), old.shape())?.with_requires_grad(trainable))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_parameters(&leaves)
    }

    /// Rebuilds the model around the given tensors, used as-is, in
    /// [`Model::parameters`] order. Gradients of anything computed from the
    /// result accumulate on these exact tensors. The model counts as frozen
    /// when none of them requires gradients.
    pub fn with_parameters(&self, tensors: &[Tensor]) -> Result<Self> {
        let current = self.parameters();
        if tensors.len() != current.len() {
            return Err(Error::ArchitectureMismatch {
                expected: format!("{} parameter tensors", current.len()),
                found: format!("{}", tensors.len()),
            });
        }
        for ((name, old), new) in current.iter().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(Error::ArchitectureMismatch {
                    expected: format!("{name} of shape {:?}", old.shape()),
                    found: format!("{:?}", new.shape()),
                });
            }
        }
        let mut it = tensors.iter().cloned();
        let mut next = || LinearLayer {
            weight: it.next().expect("counted"),
            bias: it.next().expect("counted"),
        };
        let backbone = (0..self.backbone.len()).map(|_| next()).collect();
        let classifier = next();
        let projection = next();
        Ok(Self {
            spec: self.spec.clone(),
            backbone,
            classifier,
            projection,
            frozen: !tensors.iter().any(Tensor::requires_grad),
        })
    }

    pub fn parameter_values(&self) -> Vec<Vec<f64>> {
        self.parameters().into_iter().map(|(_, t)| t.data().to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_difference_report, DEFAULT_FD_EPS};

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(data, [rows, cols]).unwrap()
    }

    #[test]
    fn shapes_follow_spec() {
        let spec = ModelSpec::new(&[2, 32], 10, 16);
        let model = Model::init(&spec, 1).unwrap();
        let out = model.forward(&input(7, 2, 0)).unwrap();
        assert_eq!(out.logits.shape(), [7, 10]);
        assert_eq!(out.embedding.shape(), [7, 16]);
        assert_eq!(out.features.shape(), [7, 32]);
        for i in 0..7 {
            let n: f64 = out.embedding.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = ModelSpec::new(&[2, 8, 8], 3, 4);
        let a = Model::init(&spec, 5).unwrap().parameter_values();
        let b = Model::init(&spec, 5).unwrap().parameter_values();
        let c = Model::init(&spec, 6).unwrap().parameter_values();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero_and_weights_have_he_scale() {
        let spec = ModelSpec::new(&[200, 300], 2, 2);
        let model = Model::init(&spec, 3).unwrap();
        let params = model.parameters();
        assert!(params[1].1.data().iter().all(|&b| b == 0.0));
        let w = params[0].1.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 200.0).abs() < 0.001, "variance {var}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(Model::init(&ModelSpec::new(&[], 3, 4), 0).is_err());
        assert!(Model::init(&ModelSpec::new(&[2, 0], 3, 4), 0).is_err());
        assert!(Model::init(&ModelSpec::new(&[2], 0, 4), 0).is_err());
        let model = Model::init(&ModelSpec::new(&[3, 4], 2, 2), 0).unwrap();
        assert!(matches!(model.forward(&input(2, 2, 0)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn parameter_listing() {
        let spec = ModelSpec::new(&[2, 32], 10, 16);
        let a = Model::init(&spec, 1).unwrap();
        let names: Vec<String> = a.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "backbone.0.weight",
                "backbone.0.bias",
                "classifier.weight",
                "classifier.bias",
                "projection.weight",
                "projection.bias"
            ]
        );
        let b = Model::init(&spec, 99).unwrap();
        let names_b: Vec<String> = b.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_b);
        assert_eq!(a.freeze().parameters().len(), 6);
    }

    #[test]
    fn frozen_forward_records_no_graph() {
        let spec = ModelSpec::new(&[2, 16, 16], 4, 8);
        let frozen = Model::init(&spec, 2).unwrap().freeze();
        assert!(frozen.is_frozen());
        let out = frozen.forward(&input(5, 2, 1)).unwrap();
        assert!(!out.logits.has_graph() && !out.embedding.has_graph());
        let loss = out.logits.sum().add(&out.embedding.sum()).unwrap();
        loss.backward().unwrap();
        assert!(frozen.parameters().iter().all(|(_, p)| p.grad().is_none()));
    }

    #[test]
    fn batch_rows_are_independent() {
        let spec = ModelSpec::new(&[3, 12, 6], 5, 4);
        let model = Model::init(&spec, 8).unwrap();
        let x = input(6, 3, 4);
        let full = model.forward(&x).unwrap();
        for i in 0..6 {
            let single = Tensor::new(x.row(i).to_vec(), [1, 3]).unwrap();
            let one = model.forward(&single).unwrap();
            assert_eq!(one.logits.data(), full.logits.row(i));
            assert_eq!(one.embedding.data(), full.embedding.row(i));
        }
    }

    #[test]
    fn gradient_through_forward_matches_finite_differences() {
        let spec = ModelSpec::new(&[3, 16, 12], 4, 8);
        for seed in 0..20 {
            let model = Model::init(&spec, seed).unwrap();
            let x = input(4, 3, 100 + seed);
            let w = input(4, 8, 200 + seed);
            let params: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
            let err = finite_difference_report(
                |p| {
                    let m = model.with_parameters(p)?;
                    let out = m.forward(&x)?;
                    out.logits.log_softmax_rows(1.0)?.gather(&[0, 1, 2, 3])?.mean()?
                        .add(&out.embedding.mul(&w)?.sum())
                },
                &params,
                DEFAULT_FD_EPS,
            )
            .unwrap();
            assert!(err.max_relative_error < 1e-5, "seed {seed}: {err:?}");
        }
    }

    #[test]
    fn parameter_round_trip() {
        let spec = ModelSpec::new(&[2, 5], 3, 2);
        let m = Model::init(&spec, 1).unwrap();
        let copy = m.with_parameter_values(&m.parameter_values()).unwrap();
        assert_eq!(copy.parameter_values(), m.parameter_values());
        assert!(m.with_parameter_values(&m.parameter_values()[1..]).is_err());
    }
}
