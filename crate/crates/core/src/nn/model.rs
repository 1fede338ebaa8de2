use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archspec::{infer_shapes, LayerKind, NetworkArch};
use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;

/// Bounds on the predicted `ln σ`.
pub const LOGSIGMA_MIN: f64 = -6.0;
pub const LOGSIGMA_MAX: f64 = 6.0;

/// Upper bound on samples per forward pass at inference time.
const INFERENCE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Per-category Gaussian for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// A feature extractor built from a [`NetworkArch`] plus two linear heads
/// on the shared features: one for μ and one for ln σ.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: NetworkArch,
    category_count: usize,
    feature_dim: usize,
    params: Vec<Param>,
    /// Index of the weight parameter of each layer (bias follows it).
    layer_params: Vec<Option<usize>>,
}

/// Node ids of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Leaf of every parameter, in [`Model::params`] order.
    pub params: Vec<NodeId>,
    pub mu: NodeId,
    pub logsigma: NodeId,
}

fn param_layout(
    arch: &NetworkArch,
    category_count: usize,
    feature_dim: usize,
) -> (Vec<(String, Vec<usize>)>, Vec<Option<usize>>) {
    let mut shapes = Vec::new();
    let mut layer_params = Vec::with_capacity(arch.layers.len());
    for layer in &arch.layers {
        let weight = match layer.kind {
            LayerKind::Conv => Some(vec![
                layer.c_out,
                layer.c_in,
                layer.kernel_omega,
                layer.kernel_omega,
            ]),
            LayerKind::Linear => Some(vec![layer.c_out, layer.c_in]),
            _ => None,
        };
        match weight {
            Some(shape) => {
                layer_params.push(Some(shapes.len()));
                shapes.push((format!("layer{}.weight", layer.id), shape));
                shapes.push((format!("layer{}.bias", layer.id), vec![layer.c_out]));
            }
            None => layer_params.push(None),
        }
    }
    for head in ["head_mu", "head_logsigma"] {
        shapes.push((format!("{head}.weight"), vec![category_count, feature_dim]));
        shapes.push((format!("{head}.bias"), vec![category_count]));
    }
    (shapes, layer_params)
}

impl Model {
    /// Fresh model with fan-in scaled Gaussian weights. Feature-extractor
    /// biases start at zero, the μ head bias at `100 / C` (uniform
    /// composition) and the ln σ head at zero bias with near-zero weights,
    /// so σ starts close to 1.
    pub fn build_from_arch(arch: &NetworkArch, category_count: usize, seed: u64) -> Result<Self> {
        let (arch, feature_dim, shapes, layer_params) = Self::layout(arch, category_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    let fill = if name == "head_mu.bias" {
                        100.0 / category_count as f64
                    } else {
                        0.0
                    };
                    Tensor::from_fn(&shape, |_| fill)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = match name.as_str() {
                        "head_mu.weight" => (1.0 / fan_in as f64).sqrt(),
                        "head_logsigma.weight" => 0.01 / (fan_in as f64).sqrt(),
                        _ => (2.0 / fan_in as f64).sqrt(),
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                };
                Param { name, value }
            })
            .collect();
        Ok(Model {
            arch,
            category_count,
            feature_dim,
            params,
            layer_params,
        })
    }

    /// Assemble a model from existing parameter values, checking names and
    /// shapes against the architecture.
    pub fn from_parts(
        arch: &NetworkArch,
        category_count: usize,
        params: Vec<Param>,
    ) -> Result<Self> {
        let (arch, feature_dim, shapes, layer_params) = Self::layout(arch, category_count)?;
        if shapes.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Model {
            arch,
            category_count,
            feature_dim,
            params,
            layer_params,
        })
    }

    #[allow(clippy::type_complexity)]
    fn layout(
        arch: &NetworkArch,
        category_count: usize,
    ) -> Result<(
        NetworkArch,
        usize,
        Vec<(String, Vec<usize>)>,
        Vec<Option<usize>>,
    )> {
        if category_count == 0 {
            return Err(Error::Config("category count must be >= 1".into()));
        }
        let arch = infer_shapes(arch)?;
        let feature_dim = arch.feature_dim().ok_or_else(|| {
            Error::InvalidArch("network must end with a flat feature vector (add `flatten`)".into())
        })?;
        let (shapes, layer_params) = param_layout(&arch, category_count, feature_dim);
        Ok((arch, feature_dim, shapes, layer_params))
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn category_count(&self) -> usize {
        self.category_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (c, h, w) = self.arch.input_shape;
        let s = batch.shape();
        if s.len() != 4 || s[1..] != [c, h, w] || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![s.first().copied().unwrap_or(1).max(1), c, h, w],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Record a forward pass of `batch` (`[B, C, H, W]`) on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, batch: Tensor) -> Result<ForwardPass> {
        self.check_input(&batch)?;
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let mut current = tape.leaf(batch);
        let mut outputs = Vec::with_capacity(self.arch.layers.len());
        for (layer, slot) in self.arch.layers.iter().zip(&self.layer_params) {
            current = match layer.kind {
                LayerKind::Conv => {
                    let i = slot.expect("conv has params");
                    tape.conv2d(current, params[i], params[i + 1], layer.stride, layer.pad)?
                }
                LayerKind::Linear => {
                    let i = slot.expect("linear has params");
                    tape.linear(current, params[i], params[i + 1])?
                }
                LayerKind::Relu => tape.relu(current),
                LayerKind::MaxPool => {
                    tape.max_pool(current, layer.kernel_omega, layer.stride, layer.pad)?
                }
                LayerKind::AvgPool => {
                    tape.avg_pool(current, layer.kernel_omega, layer.stride, layer.pad)?
                }
                LayerKind::Flatten => tape.flatten(current),
                LayerKind::ResidualAdd => {
                    let (from, _) = self
                        .arch
                        .skip_edges
                        .iter()
                        .find(|e| e.1 == layer.id)
                        .copied()
                        .expect("validated skip edge");
                    tape.add(current, outputs[from])?
                }
            };
            outputs.push(current);
        }
        let n = params.len();
        let mu = tape.linear(current, params[n - 4], params[n - 3])?;
        let raw = tape.linear(current, params[n - 2], params[n - 1])?;
        let logsigma = tape.clamp(raw, LOGSIGMA_MIN, LOGSIGMA_MAX);
        Ok(ForwardPass {
            params,
            mu,
            logsigma,
        })
    }

    /// `(μ, ln σ)`, each `[B, C]`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(batch)?;
        let b = batch.shape()[0];
        let per_sample = batch.len() / b;
        let mut mu = Vec::with_capacity(b * self.category_count);
        let mut logsigma = Vec::with_capacity(b * self.category_count);
        for start in (0..b).step_by(INFERENCE_BATCH) {
            let end = (start + INFERENCE_BATCH).min(b);
            let mut shape = batch.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(
                shape,
                batch.data()[start * per_sample..end * per_sample].to_vec(),
            )?;
            let mut tape = Tape::new();
            let pass = self.forward_tape(&mut tape, chunk)?;
            mu.extend_from_slice(tape.value(pass.mu).data());
            logsigma.extend_from_slice(tape.value(pass.logsigma).data());
        }
        let shape = vec![b, self.category_count];
        Ok((
            Tensor::new(shape.clone(), mu)?,
            Tensor::new(shape, logsigma)?,
        ))
    }

    /// Gaussian predictions for a batch `[B, C, H, W]` or a single image
    /// `[C, H, W]`.
    pub fn predict_gaussian(&self, x: &Tensor) -> Result<Vec<GaussianPrediction>> {
        let batch = if x.shape().len() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            x.clone().reshape(&shape)?
        } else {
            x.clone()
        };
        let (mu, logsigma) = self.forward(&batch)?;
        Ok((0..mu.shape()[0])
            .map(|i| GaussianPrediction {
                mu: mu.row(i).to_vec(),
                sigma: logsigma.row(i).iter().map(|v| v.exp()).collect(),
            })
            .collect())
    }
}
