//! Feedforward encoder, prediction head, and vector augmentations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            hidden_dim: 256,
            hidden_layers: 2,
            output_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        dims.push(self.output_dim);
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Array,
    /// `1 × out`
    pub bias: Array,
}

/// Stack of affine layers with `tanh` between them and a linear output.
///
/// Used both as the encoder and as the Siamese prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

pub type EncoderParams = Mlp;

/// Tape handles for one registration of an [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl Mlp {
    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (1.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect();
                Ok(Linear {
                    weight: Array::matrix(w[0], w[1], data)?,
                    bias: Array::zeros(&[1, w[1]]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Linear {
                weight: Array::zeros(&[w[0], w[1]]),
                bias: Array::zeros(&[1, w[1]]),
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (fan_in, fan_out) = layer.weight.dims2()?;
            if layer.bias.shape() != [1, fan_out] {
                return Err(Error::shape("mlp", format!("bias of layer {i} is {:?}", layer.bias.shape())));
            }
            if i > 0 && layers[i - 1].weight.cols() != fan_in {
                return Err(Error::shape("mlp", format!("layer {i} input {fan_in} does not chain")));
            }
        }
        Ok(Mlp { layers })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {dims:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    /// Registers every weight and bias as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Registers the parameters as constants (inference only).
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        }
    }

    /// Plain SGD update; fails without modifying anything if a step would
    /// leave a non-finite parameter.
    pub fn sgd_step(&mut self, vars: &MlpVars, grads: &Gradients, lr: f64) -> Result<()> {
        let mut updated = Vec::with_capacity(self.layers.len());
        for (layer, (w, b)) in self.layers.iter().zip(&vars.layers) {
            updated.push(Linear {
                weight: sgd(&layer.weight, grads.wrt(*w), lr)?,
                bias: sgd(&layer.bias, grads.wrt(*b), lr)?,
            });
        }
        self.layers = updated;
        Ok(())
    }

    /// Runs the network on a batch without recording gradients.
    pub fn forward(&self, batch: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let out = vars.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }
}

pub(crate) fn sgd(param: &Array, grad: Option<&Array>, lr: f64) -> Result<Array> {
    let Some(grad) = grad else {
        return Ok(param.clone());
    };
    if lr == 0.0 {
        return Ok(param.clone());
    }
    let data = param
        .data()
        .iter()
        .zip(grad.data())
        .map(|(p, g)| p - lr * g)
        .collect();
    Array::new(param.shape().to_vec(), data).map_err(|_| Error::NonFinite {
        op: "sgd",
        stage: "update",
    })
}

impl MlpVars {
    /// `(weight, bias)` handles per layer.
    pub fn layers(&self) -> &[(Var, Var)] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// Encodes a `B × input_dim` batch into `B × D` representations.
pub fn encode(batch: &Array, params: &EncoderParams) -> Result<Array> {
    let (_, cols) = batch.dims2()?;
    if cols != params.input_dim() {
        return Err(Error::shape(
            "encode",
            format!("batch has {cols} features, encoder expects {}", params.input_dim()),
        ));
    }
    params.forward(batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            noise_sigma: 0.5,
            mask_prob: 0.2,
            scale_range: (0.8, 1.2),
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidConfig("mask_prob must lie in [0, 1)".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig("scale_range must be a valid interval".into()));
        }
        Ok(())
    }
}

/// One stochastic view: `mask ⊙ (scale · (sample + noise))`.
///
/// The draw order is fixed (scale, then noise and mask per coordinate), so
/// the rng consumption does not depend on the configuration values.
pub fn augment<R: Rng>(sample: &[f64], config: &AugmentationConfig, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = config.scale_range;
    let u: f64 = rng.random();
    let scale = lo + (hi - lo) * u;
    sample
        .iter()
        .map(|&x| {
            let noise: f64 = StandardNormal.sample(rng);
            let keep = rng.random::<f64>() >= config.mask_prob;
            if keep {
                scale * (x + config.noise_sigma * noise)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn augment_batch<R: Rng>(batch: &Array, config: &AugmentationConfig, rng: &mut R) -> Result<Array> {
    let (rows, cols) = batch.dims2()?;
    let mut data = Vec::with_capacity(rows * cols);
    for row in batch.row_iter() {
        data.extend(augment(row, config, rng));
    }
    Array::matrix(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_augmentation_returns_the_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = vec![0.3, -1.2, 4.0, 0.0];
        let view = augment(&sample, &AugmentationConfig::identity(), &mut rng);
        assert_eq!(view, sample);
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let sample: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let cfg = AugmentationConfig::default();
        let a = augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mask_rate_matches_binomial() {
        let mask_prob = 1.0 - 1e-3;
        let cfg = AugmentationConfig {
            noise_sigma: 0.0,
            mask_prob,
            scale_range: (1.0, 1.0),
        };
        let n = 10_000;
        let sample = vec![1.0; n];
        let view = augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let zeroed = view.iter().filter(|v| **v == 0.0).count() as f64;
        let sigma = (n as f64 * mask_prob * (1.0 - mask_prob)).sqrt();
        assert!((zeroed - n as f64 * mask_prob).abs() <= 3.0 * sigma);
    }

    #[test]
    fn invalid_augmentation_configs() {
        let mut cfg = AugmentationConfig::default();
        cfg.mask_prob = 1.0;
        assert!(cfg.validate().is_err());
        cfg = AugmentationConfig::default();
        cfg.noise_sigma = -0.1;
        assert!(cfg.validate().is_err());
        cfg = AugmentationConfig::default();
        cfg.scale_range = (1.2, 0.8);
        assert!(cfg.validate().is_err());
        assert!(AugmentationConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_network_maps_zeros_to_zeros() {
        let cfg = EncoderConfig::default();
        let params = Mlp::zeros(&cfg.layer_dims()).unwrap();
        let out = encode(&Array::zeros(&[1, cfg.input_dim]), &params).unwrap();
        assert_eq!(out.shape(), &[1, 128]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_shape_and_mismatch() {
        let cfg = EncoderConfig::default();
        let params = Mlp::new(&cfg.layer_dims(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = encode(&Array::filled(&[7, 64], 0.1), &params).unwrap();
        assert_eq!(out.shape(), &[7, 128]);
        assert!(encode(&Array::filled(&[7, 63], 0.1), &params).is_err());
    }

    #[test]
    fn identical_views_give_identical_representations() {
        let cfg = EncoderConfig::default();
        let params = Mlp::new(&cfg.layer_dims(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let batch = Array::filled(&[3, 64], 0.25);
        let id = AugmentationConfig::identity();
        let a = augment_batch(&batch, &id, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment_batch(&batch, &id, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(encode(&a, &params).unwrap(), encode(&b, &params).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let params = Mlp::new(&[4, 5, 3], &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut stepped = params.clone();
        let mut tape = Tape::new();
        let vars = stepped.register(&mut tape);
        let x = tape.constant(Array::filled(&[2, 4], 0.5));
        let y = vars.forward(&mut tape, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        stepped.sgd_step(&vars, &grads, 0.0).unwrap();
        assert_eq!(stepped, params);
    }
}
