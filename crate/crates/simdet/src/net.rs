//! The shared (Siamese) embedding network.
//!
//! A stack of valid convolutions, each followed by batch normalisation and a
//! ReLU, with occasional max pooling. The same parameters embed both the
//! exemplar and the target example; because the final activation is a ReLU,
//! embeddings are elementwise nonnegative, which pins every cosine
//! similarity between them into `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::rng::rng_derived;
use crate::tape::{Mode, RunningMoments, Tape, Var};
use crate::tensor::Tensor;

/// One convolutional block of the embedding stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool (window 2, stride 2) after this layer's activation.
    pub pool_after: bool,
}

/// Architecture and temperature of the attention similarity network.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    /// 1 for feature sequences, 2 for images.
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Softmax temperature used by attention pooling.
    pub temperature: f64,
}

impl EmbedConfig {
    /// The full-scale preset: eight conv layers with kernel 5 and stride 1,
    /// 256 feature maps in the first four and 512 in the last four, max
    /// pooling after every second layer, temperature 1/3.
    pub fn paper(spatial_rank: usize, in_channels: usize) -> Self {
        let layers = (0..8)
            .map(|i| LayerSpec {
                channels: if i < 4 { 256 } else { 512 },
                kernel: 5,
                stride: 1,
                pool_after: i % 2 == 1,
            })
            .collect();
        EmbedConfig { spatial_rank, in_channels, layers, temperature: 1.0 / 3.0 }
    }

    /// A four-layer preset with channels [32, 32, 64, 64] and pooling after
    /// layers two and four; same layer recipe as [`EmbedConfig::paper`], sized
    /// so that end-to-end runs finish in minutes on a CPU.
    pub fn desk(spatial_rank: usize, in_channels: usize) -> Self {
        let channels = [32, 32, 64, 64];
        let layers = (0..4)
            .map(|i| LayerSpec { channels: channels[i], kernel: 5, stride: 1, pool_after: i % 2 == 1 })
            .collect();
        EmbedConfig { spatial_rank, in_channels, layers, temperature: 1.0 / 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_rank != 1 && self.spatial_rank != 2 {
            return Err(Error::invalid(format!(
                "spatial rank must be 1 or 2, got {}",
                self.spatial_rank
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("input channel count must be positive".to_string()));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("embedding network needs at least one layer".to_string()));
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(Error::invalid("layer extents must be positive".to_string()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// The spatial extent of the embedding of an input with extent `input`
    /// along one axis, or an error naming the required minimum.
    pub fn embed_extent(&self, input: usize) -> Result<usize> {
        let mut e = input;
        for (i, layer) in self.layers.iter().enumerate() {
            if e < layer.kernel {
                return Err(Error::shape(format!(
                    "input extent {input} is too small for the layer stack at layer {i}; \
                     the minimum input extent is {}",
                    self.min_input_extent()
                )));
            }
            e = (e - layer.kernel) / layer.stride + 1;
            if layer.pool_after {
                if e < 2 {
                    return Err(Error::shape(format!(
                        "input extent {input} is too small for the layer stack at layer {i} pooling; \
                         the minimum input extent is {}",
                        self.min_input_extent()
                    )));
                }
                e /= 2;
            }
        }
        Ok(e)
    }

    /// Smallest input extent the stack accepts (yields an embedding extent
    /// of at least 1 on every layer).
    pub fn min_input_extent(&self) -> usize {
        let mut need = 1usize;
        for layer in self.layers.iter().rev() {
            if layer.pool_after {
                need *= 2;
            }
            need = (need - 1) * layer.stride + layer.kernel;
        }
        need
    }

    /// Product of all layer strides and pool strides: the input-space step
    /// between adjacent embedding positions.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride * if l.pool_after { 2 } else { 1 }).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.channels).unwrap_or(self.in_channels)
    }

    fn kernel_shape(&self, layer: usize) -> Vec<usize> {
        let spec = &self.layers[layer];
        let c_in = if layer == 0 { self.in_channels } else { self.layers[layer - 1].channels };
        let mut shape = vec![spec.channels, c_in];
        shape.extend(std::iter::repeat(spec.kernel).take(self.spatial_rank));
        shape
    }
}

/// Trainable parameters plus batch-norm running moments for one network.
pub struct ModelState {
    pub params: ParamStore,
    pub moments: Vec<RunningMoments>,
}

impl ModelState {
    /// He-style initialisation: kernels drawn from a zero-mean Gaussian with
    /// standard deviation `sqrt(2 / fan_in)`, unit gamma, zero beta.
    pub fn init(config: &EmbedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut moments = Vec::new();
        for (i, layer) in config.layers.iter().enumerate() {
            let shape = config.kernel_shape(i);
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = rng_derived(seed, "layer-kernel", i as u64);
            let values: Vec<f64> =
                (0..shape.iter().product()).map(|_| normal.sample(&mut rng)).collect();
            params.add(&format!("layer{i}.kernel"), Tensor::new(shape, values)?)?;
            params.add(&format!("layer{i}.gamma"), Tensor::filled(vec![layer.channels], 1.0))?;
            params.add(&format!("layer{i}.beta"), Tensor::zeros(vec![layer.channels]))?;
            moments.push(RunningMoments::new(layer.channels));
        }
        Ok(ModelState { params, moments })
    }

    /// Every tensor of the model under a stable name, for checkpointing.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.params.iter_named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (i, m) in self.moments.iter().enumerate() {
            out.push((format!("layer{i}.running_mean"), Tensor::from_vec(m.mean.clone())));
            out.push((format!("layer{i}.running_var"), Tensor::from_vec(m.var.clone())));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Rebuilds a model from checkpoint tensors; shapes must match `config`.
    pub fn from_named_tensors(config: &EmbedConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut state = ModelState::init(config, 0)?;
        let lookup: std::collections::BTreeMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..config.layers.len() {
            for part in ["kernel", "gamma", "beta"] {
                let name = format!("layer{i}.{part}");
                let tensor = lookup
                    .get(name.as_str())
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))?;
                let id = state.params.id(&name).expect("initialised above");
                state.params.set_value(id, (*tensor).clone())?;
            }
            for (part, slot) in [("running_mean", 0), ("running_var", 1)] {
                let name = format!("layer{i}.{part}");
                let tensor = lookup
                    .get(name.as_str())
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))?;
                if tensor.numel() != config.layers[i].channels {
                    return Err(Error::shape(format!(
                        "{name} has {} values, layer has {} channels",
                        tensor.numel(),
                        config.layers[i].channels
                    )));
                }
                let dst = &mut state.moments[i];
                if slot == 0 {
                    dst.mean = tensor.values().to_vec();
                } else {
                    dst.var = tensor.values().to_vec();
                }
            }
        }
        Ok(state)
    }
}

/// Runs the embedding stack over `input` (`[n, c_in, spatial...]`) on `tape`.
///
/// Exemplar and target share these parameters; batch statistics are computed
/// per invocation while running moments and learnable scales are shared.
pub fn embed(
    tape: &mut Tape,
    input: Var,
    config: &EmbedConfig,
    params: &ParamStore,
    moments: &mut [RunningMoments],
    mode: Mode,
) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 2 + config.spatial_rank {
        return Err(Error::shape(format!(
            "embed expects [n, c, spatial...] with {} spatial axes, got {shape:?}",
            config.spatial_rank
        )));
    }
    if shape[1] != config.in_channels {
        return Err(Error::shape(format!(
            "embed expects {} input channels, got {}",
            config.in_channels, shape[1]
        )));
    }
    for &extent in &shape[2..] {
        config.embed_extent(extent)?;
    }
    if moments.len() != config.layers.len() {
        return Err(Error::invalid("running moments do not match the layer stack".to_string()));
    }

    let mut x = input;
    for (i, layer) in config.layers.iter().enumerate() {
        let kernel = params
            .id(&format!("layer{i}.kernel"))
            .ok_or_else(|| Error::invalid(format!("missing parameter layer{i}.kernel")))?;
        let gamma = params
            .id(&format!("layer{i}.gamma"))
            .ok_or_else(|| Error::invalid(format!("missing parameter layer{i}.gamma")))?;
        let beta = params
            .id(&format!("layer{i}.beta"))
            .ok_or_else(|| Error::invalid(format!("missing parameter layer{i}.beta")))?;
        let k = tape.param(params, kernel);
        let g = tape.param(params, gamma);
        let b = tape.param(params, beta);
        let stride = vec![layer.stride; config.spatial_rank];
        x = tape.conv(x, k, &stride)?;
        x = tape.batchnorm(x, g, b, &mut moments[i], mode)?;
        x = tape.relu(x);
        if layer.pool_after {
            x = tape.maxpool(x)?;
        }
    }
    Ok(x)
}

/// Embeds a single `[c, spatial...]` example (no batch axis) and strips the
/// batch axis from the result.
pub fn embed_single(
    tape: &mut Tape,
    example: &Tensor,
    config: &EmbedConfig,
    params: &ParamStore,
    moments: &mut [RunningMoments],
    mode: Mode,
) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(example.shape());
    let input = tape.leaf(example.reshaped(shape)?, false);
    let emb = embed(tape, input, config, params, moments, mode)?;
    let out_shape = tape.value(emb).shape()[1..].to_vec();
    tape.reshape(emb, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn tiny_config() -> EmbedConfig {
        EmbedConfig {
            spatial_rank: 2,
            in_channels: 1,
            layers: vec![
                LayerSpec { channels: 4, kernel: 3, stride: 1, pool_after: true },
                LayerSpec { channels: 6, kernel: 3, stride: 1, pool_after: false },
            ],
            temperature: 1.0 / 3.0,
        }
    }

    #[test]
    fn desk_preset_shape_arithmetic() {
        // 32 -> conv 28 -> conv 24 -> pool 12 -> conv 8 -> conv 4 -> pool 2
        let cfg = EmbedConfig::desk(2, 1);
        assert_eq!(cfg.embed_extent(32).unwrap(), 2);
        assert_eq!(cfg.embed_extent(64).unwrap(), 10);
        assert_eq!(cfg.total_stride(), 4);
        assert_eq!(cfg.out_channels(), 64);
        assert_eq!(cfg.min_input_extent(), 28);
        assert!(cfg.embed_extent(27).is_err());
    }

    #[test]
    fn paper_preset_matches_description() {
        let cfg = EmbedConfig::paper(1, 201);
        assert_eq!(cfg.layers.len(), 8);
        assert_eq!(cfg.layers[0].channels, 256);
        assert_eq!(cfg.layers[7].channels, 512);
        assert_eq!(cfg.layers.iter().filter(|l| l.pool_after).count(), 4);
        assert!((cfg.temperature - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn embedding_is_shared_and_nonnegative() {
        let cfg = tiny_config();
        let mut state = ModelState::init(&cfg, 3).unwrap();
        let mut rng = rng_from(11);
        let img = Tensor::new(vec![1, 12, 12], (0..144).map(|_| rng.gen::<f64>()).collect()).unwrap();

        let mut tape = Tape::new();
        let a = embed_single(&mut tape, &img, &cfg, &state.params, &mut state.moments, Mode::Infer)
            .unwrap();
        let b = embed_single(&mut tape, &img, &cfg, &state.params, &mut state.moments, Mode::Infer)
            .unwrap();
        assert_eq!(tape.value(a).values(), tape.value(b).values());
        assert!(tape.value(a).values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn embed_rejects_undersized_input_with_minimum() {
        let cfg = EmbedConfig::desk(2, 1);
        let mut state = ModelState::init(&cfg, 3).unwrap();
        let img = Tensor::zeros(vec![1, 16, 16]);
        let mut tape = Tape::new();
        let err = embed_single(&mut tape, &img, &cfg, &state.params, &mut state.moments, Mode::Infer)
            .unwrap_err();
        assert!(err.to_string().contains("minimum input extent is 28"), "{err}");
    }

    #[test]
    fn checkpoint_roundtrip_restores_state() {
        let cfg = tiny_config();
        let mut state = ModelState::init(&cfg, 9).unwrap();
        state.moments[0].mean[1] = 0.25;
        state.moments[1].var[3] = 2.5;
        let named = state.to_named_tensors();
        let restored = ModelState::from_named_tensors(&cfg, &named).unwrap();
        for (name, tensor) in state.params.iter_named() {
            let id = restored.params.id(name).unwrap();
            assert_eq!(restored.params.value(id).values(), tensor.values());
        }
        assert_eq!(restored.moments[0].mean[1], 0.25);
        assert_eq!(restored.moments[1].var[3], 2.5);
    }
}
