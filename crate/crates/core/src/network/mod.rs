//! The FireNet topology and a small sequential network engine.
//!
//! A [`Network`] is a list of [`LayerSpec`]s with their parameters. Every
//! convolution and hidden dense layer is followed by a ReLU; the final layer
//! is a dense layer fused with softmax. Dropout is inverted: surviving units
//! are scaled by `1 / (1 - rate)` during training and evaluation applies no
//! dropout at all.

mod model_file;

pub use model_file::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{
    conv2d_backward_accumulate, conv2d_forward, cross_entropy, dense_backward_accumulate, dense_forward,
    maxpool2_backward, maxpool2_forward, relu, relu_backward, softmax, ConvParams, DenseParams, PoolIndex, Scalar,
    Tensor, TensorError,
};

/// Class index of the positive ("fire") class.
pub const FIRE_CLASS: usize = 0;
/// Class index of the negative ("nofire") class.
pub const NOFIRE_CLASS: usize = 1;
/// Class names in index order.
pub const CLASS_LABELS: [&str; 2] = ["fire", "nofire"];

/// Smallest square input that survives three conv + pool stages.
pub const MIN_INPUT_SIDE: usize = 24;
pub const KERNEL_SIDE: usize = 3;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("input side {side} is too small, need at least {min}")]
    InputTooSmall { side: usize, min: usize },
    #[error("batch shape mismatch: expected [n, {side}, {side}, {channels}], got {got:?}")]
    BatchShape {
        side: usize,
        channels: usize,
        got: Vec<usize>,
    },
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("model file truncated: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// 3×3 VALID convolution followed by ReLU.
    Conv {
        out_channels: usize,
    },
    /// 2×2 max pooling, stride 2.
    MaxPool,
    /// Inverted dropout; identity in evaluation.
    Dropout {
        rate: f32,
    },
    Flatten,
    /// Fully connected layer followed by ReLU.
    Dense {
        units: usize,
    },
    /// Fully connected output layer followed by softmax.
    Softmax {
        units: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> String {
        match self {
            LayerSpec::Conv { out_channels } => format!("conv{out_channels}"),
            LayerSpec::MaxPool => "maxpool".into(),
            LayerSpec::Dropout { rate } => format!("dropout{rate}"),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Dense { units } => format!("dense{units}"),
            LayerSpec::Softmax { units } => format!("dense{units}+softmax"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub class_labels: Vec<String>,
}

impl NetworkConfig {
    /// The canonical 14-layer FireNet.
    pub fn firenet(input_side: usize) -> Self {
        use LayerSpec::*;
        Self {
            input_side,
            input_channels: 3,
            layers: vec![
                Conv { out_channels: 16 },
                MaxPool,
                Dropout { rate: 0.5 },
                Conv { out_channels: 32 },
                MaxPool,
                Dropout { rate: 0.5 },
                Conv { out_channels: 64 },
                MaxPool,
                Dropout { rate: 0.5 },
                Flatten,
                Dense { units: 256 },
                Dropout { rate: 0.2 },
                Dense { units: 128 },
                Softmax { units: 2 },
            ],
            class_labels: CLASS_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.input_side, self.input_side, self.input_channels]
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Softmax { units }) => *units,
            _ => 0,
        }
    }

    /// Output shape of every layer, in order.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>, NetworkError> {
        self.validate_structure()?;
        let mut shape = self.input_shape();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, &shape[..]) {
                (LayerSpec::Conv { out_channels }, &[h, w, _]) => {
                    if h < KERNEL_SIDE || w < KERNEL_SIDE {
                        return Err(NetworkError::InputTooSmall {
                            side: self.input_side,
                            min: MIN_INPUT_SIDE,
                        });
                    }
                    vec![h - KERNEL_SIDE + 1, w - KERNEL_SIDE + 1, out_channels]
                }
                (LayerSpec::MaxPool, &[h, w, c]) => {
                    if h < 2 || w < 2 {
                        return Err(NetworkError::InputTooSmall {
                            side: self.input_side,
                            min: MIN_INPUT_SIDE,
                        });
                    }
                    vec![h / 2, w / 2, c]
                }
                (LayerSpec::Dropout { .. }, s) => s.to_vec(),
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Dense { units } | LayerSpec::Softmax { units }, &[_]) => vec![units],
                (l, s) => {
                    return Err(NetworkError::InvalidConfig(format!(
                        "layer {i} ({}) cannot take input of shape {s:?}",
                        l.name()
                    )))
                }
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    fn validate_structure(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        if self.input_side == 0 || self.input_channels == 0 {
            return bad("input side and channels must be positive".into());
        }
        let Some(LayerSpec::Softmax { .. }) = self.layers.last() else {
            return bad("last layer must be a softmax output layer".into());
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Softmax { .. } if i + 1 != self.layers.len() => {
                    return bad(format!("softmax layer {i} is not last"));
                }
                LayerSpec::Conv { out_channels: 0 }
                | LayerSpec::Dense { units: 0 }
                | LayerSpec::Softmax { units: 0 } => {
                    return bad(format!("layer {i} has zero width"));
                }
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                    return bad(format!("dropout rate {rate} outside [0, 1)"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Trainable parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T: Scalar = f32> {
    Conv(ConvParams<T>),
    Dense(DenseParams<T>),
    None,
}

impl<T: Scalar> LayerParams<T> {
    pub fn param_count(&self) -> usize {
        match self {
            LayerParams::Conv(p) => p.param_count(),
            LayerParams::Dense(p) => p.param_count(),
            LayerParams::None => 0,
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            LayerParams::Conv(p) => {
                let (kh, kw, ci, co) = p.dims();
                LayerParams::Conv(ConvParams::zeros(kh, kw, ci, co))
            }
            LayerParams::Dense(p) => {
                let (i, o) = p.dims();
                LayerParams::Dense(DenseParams::zeros(i, o))
            }
            LayerParams::None => LayerParams::None,
        }
    }

    fn cast<U: Scalar>(&self) -> LayerParams<U> {
        match self {
            LayerParams::Conv(p) => LayerParams::Conv(p.cast()),
            LayerParams::Dense(p) => LayerParams::Dense(p.cast()),
            LayerParams::None => LayerParams::None,
        }
    }

    /// Weight tensor then bias, for layers that have them.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            LayerParams::Conv(p) => vec![&p.kernels, &p.bias],
            LayerParams::Dense(p) => vec![&p.weights, &p.bias],
            LayerParams::None => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            LayerParams::Conv(p) => vec![&mut p.kernels, &mut p.bias],
            LayerParams::Dense(p) => vec![&mut p.weights, &mut p.bias],
            LayerParams::None => vec![],
        }
    }
}

/// Parameter-shaped gradient set.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net.params.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(LayerParams::tensors).collect()
    }

    /// All gradient values in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn scale(&mut self, factor: T) {
        for layer in &mut self.layers {
            for t in layer.tensors_mut() {
                for v in t.data_mut() {
                    *v *= factor;
                }
            }
        }
    }
}

/// Per-layer dropout scale factors for one sample (`0` or `1 / (1 - rate)`).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMasks<T: Scalar = f32> {
    layers: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> SampleMasks<T> {
    pub fn layer(&self, idx: usize) -> Option<&[T]> {
        self.layers.get(idx).and_then(|m| m.as_deref())
    }

    pub fn cast<U: Scalar>(&self) -> SampleMasks<U> {
        SampleMasks {
            layers: self
                .layers
                .iter()
                .map(|m| m.as_ref().map(|v| v.iter().map(|x| U::of_f64(x.as_f64())).collect()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations recorded during a training-mode forward pass for one sample.
#[derive(Debug, Clone)]
struct SampleTrace<T: Scalar> {
    /// Input to each layer.
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of conv/dense layers.
    pre: Vec<Option<Tensor<T>>>,
    pools: Vec<Option<PoolIndex>>,
    probs: Tensor<T>,
}

/// Everything [`Network::backward`] needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar = f32> {
    version: u64,
    traces: Vec<SampleTrace<T>>,
    masks: Vec<SampleMasks<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.traces.len()
    }

    /// Dropout masks drawn for sample `i`.
    pub fn masks(&self, i: usize) -> &SampleMasks<T> {
        &self.masks[i]
    }

    /// Mean cross-entropy of the cached predictions.
    pub fn mean_loss(&self, targets: &[usize]) -> Result<T, NetworkError> {
        check_targets(self.traces.len(), targets)?;
        let mut total = T::zero();
        for (trace, &t) in self.traces.iter().zip(targets) {
            total += cross_entropy(&trace.probs, t)?.0;
        }
        Ok(total / T::of_f64(targets.len() as f64))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar = f32> {
    /// `[n, classes]` class probabilities.
    pub probs: Tensor<T>,
    /// Present in [`Mode::Train`].
    pub cache: Option<ForwardCache<T>>,
}

fn check_targets(n: usize, targets: &[usize]) -> Result<(), NetworkError> {
    if targets.len() != n {
        return Err(NetworkError::StaleCache(format!(
            "cache holds {n} samples but {} targets were given",
            targets.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    params: Vec<LayerParams<T>>,
    rng_seed: u64,
    version: u64,
}

/// Builds the canonical FireNet with seeded initialization.
pub fn build_firenet(input_side: usize, seed: u64) -> Result<Network<f32>, NetworkError> {
    if input_side < MIN_INPUT_SIDE {
        return Err(NetworkError::InputTooSmall {
            side: input_side,
            min: MIN_INPUT_SIDE,
        });
    }
    Network::new(NetworkConfig::firenet(input_side), seed)
}

impl<T: Scalar> Network<T> {
    /// Instantiates `config` with He-normal hidden layers, a Xavier-normal
    /// output layer and zero biases.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        let shapes = config.activation_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_shape = config.input_shape();
        let mut params = Vec::with_capacity(config.layers.len());
        for (layer, out_shape) in config.layers.iter().zip(&shapes) {
            let p = match *layer {
                LayerSpec::Conv { out_channels } => {
                    let c_in = in_shape[2];
                    let fan_in = KERNEL_SIDE * KERNEL_SIDE * c_in;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let kernels = normal_tensor(&[KERNEL_SIDE, KERNEL_SIDE, c_in, out_channels], std, &mut rng);
                    LayerParams::Conv(ConvParams::new(kernels, Tensor::zeros(&[out_channels]))?)
                }
                LayerSpec::Dense { units } => {
                    let n_in = in_shape[0];
                    let std = (2.0 / n_in as f64).sqrt();
                    let w = normal_tensor(&[n_in, units], std, &mut rng);
                    LayerParams::Dense(DenseParams::new(w, Tensor::zeros(&[units]))?)
                }
                LayerSpec::Softmax { units } => {
                    let n_in = in_shape[0];
                    let std = (2.0 / (n_in + units) as f64).sqrt();
                    let w = normal_tensor(&[n_in, units], std, &mut rng);
                    LayerParams::Dense(DenseParams::new(w, Tensor::zeros(&[units]))?)
                }
                _ => LayerParams::None,
            };
            params.push(p);
            in_shape = out_shape.clone();
        }
        Ok(Self {
            config,
            params,
            rng_seed: seed,
            version: 0,
        })
    }

    /// Assembles a network from explicit parameters.
    pub fn from_parts(config: NetworkConfig, params: Vec<LayerParams<T>>, rng_seed: u64) -> Result<Self, NetworkError> {
        let template = Network::<T>::new(config.clone(), 0)?;
        if params.len() != template.params.len() {
            return Err(NetworkError::InvalidConfig(format!(
                "{} parameter blocks for {} layers",
                params.len(),
                template.params.len()
            )));
        }
        for (i, (got, want)) in params.iter().zip(&template.params).enumerate() {
            let gs: Vec<_> = got.tensors().iter().map(|t| t.shape().to_vec()).collect();
            let ws: Vec<_> = want.tensors().iter().map(|t| t.shape().to_vec()).collect();
            if gs != ws {
                return Err(NetworkError::InvalidConfig(format!(
                    "layer {i} parameter shapes {gs:?}, expected {ws:?}"
                )));
            }
        }
        Ok(Self {
            config,
            params,
            rng_seed,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn input_side(&self) -> usize {
        self.config.input_side
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn layer_params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    /// Mutable access to the parameters. Invalidates outstanding forward caches.
    pub fn layer_params_mut(&mut self) -> &mut [LayerParams<T>] {
        self.version += 1;
        &mut self.params
    }

    /// Mutable views of every parameter tensor in file/payload order.
    /// Invalidates outstanding forward caches.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.version += 1;
        self.params.iter_mut().flat_map(LayerParams::tensors_mut).collect()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        self.params.iter().flat_map(LayerParams::tensors).collect()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(LayerParams::param_count).sum()
    }

    /// Parameter count of each layer (zero for parameter-free layers).
    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.params.iter().map(LayerParams::param_count).collect()
    }

    /// Sets every dropout rate to `rate`.
    pub fn set_dropout_rate(&mut self, rate: f32) -> Result<(), NetworkError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NetworkError::InvalidConfig(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        for layer in &mut self.config.layers {
            if let LayerSpec::Dropout { rate: r } = layer {
                *r = rate;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.iter().map(LayerParams::cast).collect(),
            rng_seed: self.rng_seed,
            version: 0,
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<(), NetworkError> {
        if image.shape() != self.config.input_shape() {
            return Err(NetworkError::BatchShape {
                side: self.config.input_side,
                channels: self.config.input_channels,
                got: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn split_batch(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>, NetworkError> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.config.input_shape()[..] {
            return Err(NetworkError::BatchShape {
                side: self.config.input_side,
                channels: self.config.input_channels,
                got: shape.to_vec(),
            });
        }
        let per = shape[1] * shape[2] * shape[3];
        batch
            .data()
            .chunks_exact(per)
            .map(|c| Tensor::new(shape[1..].to_vec(), c.to_vec()).map_err(NetworkError::from))
            .collect()
    }

    /// Draws dropout masks for one sample. Layers with rate 0 get no mask.
    pub fn draw_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampleMasks<T>, NetworkError> {
        let shapes = self.config.activation_shapes()?;
        let layers = self
            .config
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, shape)| match *layer {
                LayerSpec::Dropout { rate } if rate > 0.0 => {
                    let n: usize = shape.iter().product();
                    let keep = T::of_f64(1.0 / (1.0 - rate as f64));
                    Some(
                        (0..n)
                            .map(|_| if rng.random::<f32>() < rate { T::zero() } else { keep })
                            .collect(),
                    )
                }
                _ => None,
            })
            .collect();
        Ok(SampleMasks { layers })
    }

    fn apply_layer(
        &self,
        idx: usize,
        x: Tensor<T>,
        masks: Option<&SampleMasks<T>>,
        trace: Option<&mut SampleTrace<T>>,
    ) -> Result<Tensor<T>, NetworkError> {
        let mut pre = None;
        let mut pool = None;
        let out = match (&self.config.layers[idx], &self.params[idx]) {
            (LayerSpec::Conv { .. }, LayerParams::Conv(p)) => {
                let z = conv2d_forward(&x, p)?;
                let a = relu(&z);
                pre = Some(z);
                a
            }
            (LayerSpec::Dense { .. }, LayerParams::Dense(p)) => {
                let z = dense_forward(&x, p)?;
                let a = relu(&z);
                pre = Some(z);
                a
            }
            (LayerSpec::Softmax { .. }, LayerParams::Dense(p)) => softmax(&dense_forward(&x, p)?),
            (LayerSpec::MaxPool, _) => {
                let (y, index) = maxpool2_forward(&x)?;
                pool = Some(index);
                y
            }
            (LayerSpec::Dropout { .. }, _) => match masks.and_then(|m| m.layer(idx)) {
                Some(mask) => {
                    if mask.len() != x.len() {
                        return Err(NetworkError::StaleCache(format!(
                            "dropout mask for layer {idx} has {} entries, activation has {}",
                            mask.len(),
                            x.len()
                        )));
                    }
                    let mut y = x.clone();
                    for (v, &m) in y.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    y
                }
                None => x.clone(),
            },
            (LayerSpec::Flatten, _) => {
                let n = x.len();
                x.clone().reshape(&[n])?
            }
            (spec, _) => {
                return Err(NetworkError::InvalidConfig(format!(
                    "layer {idx} ({}) has mismatched parameters",
                    spec.name()
                )))
            }
        };
        if let Some(t) = trace {
            t.inputs.push(x);
            t.pre.push(pre);
            t.pools.push(pool);
        }
        Ok(out)
    }

    /// Runs layers `start..` on `activation`, which must be the input of
    /// layer `start`. Returns class probabilities.
    pub fn forward_from(
        &self,
        start: usize,
        activation: &Tensor<T>,
        masks: Option<&SampleMasks<T>>,
    ) -> Result<Tensor<T>, NetworkError> {
        let mut x = activation.clone();
        for idx in start..self.config.layers.len() {
            x = self.apply_layer(idx, x, masks, None)?;
        }
        Ok(x)
    }

    /// Input activation of every layer for one image.
    pub fn layer_inputs(
        &self,
        image: &Tensor<T>,
        masks: Option<&SampleMasks<T>>,
    ) -> Result<Vec<Tensor<T>>, NetworkError> {
        self.check_image(image)?;
        let mut trace = SampleTrace {
            inputs: Vec::new(),
            pre: Vec::new(),
            pools: Vec::new(),
            probs: Tensor::zeros(&[1]),
        };
        let mut x = image.clone();
        for idx in 0..self.config.layers.len() {
            x = self.apply_layer(idx, x, masks, Some(&mut trace))?;
        }
        Ok(trace.inputs)
    }

    /// Evaluation-mode class probabilities for one `[side, side, c]` image.
    pub fn predict_image(&self, image: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check_image(image)?;
        self.forward_from(0, image, None)
    }

    /// Evaluation-mode probabilities `[n, classes]` for a batch `[n, side, side, c]`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let images = self.split_batch(batch)?;
        let k = self.config.num_classes();
        let mut out = Vec::with_capacity(images.len() * k);
        for image in &images {
            out.extend_from_slice(self.forward_from(0, image, None)?.data());
        }
        Ok(Tensor::new(vec![images.len(), k], out)?)
    }

    /// Forward pass over a batch. In [`Mode::Train`] dropout masks are drawn
    /// from `rng` and a cache for [`Network::backward`] is returned.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput<T>, NetworkError> {
        match mode {
            Mode::Eval => Ok(ForwardOutput {
                probs: self.predict(batch)?,
                cache: None,
            }),
            Mode::Train => {
                let images = self.split_batch(batch)?;
                let mut masks = Vec::with_capacity(images.len());
                for _ in &images {
                    masks.push(self.draw_masks(rng)?);
                }
                let cache = self.forward_train_with_masks(images, masks)?;
                let k = self.config.num_classes();
                let probs: Vec<T> = cache
                    .traces
                    .iter()
                    .flat_map(|t| t.probs.data().iter().copied())
                    .collect();
                Ok(ForwardOutput {
                    probs: Tensor::new(vec![cache.traces.len(), k], probs)?,
                    cache: Some(cache),
                })
            }
        }
    }

    /// Training forward pass with caller-provided dropout masks, one per image.
    pub fn forward_train_with_masks(
        &self,
        images: Vec<Tensor<T>>,
        masks: Vec<SampleMasks<T>>,
    ) -> Result<ForwardCache<T>, NetworkError> {
        if images.len() != masks.len() {
            return Err(NetworkError::StaleCache(format!(
                "{} images but {} mask sets",
                images.len(),
                masks.len()
            )));
        }
        let mut traces = Vec::with_capacity(images.len());
        for (image, m) in images.into_iter().zip(&masks) {
            self.check_image(&image)?;
            let mut trace = SampleTrace {
                inputs: Vec::with_capacity(self.config.layers.len()),
                pre: Vec::with_capacity(self.config.layers.len()),
                pools: Vec::with_capacity(self.config.layers.len()),
                probs: Tensor::zeros(&[1]),
            };
            let mut x = image;
            for idx in 0..self.config.layers.len() {
                x = self.apply_layer(idx, x, Some(m), Some(&mut trace))?;
            }
            trace.probs = x;
            traces.push(trace);
        }
        Ok(ForwardCache {
            version: self.version,
            traces,
            masks,
        })
    }

    /// Gradients of the batch-mean cross-entropy with respect to every
    /// parameter, using the activations and masks recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache<T>, targets: &[usize]) -> Result<Gradients<T>, NetworkError> {
        if cache.version != self.version {
            return Err(NetworkError::StaleCache(format!(
                "cache built against parameter version {}, network is at {}",
                cache.version, self.version
            )));
        }
        check_targets(cache.traces.len(), targets)?;
        let n_layers = self.config.layers.len();
        let mut grads = Gradients::zeros_like(self);
        for ((trace, masks), &target) in cache.traces.iter().zip(&cache.masks).zip(targets) {
            if trace.inputs.len() != n_layers {
                return Err(NetworkError::StaleCache("trace does not cover every layer".into()));
            }
            let (_, mut g) = cross_entropy(&trace.probs, target)?;
            for idx in (0..n_layers).rev() {
                let x = &trace.inputs[idx];
                g = match (&self.config.layers[idx], &self.params[idx], &mut grads.layers[idx]) {
                    (LayerSpec::Softmax { .. }, LayerParams::Dense(p), LayerParams::Dense(acc)) => {
                        dense_backward_accumulate(x, p, &g, acc)?
                    }
                    (LayerSpec::Dense { .. }, LayerParams::Dense(p), LayerParams::Dense(acc)) => {
                        let z = trace.pre[idx]
                            .as_ref()
                            .ok_or_else(|| NetworkError::StaleCache("missing pre-activation".into()))?;
                        let gz = relu_backward(z, &g)?;
                        dense_backward_accumulate(x, p, &gz, acc)?
                    }
                    (LayerSpec::Conv { .. }, LayerParams::Conv(p), LayerParams::Conv(acc)) => {
                        let z = trace.pre[idx]
                            .as_ref()
                            .ok_or_else(|| NetworkError::StaleCache("missing pre-activation".into()))?;
                        let gz = relu_backward(z, &g)?;
                        match conv2d_backward_accumulate(x, p, &gz, acc, idx > 0)? {
                            Some(gi) => gi,
                            None => break,
                        }
                    }
                    (LayerSpec::MaxPool, _, _) => {
                        let index = trace.pools[idx]
                            .as_ref()
                            .ok_or_else(|| NetworkError::StaleCache("missing pool index".into()))?;
                        maxpool2_backward(index, &g)?
                    }
                    (LayerSpec::Dropout { .. }, _, _) => {
                        if let Some(mask) = masks.layer(idx) {
                            for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                                *v *= m;
                            }
                        }
                        g
                    }
                    (LayerSpec::Flatten, _, _) => g.reshape(x.shape())?,
                    (spec, _, _) => {
                        return Err(NetworkError::InvalidConfig(format!(
                            "layer {idx} ({}) has mismatched parameters",
                            spec.name()
                        )))
                    }
                };
            }
        }
        grads.scale(T::one() / T::of_f64(targets.len() as f64));
        Ok(grads)
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of_f64(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_parameter_breakdown() {
        let net = build_firenet(64, 7).unwrap();
        assert_eq!(net.config().layers.len(), 14);
        let nonzero: Vec<usize> = net.layer_param_counts().into_iter().filter(|&c| c > 0).collect();
        assert_eq!(nonzero, [448, 4_640, 18_496, 590_080, 32_896, 258]);
        assert_eq!(net.param_count(), 646_818);
        assert_eq!(build_firenet(128, 7).unwrap().param_count(), 3_268_258);
    }

    #[test]
    fn single_dense_layer_net() {
        let config = NetworkConfig {
            input_side: 1,
            input_channels: 2,
            layers: vec![LayerSpec::Flatten, LayerSpec::Softmax { units: 2 }],
            class_labels: vec!["a".into(), "b".into()],
        };
        assert_eq!(Network::<f32>::new(config, 0).unwrap().param_count(), 6);
    }

    #[test]
    fn rejects_small_inputs_and_bad_configs() {
        assert!(matches!(build_firenet(20, 0), Err(NetworkError::InputTooSmall { .. })));
        let mut config = NetworkConfig::firenet(64);
        config.layers.pop();
        assert!(Network::<f32>::new(config, 0).is_err());
        let mut config = NetworkConfig::firenet(64);
        config.layers[2] = LayerSpec::Dropout { rate: 1.0 };
        assert!(Network::<f32>::new(config, 0).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        assert_eq!(build_firenet(32, 3).unwrap(), build_firenet(32, 3).unwrap());
        assert_ne!(build_firenet(32, 3).unwrap(), build_firenet(32, 4).unwrap());
        let net = build_firenet(32, 3).unwrap();
        for (layer, p) in net.config().layers.iter().zip(net.layer_params()) {
            if let LayerParams::Conv(c) = p {
                assert!(c.bias.data().iter().all(|&b| b == 0.0), "{}", layer.name());
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = build_firenet(24, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = Tensor::filled(&[2, 24, 24, 3], 0.5);
        let out = net.forward(&batch, Mode::Train, &mut rng).unwrap();
        let cache = out.cache.unwrap();
        assert!(matches!(net.backward(&cache, &[0]), Err(NetworkError::StaleCache(_))));
        net.layer_params_mut();
        assert!(matches!(
            net.backward(&cache, &[0, 1]),
            Err(NetworkError::StaleCache(_))
        ));
    }

    #[test]
    fn batch_shape_is_checked() {
        let net = build_firenet(24, 1).unwrap();
        assert!(matches!(
            net.predict(&Tensor::zeros(&[1, 25, 24, 3])),
            Err(NetworkError::BatchShape { .. })
        ));
    }
}
