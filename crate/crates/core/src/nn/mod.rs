//! Minimal differentiable network: layers, loss, optimizer, schedule, checkpoints.

mod checkpoint;
mod layers;
mod loss;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{diff_checkpoints, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{Conv2d, Dense};
pub use loss::softmax_cross_entropy;
pub use optim::{cosine_lr, sgd_update, LrSchedule, ScheduleKind, Sgd};

use crate::batchnorm::{BnCache, BnState, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer descriptor in a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { out_features: usize },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm { channels: usize },
    Relu,
    GlobalAvgPool,
    /// Terminal dense layer producing one logit per class.
    Classifier,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-sample input shape, without the batch dimension.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// `2 x [conv 3x3 -> batchnorm -> relu] -> global average pool -> classifier`
    /// over `(1, 16, 16)` inputs.
    pub fn reference(widths: (usize, usize), classes: usize) -> Self {
        Self {
            input_shape: vec![1, 16, 16],
            classes,
            layers: vec![
                LayerSpec::Conv2d { out_channels: widths.0, kernel: 3, padding: 0 },
                LayerSpec::BatchNorm { channels: widths.0 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { out_channels: widths.1, kernel: 3, padding: 0 },
                LayerSpec::BatchNorm { channels: widths.1 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Classifier,
            ],
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Checks layer compatibility and returns the per-sample output shape of every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let classifiers = self.layers.iter().filter(|l| matches!(l, LayerSpec::Classifier)).count();
        if classifiers != 1 || !matches!(self.layers.last(), Some(LayerSpec::Classifier)) {
            return Err(Error::Config("exactly one classifier layer, in terminal position, is required".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (idx, spec) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::LayerShape { layer: idx, msg };
            shape = match *spec {
                LayerSpec::Dense { out_features } => {
                    if out_features == 0 {
                        return Err(bad("dense layer with zero outputs".into()));
                    }
                    vec![out_features]
                }
                LayerSpec::Classifier => vec![self.classes],
                LayerSpec::Conv2d { out_channels, kernel, padding } => {
                    if shape.len() != 3 {
                        return Err(bad(format!("conv2d needs (C, H, W) input, got {shape:?}")));
                    }
                    let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if kernel == 0 || out_channels == 0 || h < kernel || w < kernel {
                        return Err(bad(format!("conv2d kernel {kernel} does not fit {shape:?}")));
                    }
                    vec![out_channels, h - kernel + 1, w - kernel + 1]
                }
                LayerSpec::BatchNorm { channels } => {
                    if shape[0] != channels {
                        return Err(bad(format!("batchnorm declares {channels} channels, input {shape:?}")));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(bad(format!("global average pool needs (C, H, W), got {shape:?}")));
                    }
                    vec![shape[0]]
                }
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BnState),
    Relu,
    GlobalAvgPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Identifies a trainable tensor by layer index and role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

/// Gradient tensors keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Cache {
    Input(Tensor),
    Bn(BnCache),
    ReluMask(Vec<bool>),
    Pool(Vec<usize>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "StoredModel")]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    #[serde(skip)]
    cache: Option<Vec<Cache>>,
}

#[derive(Deserialize)]
struct StoredModel {
    config: ModelConfig,
    layers: Vec<Layer>,
}

impl TryFrom<StoredModel> for Model {
    type Error = Error;

    fn try_from(stored: StoredModel) -> Result<Self> {
        Model::from_parts(stored.config, stored.layers)
    }
}

/// Compares configuration and parameters; retained intermediates are ignored.
impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

impl Model {
    /// Builds a model with fan-in scaled uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut input = config.input_shape.clone();
        for (spec, out) in config.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::Dense { out_features } => {
                    Layer::Dense(Dense::init(&mut rng, input.iter().product(), out_features))
                }
                LayerSpec::Classifier => Layer::Dense(Dense::init(&mut rng, input.iter().product(), config.classes)),
                LayerSpec::Conv2d { out_channels, kernel, padding } => {
                    Layer::Conv2d(Conv2d::init(&mut rng, input[0], out_channels, kernel, padding))
                }
                LayerSpec::BatchNorm { channels } => {
                    Layer::BatchNorm(BnState::new(channels, config.bn_eps, config.bn_momentum)?)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            };
            layers.push(layer);
            input = out.clone();
        }
        Ok(Self { config, layers, cache: None })
    }

    /// Reassembles a model from stored layers, checking them against `config`.
    pub fn from_parts(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        let shapes = config.validate()?;
        if layers.len() != config.layers.len() {
            return Err(Error::Config(format!(
                "{} stored layers for {} descriptors",
                layers.len(),
                config.layers.len()
            )));
        }
        let mut input = config.input_shape.clone();
        for (idx, ((spec, layer), out)) in config.layers.iter().zip(&layers).zip(&shapes).enumerate() {
            let fan_in: usize = input.iter().product();
            let ok = match (spec, layer) {
                (LayerSpec::Dense { out_features }, Layer::Dense(d)) => {
                    d.weight.shape() == [*out_features, fan_in] && d.bias.shape() == [*out_features]
                }
                (LayerSpec::Classifier, Layer::Dense(d)) => {
                    d.weight.shape() == [config.classes, fan_in] && d.bias.shape() == [config.classes]
                }
                (LayerSpec::Conv2d { out_channels, kernel, padding }, Layer::Conv2d(c)) => {
                    c.weight.shape() == [*out_channels, input[0], *kernel, *kernel]
                        && c.bias.shape() == [*out_channels]
                        && c.padding == *padding
                }
                (LayerSpec::BatchNorm { channels }, Layer::BatchNorm(bn)) => {
                    bn.channels() == *channels
                        && bn.gamma.shape() == [*channels]
                        && bn.beta.shape() == [*channels]
                        && bn.running_var().len() == *channels
                }
                (LayerSpec::Relu, Layer::Relu) | (LayerSpec::GlobalAvgPool, Layer::GlobalAvgPool) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::LayerShape {
                    layer: idx,
                    msg: "stored layer does not match its descriptor".into(),
                });
            }
            input = out.clone();
        }
        Ok(Self { config, layers, cache: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Index of the terminal classifier layer.
    pub fn classifier_index(&self) -> usize {
        self.layers.len() - 1
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.config.input_shape.len() + 1
            || x.shape()[1..] != self.config.input_shape[..]
            || x.batch() == 0
        {
            return Err(Error::LayerShape {
                layer: 0,
                msg: format!(
                    "input {:?} does not match (batch, {:?})",
                    x.shape(),
                    self.config.input_shape
                ),
            });
        }
        Ok(())
    }

    /// Forward pass. `Mode::Eval` mutates nothing; `Mode::Train` normalizes with
    /// batch moments, updates batchnorm running statistics and retains
    /// intermediates for [`Model::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => self.forward_train(x),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Dense(d) => d.forward(&h),
                Layer::Conv2d(c) => c.forward(&h),
                Layer::BatchNorm(bn) => bn.forward_eval(&h),
                Layer::Relu => Ok(relu(&h).0),
                Layer::GlobalAvgPool => global_avg_pool(&h),
            }
            .map_err(|e| at_layer(e, idx))?;
        }
        finite_or_err(h, "logits")
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.cache = None;
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            let step = match layer {
                Layer::Dense(d) => d.forward(&h).map(|y| (y, Cache::Input(h.clone()))),
                Layer::Conv2d(c) => c.forward(&h).map(|y| (y, Cache::Input(h.clone()))),
                Layer::BatchNorm(bn) => bn.forward_train(&h).map(|(y, c)| (y, Cache::Bn(c))),
                Layer::Relu => {
                    let (y, mask) = relu(&h);
                    Ok((y, Cache::ReluMask(mask)))
                }
                Layer::GlobalAvgPool => global_avg_pool(&h).map(|y| (y, Cache::Pool(h.shape().to_vec()))),
            };
            let (y, c) = step.map_err(|e| at_layer(e, idx))?;
            cache.push(c);
            h = y;
        }
        self.cache = Some(cache);
        finite_or_err(h, "logits")
    }

    /// Gradients of every trainable parameter for the retained train-mode forward.
    pub fn backward(&mut self, logits_grad: &Tensor) -> Result<Gradients> {
        self.backward_from(logits_grad, 0)
    }

    /// Like [`Model::backward`] but stops below layer `first_layer`, returning
    /// gradients only for parameters of layers `first_layer..`.
    pub fn backward_from(&mut self, logits_grad: &Tensor, first_layer: usize) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let mut grads = Vec::new();
        let mut g = logits_grad.clone();
        for idx in (first_layer..self.layers.len()).rev() {
            let need_dx = idx > first_layer;
            let layer = &self.layers[idx];
            let step: Result<Option<Tensor>> = match (layer, &cache[idx]) {
                (Layer::Dense(d), Cache::Input(x)) => d.backward(x, &g, need_dx).map(|(dx, dw, db)| {
                    grads.push((ParamId { layer: idx, kind: ParamKind::Bias }, db));
                    grads.push((ParamId { layer: idx, kind: ParamKind::Weight }, dw));
                    dx
                }),
                (Layer::Conv2d(c), Cache::Input(x)) => c.backward(x, &g, need_dx).map(|(dx, dw, db)| {
                    grads.push((ParamId { layer: idx, kind: ParamKind::Bias }, db));
                    grads.push((ParamId { layer: idx, kind: ParamKind::Weight }, dw));
                    dx
                }),
                (Layer::BatchNorm(bn), Cache::Bn(c)) => bn.backward(c, &g).map(|(dx, dgamma, dbeta)| {
                    grads.push((ParamId { layer: idx, kind: ParamKind::Beta }, dbeta));
                    grads.push((ParamId { layer: idx, kind: ParamKind::Gamma }, dgamma));
                    Some(dx)
                }),
                (Layer::Relu, Cache::ReluMask(mask)) => {
                    let mut d = g.clone();
                    for (v, &m) in d.data_mut().iter_mut().zip(mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                    Ok(Some(d))
                }
                (Layer::GlobalAvgPool, Cache::Pool(shape)) => global_avg_pool_backward(&g, shape).map(Some),
                _ => Err(Error::NoForwardCache),
            };
            match step.map_err(|e| at_layer(e, idx))? {
                Some(dx) => g = dx,
                None => break,
            }
        }
        grads.reverse();
        for (id, t) in &grads {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {id:?}")));
            }
        }
        Ok(Gradients { entries: grads })
    }

    /// Discards intermediates retained by a train-mode forward.
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Trainable parameter ids in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let kinds: &[ParamKind] = match layer {
                Layer::Dense(_) | Layer::Conv2d(_) => &[ParamKind::Weight, ParamKind::Bias],
                Layer::BatchNorm(_) => &[ParamKind::Gamma, ParamKind::Beta],
                _ => &[],
            };
            ids.extend(kinds.iter().map(|&kind| ParamId { layer: idx, kind }));
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match (self.layers.get(id.layer)?, id.kind) {
            (Layer::Dense(d), ParamKind::Weight) => Some(&d.weight),
            (Layer::Dense(d), ParamKind::Bias) => Some(&d.bias),
            (Layer::Conv2d(c), ParamKind::Weight) => Some(&c.weight),
            (Layer::Conv2d(c), ParamKind::Bias) => Some(&c.bias),
            (Layer::BatchNorm(bn), ParamKind::Gamma) => Some(&bn.gamma),
            (Layer::BatchNorm(bn), ParamKind::Beta) => Some(&bn.beta),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match (self.layers.get_mut(id.layer)?, id.kind) {
            (Layer::Dense(d), ParamKind::Weight) => Some(&mut d.weight),
            (Layer::Dense(d), ParamKind::Bias) => Some(&mut d.bias),
            (Layer::Conv2d(c), ParamKind::Weight) => Some(&mut c.weight),
            (Layer::Conv2d(c), ParamKind::Bias) => Some(&mut c.bias),
            (Layer::BatchNorm(bn), ParamKind::Gamma) => Some(&mut bn.gamma),
            (Layer::BatchNorm(bn), ParamKind::Beta) => Some(&mut bn.beta),
            _ => None,
        }
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnState> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnState> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Channel count of every batchnorm layer, in order.
    pub fn bn_signature(&self) -> Vec<usize> {
        self.bn_layers().map(BnState::channels).collect()
    }

    /// Sets the running-statistics momentum of every batchnorm layer.
    pub fn set_bn_momentum(&mut self, momentum: f64) -> Result<()> {
        for bn in self.bn_layers_mut() {
            bn.set_momentum(momentum)?;
        }
        Ok(())
    }

    /// Eval-mode class predictions, processed in chunks of `batch_size`.
    pub fn predict(&self, x: &Tensor, batch_size: usize) -> Result<Vec<usize>> {
        let n = x.batch();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + batch_size.max(1)).min(n);
            out.extend(self.forward_eval(&x.slice_batch(start, end))?.argmax_rows());
            start = end;
        }
        Ok(out)
    }
}

fn at_layer(err: Error, layer: usize) -> Error {
    match err {
        Error::Shape(msg) => Error::LayerShape { layer, msg },
        Error::DegenerateBatch { population, .. } => Error::DegenerateBatch { layer, population },
        other => other,
    }
}

fn finite_or_err(t: Tensor, what: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn relu(x: &Tensor) -> (Tensor, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    (Tensor::new(x.shape().to_vec(), data).expect("same shape"), mask)
}

fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("global average pool needs (N, C, H, W), got {s:?}")));
    }
    let plane = s[2] * s[3];
    let data = x.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Tensor::new(vec![s[0], s[1]], data)
}

fn global_avg_pool_backward(dy: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let plane = shape[2] * shape[3];
    let mut out = Vec::with_capacity(dy.len() * plane);
    for &g in dy.data() {
        out.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_validates() {
        let shapes = ModelConfig::reference((16, 32), 10).validate().unwrap();
        assert_eq!(shapes[0], vec![16, 14, 14]);
        assert_eq!(shapes[3], vec![32, 12, 12]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
    }

    #[test]
    fn config_errors_name_layer() {
        let mut cfg = ModelConfig::reference((4, 8), 3);
        cfg.layers[1] = LayerSpec::BatchNorm { channels: 5 };
        assert!(matches!(cfg.validate(), Err(Error::LayerShape { layer: 1, .. })));
        let mut cfg = ModelConfig::reference((4, 8), 3);
        cfg.layers.push(LayerSpec::Relu);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn input_mismatch_is_structured() {
        let model = Model::new(ModelConfig::reference((2, 2), 3), 1).unwrap();
        let err = model.forward_eval(&Tensor::zeros(&[1, 1, 8, 8])).unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 0, .. }));
    }

    #[test]
    fn backward_requires_forward() {
        let mut model = Model::new(ModelConfig::reference((2, 2), 3), 1).unwrap();
        assert!(matches!(model.backward(&Tensor::zeros(&[1, 3])), Err(Error::NoForwardCache)));
        model.forward(&Tensor::zeros(&[1, 1, 16, 16]), Mode::Eval).unwrap();
        assert!(matches!(model.backward(&Tensor::zeros(&[1, 3])), Err(Error::NoForwardCache)));
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut model = Model::new(ModelConfig::reference((2, 3), 4), 9).unwrap();
        let idx = model.classifier_index();
        for kind in [ParamKind::Weight, ParamKind::Bias] {
            let p = model.param_mut(ParamId { layer: idx, kind }).unwrap();
            p.data_mut().fill(0.0);
        }
        let x = Tensor::filled(&[3, 1, 16, 16], 0.3);
        let y = model.forward_eval(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
