//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use odil::data::{BenchmarkSpec, DomainSpec, Severity, ShiftSpec};
use odil::experiment::{DomainSource, ExperimentConfig};
use odil::nn::{Layer, LayerSpec, ModelConfig, ParamId};
use odil::{Mode, Model, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Small randomized architectures that together cover every layer type.
pub fn small_config(variant: u64, rng: &mut ChaCha8Rng) -> ModelConfig {
    let classes = rng.random_range(2..5);
    let c1 = rng.random_range(1..4);
    let c2 = rng.random_range(2..4);
    let (input_shape, layers) = match variant % 4 {
        0 => (
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv2d { out_channels: c1, kernel: 3, padding: 0 },
                LayerSpec::BatchNorm { channels: c1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { out_channels: c2, kernel: 3, padding: 0 },
                LayerSpec::BatchNorm { channels: c2 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Classifier,
            ],
        ),
        1 => (
            vec![2, 5, 5],
            vec![
                LayerSpec::Conv2d { out_channels: c1, kernel: 3, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { out_channels: c2, kernel: 2, padding: 0 },
                LayerSpec::BatchNorm { channels: c2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out_features: 4 },
                LayerSpec::BatchNorm { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::Classifier,
            ],
        ),
        2 => (
            vec![5],
            vec![
                LayerSpec::Dense { out_features: 6 },
                LayerSpec::BatchNorm { channels: 6 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_features: 3 },
                LayerSpec::Relu,
                LayerSpec::Classifier,
            ],
        ),
        _ => (
            vec![1, 7, 7],
            vec![
                LayerSpec::Conv2d { out_channels: c1, kernel: 3, padding: 1 },
                LayerSpec::BatchNorm { channels: c1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { out_channels: c2, kernel: 3, padding: 0 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Classifier,
            ],
        ),
    };
    ModelConfig {
        input_shape,
        classes,
        layers,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

/// Randomizes batchnorm scale/shift and layer biases. Zero biases behind a
/// ReLU can leave pre-activations exactly at the kink, where finite
/// differences see half the slope.
pub fn perturb_affine(model: &mut Model, rng: &mut ChaCha8Rng) {
    use odil::nn::ParamKind;
    for id in model.param_ids() {
        if matches!(id.kind, ParamKind::Gamma | ParamKind::Beta | ParamKind::Bias) {
            let p = model.param_mut(id).unwrap();
            for v in p.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
}

fn loss(model: &Model, x: &Tensor, weights: &Tensor) -> f64 {
    let mut m = model.clone();
    let logits = m.forward(x, Mode::Train).unwrap();
    logits.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Result of a finite-difference gradient check.
pub struct GradCheck {
    /// Largest relative error over all parameter entries.
    pub worst: f64,
    pub checked: usize,
    /// Entries where steps `h` and `h / 10` disagreed and the smaller step was used.
    pub kinks: usize,
}

/// Compares the analytic gradient of `sum(weights * logits)` (train mode) with
/// central finite differences of step `h`. The denominator is floored at
/// `floor` so entries that are zero up to rounding do not dominate.
///
/// If the loss is smooth on `[-h, h]`, steps `h` and `h / 10` agree to
/// `O(h^2)`. When they disagree the interval usually straddles a ReLU kink, so
/// the smaller step is used for that entry and the entry is counted.
pub fn max_gradient_error(model: &Model, x: &Tensor, weights: &Tensor, h: f64, floor: f64) -> GradCheck {
    let mut m = model.clone();
    m.forward(x, Mode::Train).unwrap();
    let grads = m.backward(weights).unwrap();
    let mut out = GradCheck {
        worst: 0.0,
        checked: 0,
        kinks: 0,
    };
    for id in model.param_ids() {
        let analytic = grads.get(id).unwrap_or_else(|| panic!("no gradient for {id:?}"));
        let n = model.param(id).unwrap().len();
        for i in 0..n {
            let coarse = central_difference(model, id, i, x, weights, h);
            let fine = central_difference(model, id, i, x, weights, h / 10.0);
            let numeric = if (coarse - fine).abs() > 1e-6 * fine.abs().max(floor) {
                out.kinks += 1;
                fine
            } else {
                coarse
            };
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.worst = out.worst.max(rel);
            out.checked += 1;
        }
    }
    out
}

fn central_difference(model: &Model, id: ParamId, i: usize, x: &Tensor, weights: &Tensor, h: f64) -> f64 {
    let mut plus = model.clone();
    plus.param_mut(id).unwrap().data_mut()[i] += h;
    let mut minus = model.clone();
    minus.param_mut(id).unwrap().data_mut()[i] -= h;
    (loss(&plus, x, weights) - loss(&minus, x, weights)) / (2.0 * h)
}

/// Straight-line eval-mode forward of a model, written with explicit loops and
/// no shared code with the library.
pub fn scalar_forward_eval(model: &Model, x: &Tensor) -> Vec<Vec<f64>> {
    let batch = x.shape()[0];
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut shape: Vec<usize> = x.shape()[1..].to_vec();
        let mut h: Vec<f64> = x.item(b).to_vec();
        for layer in model.layers() {
            match layer {
                Layer::Conv2d(conv) => {
                    let w = &conv.weight;
                    let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                    let p = conv.padding as isize;
                    let (hh, ww) = (shape[1], shape[2]);
                    let (ho, wo) = (hh + 2 * conv.padding - k + 1, ww + 2 * conv.padding - k + 1);
                    let mut y = vec![0.0; cout * ho * wo];
                    for o in 0..cout {
                        for i in 0..ho {
                            for j in 0..wo {
                                let mut s = conv.bias.data()[o];
                                for c in 0..cin {
                                    for di in 0..k {
                                        for dj in 0..k {
                                            let r = i as isize + di as isize - p;
                                            let q = j as isize + dj as isize - p;
                                            if r < 0 || q < 0 || r >= hh as isize || q >= ww as isize {
                                                continue;
                                            }
                                            let xv = h[(c * hh + r as usize) * ww + q as usize];
                                            let wv = w.data()[((o * cin + c) * k + di) * k + dj];
                                            s += xv * wv;
                                        }
                                    }
                                }
                                y[(o * ho + i) * wo + j] = s;
                            }
                        }
                    }
                    h = y;
                    shape = vec![cout, ho, wo];
                }
                Layer::Dense(d) => {
                    let (o, n) = (d.weight.shape()[0], d.weight.shape()[1]);
                    h = (0..o)
                        .map(|r| d.bias.data()[r] + (0..n).map(|c| d.weight.data()[r * n + c] * h[c]).sum::<f64>())
                        .collect();
                    shape = vec![o];
                }
                Layer::BatchNorm(bn) => {
                    let channels = shape[0];
                    let per: usize = shape[1..].iter().product();
                    for c in 0..channels {
                        let denom = (bn.running_var()[c] + bn.eps()).sqrt();
                        for v in &mut h[c * per..(c + 1) * per] {
                            *v = bn.gamma.data()[c] * (*v - bn.running_mean()[c]) / denom + bn.beta.data()[c];
                        }
                    }
                }
                Layer::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
                Layer::GlobalAvgPool => {
                    let per: usize = shape[1..].iter().product();
                    h = (0..shape[0]).map(|c| h[c * per..(c + 1) * per].iter().sum::<f64>() / per as f64).collect();
                    shape = vec![shape[0]];
                }
            }
        }
        out.push(h);
    }
    out
}

/// EMA closed form for a constant batch statistic: `(1-a)^J m0 + (1 - (1-a)^J) m`.
pub fn ema_closed_form(m0: f64, m: f64, alpha: f64, j: i32) -> f64 {
    let keep = (1.0 - alpha).powi(j);
    keep * m0 + (1.0 - keep) * m
}

/// `omega^k alpha0 + delta (1 - omega^k) / (1 - omega)`.
pub fn momentum_closed_form(alpha0: f64, omega: f64, delta: f64, k: i32) -> f64 {
    let w = omega.powi(k);
    w * alpha0 + delta * (1.0 - w) / (1.0 - omega)
}

fn tiny_domain(id: u32, classes: Vec<usize>, severity: Severity, sizes: (usize, usize), per_class: usize) -> DomainSource {
    DomainSource::Synthetic(DomainSpec {
        id,
        name: format!("tiny-{id}"),
        classes,
        shift: ShiftSpec::Preset { severity },
        components: 1,
        train_size: sizes.0,
        test_size: sizes.1,
        test_only: sizes.0 == 0,
        adapt_per_class: per_class,
        seed: 0,
    })
}

/// A four-domain, five-class experiment on 8x8 inputs that runs in well under a second.
pub fn tiny_config(output_dir: &std::path::Path) -> ExperimentConfig {
    let all: Vec<usize> = (0..5).collect();
    ExperimentConfig {
        seed: 3,
        benchmark: BenchmarkSpec {
            side: 8,
            num_classes: 5,
            base_noise: 1.0,
            ..BenchmarkSpec::default()
        },
        stream: vec![
            tiny_domain(1, all.clone(), Severity::Mild, (40, 20), 1),
            tiny_domain(2, all.clone(), Severity::Moderate, (20, 15), 1),
            tiny_domain(3, all, Severity::Mild, (0, 15), 1),
            tiny_domain(4, vec![1, 2], Severity::Severe, (20, 10), 2),
        ],
        model: ModelConfig {
            input_shape: vec![1, 8, 8],
            classes: 5,
            layers: vec![
                LayerSpec::Conv2d { out_channels: 3, kernel: 3, padding: 0 },
                LayerSpec::BatchNorm { channels: 3 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { out_channels: 4, kernel: 3, padding: 0 },
                LayerSpec::BatchNorm { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Classifier,
            ],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        },
        train: TrainConfig {
            batch_size: 8,
            base_epochs: 4,
            offline_epochs: 3,
            ..TrainConfig::default()
        },
        output_dir: output_dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}
