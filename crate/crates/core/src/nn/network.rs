use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Cache, ConvBank, ConvGroup, Dense, Layer, MaxPool};
use super::real::Real;
use super::tensor::{Pool, Tensor};
use crate::error::{Error, Result};

/// `count` filters of `time x freq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterGroup {
    pub count: usize,
    pub time: usize,
    pub freq: usize,
}

/// First-layer kernel shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfiguration {
    pub name: String,
    pub groups: Vec<FilterGroup>,
}

pub const FILTER_CONFIGURATION_NAMES: [&str; 6] = ["CNN_sq", "CNN_1", "CNN_2", "CNN_3", "CNN_4", "CNN_5"];

impl FilterConfiguration {
    pub fn new(name: impl Into<String>, groups: &[(usize, usize, usize)]) -> Self {
        FilterConfiguration {
            name: name.into(),
            groups: groups
                .iter()
                .map(|&(count, time, freq)| FilterGroup { count, time, freq })
                .collect(),
        }
    }

    /// The named configurations, each with 112 filters in total.
    pub fn named(name: &str) -> Result<Self> {
        let g: &[(usize, usize, usize)] = match name {
            "CNN_sq" => &[(112, 5, 5)],
            "CNN_1" => &[(112, 3, 40)],
            "CNN_2" => &[(64, 3, 20), (48, 3, 70)],
            "CNN_3" => &[(48, 3, 10), (32, 3, 30), (32, 3, 60)],
            "CNN_4" => &[(48, 3, 8), (32, 3, 32), (16, 3, 64), (16, 3, 90)],
            "CNN_5" => &[(36, 3, 6), (22, 3, 26), (22, 3, 48), (16, 3, 70), (16, 3, 96)],
            other => {
                return Err(Error::Config(format!(
                    "unknown filter configuration {other:?} (expected one of {FILTER_CONFIGURATION_NAMES:?})"
                )))
            }
        };
        Ok(Self::new(name, g))
    }

    pub fn total_filters(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }
}

fn default_momentum() -> f64 {
    0.99
}
fn default_epsilon() -> f64 {
    1e-3
}
fn default_l2() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub filter_configuration: FilterConfiguration,
    /// Batch normalization and ReLU on the input patch.
    #[serde(default)]
    pub pre_activation: bool,
    /// Batch normalization and ReLU between the first pooling and the
    /// second convolution.
    #[serde(default)]
    pub pre_activation_mid: bool,
    pub conv2_filters: usize,
    pub conv2_extent: (usize, usize),
    pub pool1: (usize, usize),
    pub pool2: (usize, usize),
    pub classes: usize,
    pub input_frames: usize,
    pub input_bands: usize,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_epsilon")]
    pub bn_epsilon: f64,
}

impl NetworkConfig {
    pub fn with_filters(filter_configuration: FilterConfiguration) -> Self {
        let conv2_filters = 2 * filter_configuration.total_filters();
        NetworkConfig {
            filter_configuration,
            pre_activation: false,
            pre_activation_mid: false,
            conv2_filters,
            conv2_extent: (5, 5),
            pool1: (5, 5),
            pool2: (11, 4),
            classes: 15,
            input_frames: 75,
            input_bands: 128,
            l2: default_l2(),
            bn_momentum: default_momentum(),
            bn_epsilon: default_epsilon(),
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        Ok(Self::with_filters(FilterConfiguration::named(name)?))
    }

    pub fn validate(&self) -> Result<()> {
        let fc = &self.filter_configuration;
        if fc.groups.is_empty() || fc.groups.iter().any(|g| g.count == 0 || g.time == 0 || g.freq == 0) {
            return Err(Error::Config("filter groups need positive counts and extents".into()));
        }
        if self.conv2_filters != 2 * fc.total_filters() {
            return Err(Error::Config(format!(
                "conv2_filters = {} must be twice the first-layer filter count {}",
                self.conv2_filters,
                fc.total_filters()
            )));
        }
        if self.classes < 2 || self.input_frames == 0 || self.input_bands == 0 {
            return Err(Error::Config("need at least 2 classes and a non-empty input".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("bn_momentum in [0,1), bn_epsilon > 0 and l2 >= 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NamedLayer<T> {
    pub name: String,
    pub layer: Layer<T>,
}

#[derive(Debug)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub layers: Vec<NamedLayer<T>>,
    training: bool,
    pool: Pool<T>,
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            config: self.config.clone(),
            layers: self.layers.clone(),
            training: self.training,
            pool: Pool::default(),
        }
    }
}

/// Batch statistics of one batch-normalization layer, for the running
/// estimate update.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Result of one loss/gradient evaluation.
#[derive(Debug, Clone)]
pub struct Step<T> {
    /// Mean cross-entropy plus the L2 term.
    pub loss: f64,
    pub cross_entropy: f64,
    pub probabilities: Tensor<T>,
    /// One entry per parameter tensor, in `Network::params` order.
    pub gradients: Vec<Vec<T>>,
    pub batch_stats: Vec<BatchStats<T>>,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

/// Build and initialize the network described by `config`.
pub fn build_network<T: Real>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<NamedLayer<T>> = Vec::new();
    let mut shape = [1, config.input_frames, config.input_bands];
    let bn = |c| Layer::BatchNorm(BatchNorm::new(c, config.bn_momentum, config.bn_epsilon));

    let mut push = |name: &str, layer: Layer<T>, shape: &mut [usize; 3]| -> Result<()> {
        *shape = layer.out_shape(*shape).map_err(|e| Error::shape(format!("layer {name}: {e}")))?;
        layers.push(NamedLayer {
            name: name.into(),
            layer,
        });
        Ok(())
    };

    if config.pre_activation {
        push("input_bn", bn(1), &mut shape)?;
        push("input_relu", Layer::Relu, &mut shape)?;
    }
    let groups = config
        .filter_configuration
        .groups
        .iter()
        .map(|g| {
            let (pt, pf) = (g.time - 1, g.freq - 1);
            ConvGroup {
                filters: g.count,
                kt: g.time,
                kf: g.freq,
                pad_t: (pt / 2, pt - pt / 2),
                pad_f: (pf / 2, pf - pf / 2),
                weight: glorot(&mut rng, g.count * g.time * g.freq, g.time * g.freq, g.count * g.time * g.freq),
                bias: vec![T::zero(); g.count],
            }
        })
        .collect();
    let c1 = config.filter_configuration.total_filters();
    push(
        "conv1",
        Layer::Conv(ConvBank {
            in_channels: 1,
            groups,
            l2: config.l2,
        }),
        &mut shape,
    )?;
    push("bn1", bn(c1), &mut shape)?;
    push("relu1", Layer::Relu, &mut shape)?;
    push(
        "pool1",
        Layer::MaxPool(MaxPool {
            pt: config.pool1.0,
            pf: config.pool1.1,
        }),
        &mut shape,
    )?;
    if config.pre_activation_mid {
        push("mid_bn", bn(c1), &mut shape)?;
        push("mid_relu", Layer::Relu, &mut shape)?;
    }
    let (kt, kf) = config.conv2_extent;
    let c2 = config.conv2_filters;
    let w2 = glorot(&mut rng, c2 * c1 * kt * kf, c1 * kt * kf, c2 * kt * kf);
    push(
        "conv2",
        Layer::Conv(ConvBank {
            in_channels: c1,
            groups: vec![ConvGroup {
                filters: c2,
                kt,
                kf,
                pad_t: (0, 0),
                pad_f: (0, 0),
                weight: w2,
                bias: vec![T::zero(); c2],
            }],
            l2: config.l2,
        }),
        &mut shape,
    )?;
    push("bn2", bn(c2), &mut shape)?;
    push("relu2", Layer::Relu, &mut shape)?;
    push(
        "pool2",
        Layer::MaxPool(MaxPool {
            pt: config.pool2.0,
            pf: config.pool2.1,
        }),
        &mut shape,
    )?;
    let flat: usize = shape.iter().product();
    let k = config.classes;
    push(
        "dense",
        Layer::Dense(Dense {
            inputs: flat,
            units: k,
            weight: glorot(&mut rng, k * flat, flat, k),
            bias: vec![T::zero(); k],
        }),
        &mut shape,
    )?;
    Ok(Network {
        config: config.clone(),
        layers,
        training: false,
        pool: Pool::default(),
    })
}

fn check_finite<T: Real>(t: &Tensor<T>, layer: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.into(),
            message: "non-finite activation".into(),
        })
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &mut Tensor<T>) {
    let k = logits.item_len();
    for row in logits.data.chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

impl<T: Real> Network<T> {
    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.config.input_frames, self.config.input_bands]
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.layer.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.layer.params_mut()).collect()
    }

    /// `layer.param` names in `params` order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.layer.param_names().into_iter().map(move |p| format!("{}.{p}", l.name)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = self.input_shape();
        if batch.shape[1..] != s || batch.batch() == 0 {
            return Err(Error::shape(format!(
                "input batch {:?}, expected [n, {}, {}, {}]",
                batch.shape, s[0], s[1], s[2]
            )));
        }
        Ok(())
    }

    /// Class probabilities, `[n, classes, 1, 1]`. Batch normalization uses
    /// batch statistics in training mode and running statistics otherwise.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for l in &self.layers {
            x = l.layer.forward_pooled(x, self.training, &self.pool).0;
            check_finite(&x, &l.name)?;
        }
        softmax_rows(&mut x);
        Ok(x)
    }

    /// Mean cross-entropy plus L2 on the convolution weights, and the
    /// gradient of every parameter, always with batch statistics.
    pub fn loss_and_gradients(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<Step<T>> {
        self.check_input(batch)?;
        let n = batch.batch();
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
        }
        let k = self.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad.to_string() });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for l in &self.layers {
            let (y, cache) = l.layer.forward_pooled(x, true, &self.pool);
            check_finite(&y, &l.name)?;
            caches.push(cache.expect("training forward returns a cache"));
            x = y;
        }
        let mut probs = x;
        softmax_rows(&mut probs);

        let ce = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs.data[i * k + y].f64().max(1e-300).ln())
            .sum::<f64>()
            / n as f64;
        let l2: f64 = self.layers.iter().map(|l| l.layer.l2_penalty()).sum();
        let loss = ce + l2;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                layer: "softmax_cross_entropy".into(),
                message: format!("loss is {loss}"),
            });
        }

        let mut dy = probs.clone();
        let inv_n = T::of(1.0 / n as f64);
        for (i, &y) in labels.iter().enumerate() {
            dy.data[i * k + y] -= T::one();
        }
        dy.data.iter_mut().for_each(|v| *v *= inv_n);

        let mut grads: Vec<Vec<T>> = self.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut o = 0;
        for l in &self.layers {
            offsets.push(o);
            o += l.layer.params().len();
        }
        let first_with_params = self.layers.iter().position(|l| !l.layer.params().is_empty()).unwrap_or(0);
        let mut batch_stats = Vec::new();
        for (li, (l, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            if let Cache::BatchNorm { mean, var, .. } = &cache {
                batch_stats.push(BatchStats {
                    layer: li,
                    mean: mean.clone(),
                    var: var.clone(),
                });
            }
            let np = l.layer.params().len();
            let need_dx = li > first_with_params;
            dy = l.layer.backward_pooled(cache, dy, &mut grads[offsets[li]..offsets[li] + np], need_dx, &self.pool);
            if li > 0 {
                check_finite(&dy, &l.name)?;
            }
        }
        batch_stats.reverse();
        Ok(Step {
            loss,
            cross_entropy: ce,
            probabilities: probs,
            gradients: grads,
            batch_stats,
        })
    }

    /// Training-mode loss without gradients.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for l in &self.layers {
            x = l.layer.forward_pooled(x, true, &self.pool).0;
        }
        softmax_rows(&mut x);
        let k = self.classes();
        let ce = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -x.data[i * k + y].f64().max(1e-300).ln())
            .sum::<f64>()
            / labels.len() as f64;
        Ok(ce + self.layers.iter().map(|l| l.layer.l2_penalty()).sum::<f64>())
    }

    /// Fold batch statistics from a training step into the running
    /// estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        for s in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[s.layer].layer {
                bn.update_running(&s.mean, &s.var);
            }
        }
    }

    /// Running statistics of every batch-normalization layer.
    pub fn buffers(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .filter_map(|l| match &l.layer {
                Layer::BatchNorm(bn) => Some([&bn.running_mean[..], &bn.running_var[..]]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match &mut l.layer {
                Layer::BatchNorm(bn) => Some([&mut bn.running_mean, &mut bn.running_var]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out: Network<U> = build_network(&self.config, 0).expect("config already validated");
        for (d, s) in out.params_mut().into_iter().zip(self.params()) {
            *d = s.iter().map(|v| U::of(v.f64())).collect();
        }
        for (d, s) in out.buffers_mut().into_iter().zip(self.buffers()) {
            *d = s.iter().map(|v| U::of(v.f64())).collect();
        }
        out.training = self.training;
        out
    }
}
