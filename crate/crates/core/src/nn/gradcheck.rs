//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::Layer;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::Result;

/// Largest relative error seen and how many coordinates were compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: usize,
    /// Coordinates where the step straddles a ReLU or max-pool switch: the
    /// central difference only agrees once the step shrinks.
    pub kinks: usize,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck {
            max_rel_error: 0.0,
            checked: 0,
            failures: 0,
            kinks: 0,
        }
    }

    /// Relative error; differences below `floor` are treated as exact.
    fn record(&mut self, analytic: f64, numeric: f64, tol: f64, floor: f64) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if diff < floor { 0.0 } else { diff / scale };
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
        if rel >= tol {
            self.failures += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

pub fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor {
        shape,
        data: (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

fn coords(len: usize, per_tensor: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match per_tensor {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Check one layer in training mode against the scalar objective
/// `sum(forward(x) * r)` for a fixed random `r`. Both parameter and input
/// gradients are compared.
pub fn check_layer(layer: &Layer<f64>, x: &Tensor<f64>, seed: u64, step: f64, tol: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y0, _) = layer.forward(x.clone(), true);
    let r = random_tensor(y0.shape, &mut rng);
    let objective = |l: &Layer<f64>, x: &Tensor<f64>| -> f64 {
        let (y, _) = l.forward(x.clone(), true);
        y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>() + l.l2_penalty()
    };
    // resolution of the central difference: rounding in the objective
    // terms divided by the step
    let magnitude = y0.data.iter().zip(&r.data).map(|(a, b)| (a * b).abs()).sum::<f64>() + layer.l2_penalty().abs();
    let floor = (16.0 * f64::EPSILON * magnitude / step).max(1e-9);

    let (_, cache) = layer.forward(x.clone(), true);
    let mut grads: Vec<Vec<f64>> = layer.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let dx = layer.backward(cache.expect("train cache"), r.clone(), &mut grads, true);

    let mut report = GradCheck::new();
    let mut probe = layer.clone();
    for (pi, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.params_mut()[pi][i];
            probe.params_mut()[pi][i] = orig + step;
            let up = objective(&probe, x);
            probe.params_mut()[pi][i] = orig - step;
            let down = objective(&probe, x);
            probe.params_mut()[pi][i] = orig;
            report.record(g[i], (up - down) / (2.0 * step), tol, floor);
        }
    }
    let mut xp = x.clone();
    for i in 0..x.data.len() {
        let orig = xp.data[i];
        xp.data[i] = orig + step;
        let up = objective(layer, &xp);
        xp.data[i] = orig - step;
        let down = objective(layer, &xp);
        xp.data[i] = orig;
        report.record(dx.data[i], (up - down) / (2.0 * step), tol, floor);
    }
    report
}

/// Check the full loss against its parameter gradients. With
/// `per_tensor = Some(k)` only `k` random coordinates of each parameter
/// tensor are probed.
pub fn check_network(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    per_tensor: Option<usize>,
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let analytic = net.loss_and_gradients(x, labels)?.gradients;
    let mut probe = net.clone();
    let mut report = GradCheck::new();
    for (pi, g) in analytic.iter().enumerate() {
        for i in coords(g.len(), per_tensor, &mut rng) {
            let orig = probe.params_mut()[pi][i];
            let mut central = |h: f64| -> Result<f64> {
                probe.params_mut()[pi][i] = orig + h;
                let up = probe.loss(x, labels)?;
                probe.params_mut()[pi][i] = orig - h;
                let down = probe.loss(x, labels)?;
                probe.params_mut()[pi][i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = central(step)?;
            let close = |n: f64| (g[i] - n).abs() < 1e-9 || (g[i] - n).abs() < tol * g[i].abs().max(n.abs());
            if !close(numeric) && (close(central(step / 10.0)?) || close(central(step / 100.0)?)) {
                report.kinks += 1;
                continue;
            }
            report.record(g[i], numeric, tol, 1e-9);
        }
    }
    Ok(report)
}
