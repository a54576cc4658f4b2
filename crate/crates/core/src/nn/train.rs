use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::optim::Adam;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub initial_lr: f64,
    /// Divisor applied to the learning rate on a plateau.
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Return the parameters of the best-validation-loss epoch.
    pub restore_best: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            initial_lr: 0.002,
            plateau_factor: 2.0,
            plateau_patience: 5,
            early_stop_patience: 15,
            max_epochs: 200,
            batch_size: 64,
            val_fraction: 0.15,
            seed: 0,
            restore_best: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_lr > 0.0
            && self.plateau_factor > 0.0
            && self.plateau_patience > 0
            && self.early_stop_patience > 0
            && self.max_epochs > 0
            && self.batch_size > 0
            && self.val_fraction > 0.0
            && self.val_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "training parameters must be positive and val_fraction in (0, 1)".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }
}

/// Per-class seeded split into (train, validation) indices.
pub fn stratified_split(labels: &[usize], classes: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Label { label: l.to_string() });
        }
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::invalid(format!("class {c} has no training segments")));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut idx in by_class {
        idx.shuffle(rng);
        let n = idx.len();
        let lo = usize::from(n >= 2);
        let k = ((fraction * n as f64).round() as usize).clamp(lo, n - 1);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn gather<T: Real>(net: &Network<T>, patches: &[&[f32]], idx: &[usize]) -> Result<Tensor<T>> {
    let [c, h, w] = net.input_shape();
    let items: Vec<&[f32]> = idx.iter().map(|&i| patches[i]).collect();
    Tensor::stack(&items, c, h, w)
}

fn correct<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    let k = probs.item_len();
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(&probs.data[i * k..(i + 1) * k]) == y)
        .count()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode loss (cross-entropy plus L2) and accuracy.
pub fn evaluate<T: Real>(net: &Network<T>, patches: &[&[f32]], labels: &[usize], batch: usize) -> Result<(f64, f64)> {
    if patches.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let probs = predict_proba(net, patches, batch)?;
    let k = net.classes();
    let ce: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[i * k + y].max(1e-300).ln())
        .sum::<f64>()
        / labels.len() as f64;
    let l2: f64 = net.layers.iter().map(|l| l.layer.l2_penalty()).sum();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(&probs[i * k..(i + 1) * k]) == y)
        .count();
    Ok((ce + l2, hits as f64 / labels.len() as f64))
}

/// Probabilities for any number of patches, row-major `n x classes`.
pub fn predict_proba<T: Real>(net: &Network<T>, patches: &[&[f32]], batch: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..patches.len()).collect();
    let mut out = Vec::with_capacity(patches.len() * net.classes());
    for chunk in idx.chunks(batch.max(1)) {
        let x = gather(net, patches, chunk)?;
        out.extend(net.forward(&x)?.data.iter().map(|v| v.f64()));
    }
    Ok(out)
}

/// One probability vector per patch of a recording.
pub fn predict_segments<T: Real>(net: &Network<T>, patches: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    if patches.len() != crate::frontend::PATCHES_PER_RECORDING {
        return Err(Error::shape(format!("expected 7 patches, got {}", patches.len())));
    }
    if net.is_training() {
        return Err(Error::State("network is in training mode".into()));
    }
    let p = predict_proba(net, patches, patches.len())?;
    Ok(p.chunks(net.classes()).map(|c| c.to_vec()).collect())
}

/// Train with Adam, plateau learning-rate decay and early stopping on a
/// stratified validation split. The network ends in inference mode.
pub fn train<T: Real>(
    net: &mut Network<T>,
    patches: &[&[f32]],
    labels: &[usize],
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    config.validate()?;
    if patches.len() != labels.len() {
        return Err(Error::shape(format!("{} patches, {} labels", patches.len(), labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut train_idx, val_idx) = stratified_split(labels, net.classes(), config.val_fraction, &mut rng)?;
    let val_patches: Vec<&[f32]> = val_idx.iter().map(|&i| patches[i]).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut opt = Adam::new(&net.params());
    let mut lr = config.initial_lr;
    let mut history = History::default();
    let mut best_loss = f64::INFINITY;
    let mut best_state: Option<(Vec<Vec<T>>, Vec<Vec<T>>)> = None;
    let (mut since_best, mut since_plateau) = (0, 0);

    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        net.set_training(true);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for chunk in train_idx.chunks(config.batch_size) {
            let x = gather(net, patches, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let step = net.loss_and_gradients(&x, &y)?;
            loss_sum += step.loss * chunk.len() as f64;
            hits += correct(&step.probabilities, &y);
            net.update_running_stats(&step.batch_stats);
            opt.step(&mut net.params_mut(), &step.gradients, lr);
        }
        net.set_training(false);
        let (val_loss, val_acc) = evaluate(net, &val_patches, &val_labels, config.batch_size)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: hits as f64 / train_idx.len() as f64,
            val_loss,
            val_accuracy: val_acc,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} acc {:.3} val_loss {:.4} val_acc {:.3}",
            rec.train_loss,
            rec.train_accuracy,
            val_loss,
            val_acc
        );
        on_epoch(&rec);
        history.epochs.push(rec);

        if val_loss < best_loss {
            best_loss = val_loss;
            history.best_epoch = epoch;
            since_best = 0;
            since_plateau = 0;
            if config.restore_best {
                best_state = Some((
                    net.params().iter().map(|p| p.to_vec()).collect(),
                    net.buffers().iter().map(|b| b.to_vec()).collect(),
                ));
            }
        } else {
            since_best += 1;
            since_plateau += 1;
            if since_best >= config.early_stop_patience {
                history.stopped_early = true;
                break;
            }
            if since_plateau >= config.plateau_patience {
                lr /= config.plateau_factor;
                since_plateau = 0;
            }
        }
    }
    if let Some((params, buffers)) = best_state {
        for (d, s) in net.params_mut().into_iter().zip(params) {
            *d = s;
        }
        for (d, s) in net.buffers_mut().into_iter().zip(buffers) {
            *d = s;
        }
    }
    net.set_training(false);
    Ok(history)
}
