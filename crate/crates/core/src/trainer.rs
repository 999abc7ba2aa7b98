//! BPTT pre-training of MPBN networks with Adam.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lif::{SpikeFn, DEFAULT_SURROGATE_ALPHA};
use crate::network::{accuracy, predict, ForwardOptions, GradScope, ModelMode, Network, Neuron};
use crate::tensor::Tensor;

/// Mean cross-entropy of `[N, K]` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let z = tape.constant(logits.clone());
    let l = tape.cross_entropy(z, labels)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine { total_steps: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.eps_opt > 0.0) {
            return Err(Error::InvalidConfig("eps_opt must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for zero-based optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine { total_steps } => {
                let frac = (step as f64 / total_steps.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// Per-parameter first and second moments, created lazily on the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam update of every parameter slice.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    let lr = cfg.lr_at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(Error::ShapeMismatch(format!("parameter {i} length mismatch")));
        }
        for j in 0..p.len() {
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g[j];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g[j] * g[j];
            p[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps_opt);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Random horizontal flips of training images.
    pub flip: bool,
    pub surrogate_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            flip: true,
            surrogate_alpha: DEFAULT_SURROGATE_ALPHA,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: f64,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,train_acc,val_acc\n");
        for r in &self.records {
            s += &format!("{},{},{},{},{}\n", r.epoch, r.lr, r.loss, r.train_acc, r.val_acc);
        }
        s
    }
}

/// Accuracy of `net` in Eval mode, evaluated in chunks of `batch_size`.
pub fn evaluate(net: &mut Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut preds = Vec::with_capacity(ds.len());
    for idx in ds.chunks(batch_size) {
        let logits = net.forward(&ds.batch(&idx)?, ModelMode::Eval)?;
        preds.extend(predict(&logits));
    }
    Ok(accuracy(&preds, &ds.labels))
}

fn flip_horizontal(x: &mut Tensor, which: &[bool]) {
    let shape = x.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let data = x.data_mut();
    for (n, &f) in which.iter().enumerate() {
        if !f {
            continue;
        }
        for row in data[n * c * h * w..(n + 1) * c * h * w].chunks_mut(w) {
            row.reverse();
        }
    }
}

/// Loss, gradients and predictions of one minibatch in Train mode.
/// Running statistics move as a side effect.
pub(crate) struct StepOutcome {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

/// Gradient slot order: each weight in layer order, then γ and β of each
/// spiking layer in layer order.
pub(crate) fn train_step(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    alpha: f64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let opts = ForwardOptions::new(ModelMode::Train)
        .with_grad(GradScope::All)
        .with_spike(SpikeFn::Heaviside { alpha });
    let trace = net.run(&mut tape, x, &opts)?;
    let loss = tape.cross_entropy(trace.logits, labels)?;
    let loss_value = tape.value(loss).item();
    let predictions = predict(tape.value(trace.logits));
    tape.backward(loss)?;
    let mut grads = Vec::new();
    let grad_of = |v| {
        tape.grad(v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    };
    for w in trace.weights.iter().flatten() {
        grads.push(grad_of(*w));
    }
    for a in trace.affines.iter().flatten() {
        grads.push(grad_of(a.gamma));
        grads.push(grad_of(a.beta));
    }
    Ok(StepOutcome {
        loss: loss_value,
        grads,
        predictions,
    })
}

/// Applies an Adam step to the same slot order as [`train_step`].
pub(crate) fn apply_update(
    net: &mut Network,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let mut weights: Vec<Tensor> = net.weights().iter().flatten().cloned().collect();
    let mut affine: Vec<Tensor> = Vec::new();
    for n in net.neurons().iter().flatten() {
        let Neuron::Mpbn(np) = n else {
            return Err(Error::Mode("training needs an MPBN model".into()));
        };
        affine.push(np.gamma.clone());
        affine.push(np.beta.clone());
    }
    {
        let mut slots: Vec<&mut [f64]> = weights
            .iter_mut()
            .chain(affine.iter_mut())
            .map(Tensor::data_mut)
            .collect();
        let g: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(&mut slots, &g, state, cfg)?;
    }
    let mut wi = weights.into_iter();
    for w in net.weights_mut().iter_mut().flatten() {
        *w = wi.next().expect("same count");
    }
    let mut ai = affine.into_iter();
    for n in net.neurons_mut().iter_mut().flatten() {
        if let Neuron::Mpbn(np) = n {
            np.gamma = ai.next().expect("same count");
            np.beta = ai.next().expect("same count");
        }
    }
    Ok(())
}

/// Trains `net` in place. The best-validation parameters are restored at the
/// end and, when `checkpoint_path` is given, saved there whenever they improve.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainReport> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if net.is_deployed() {
        return Err(Error::Mode("cannot train a deployed model".into()));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if train_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut best: Option<Network> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(state.step);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = train_set.batch(idx)?;
            let labels = train_set.batch_labels(idx);
            if cfg.flip {
                let which: Vec<bool> = idx.iter().map(|_| rng.gen()).collect();
                flip_horizontal(&mut x, &which);
            }
            let out = train_step(net, &x, &labels, cfg.surrogate_alpha)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            apply_update(net, &out.grads, &mut state, &cfg.optimizer)?;
            loss_sum += out.loss * idx.len() as f64;
            hits += out
                .predictions
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        let val_acc = evaluate(net, val_set, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            val_acc,
        };
        info!(
            "epoch {epoch}: loss {:.4} train {:.3} val {:.3}",
            record.loss, record.train_acc, record.val_acc
        );
        if best.is_none() || val_acc > report.best_val_acc {
            report.best_val_acc = val_acc;
            report.best_epoch = Some(epoch);
            best = Some(net.clone());
            if let Some(path) = checkpoint_path {
                checkpoint::save(net, path)?;
                report.best_checkpoint = Some(path.to_path_buf());
                debug!("saved checkpoint to {}", path.display());
            }
        }
        report.records.push(record);
    }
    if let Some(b) = best {
        *net = b;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let z = Tensor::zeros(&[1, 4]);
        assert!((cross_entropy(&z, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let z = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let want = -(2f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        assert!((cross_entropy(&z, &[1]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
        let z = Tensor::new(&[1, 3], vec![30.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&z, &[0]).unwrap() < 1e-9);
        assert!(matches!(
            cross_entropy(&z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn adam_zero_grad_keeps_param() {
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::default();
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut st, &OptimizerConfig::default()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = OptimizerConfig::default();
        for g in [1e-3, 1.0, 1e3] {
            let mut p = vec![0.0];
            let mut st = AdamState::default();
            adam_step(&mut [&mut p], &[&[g]], &mut st, &cfg).unwrap();
            assert!((p[0] + cfg.lr).abs() < 1e-7, "g = {g}: {}", p[0]);
        }
    }

    #[test]
    fn adam_matches_hand_iteration() {
        let cfg = OptimizerConfig::default();
        let (g, lr, b1, b2, eps) = (0.5f64, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_opt);
        let mut want = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            want -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = vec![1.0];
        let mut st = AdamState::default();
        for _ in 0..2 {
            adam_step(&mut [&mut p], &[&[g]], &mut st, &cfg).unwrap();
        }
        assert!((p[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimizerConfig {
            schedule: Schedule::Cosine { total_steps: 10 },
            ..OptimizerConfig::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert!((cfg.lr_at(5) - cfg.lr / 2.0).abs() < 1e-15);
        assert!(cfg.lr_at(10).abs() < 1e-18);
    }

    #[test]
    fn flip_reverses_rows() {
        let mut x = Tensor::new(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        flip_horizontal(&mut x, &[true]);
        assert_eq!(x.data(), &[3., 2., 1., 6., 5., 4.]);
    }
}
