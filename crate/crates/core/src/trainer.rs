//! Local training for the two built-in tasks.
//!
//! Both models end in a softmax over `k` classes and are trained on mean
//! cross-entropy with plain mini-batch SGD. Parameters are flat vectors:
//!
//! * `logreg`: `[W: d x k, b: k]`
//! * `mlp`:    `[W1: d x h, b1: h, W2: h x k, b2: k]` with tanh hidden units
//!
//! All matrices are row-major.

use std::collections::BTreeMap;

use crate::config::{ExperimentConfig, TaskKind};
use crate::error::{Error, Result};
use crate::partition::Dataset;
use crate::seed::{domain, stream_seed, sub_seed, SplitMix64};
use crate::types::{LocalUpdate, ParameterVector, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub kind: TaskKind,
    pub features: usize,
    pub classes: usize,
    pub hidden: usize,
}

impl Task {
    pub fn logreg(features: usize, classes: usize) -> Self {
        Self { kind: TaskKind::Logreg, features, classes, hidden: 0 }
    }

    pub fn mlp(features: usize, hidden: usize, classes: usize) -> Self {
        Self { kind: TaskKind::Mlp, features, classes, hidden }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let t = &cfg.task;
        match t.kind {
            TaskKind::Logreg => Self::logreg(t.feature_dim as usize, t.n_classes as usize),
            TaskKind::Mlp => Self::mlp(t.feature_dim as usize, t.hidden_units as usize, t.n_classes as usize),
        }
    }

    pub fn param_dim(&self) -> usize {
        let (d, k, h) = (self.features, self.classes, self.hidden);
        match self.kind {
            TaskKind::Logreg => d * k + k,
            TaskKind::Mlp => d * h + h + h * k + k,
        }
    }

    /// Round-0 global model: zeros for `logreg`; for `mlp`, every layer
    /// uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, drawn W1, b1, W2, b2.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        match self.kind {
            TaskKind::Logreg => ParameterVector::zeros(self.param_dim()),
            TaskKind::Mlp => {
                let mut rng = SplitMix64::new(seed);
                let (d, k, h) = (self.features, self.classes, self.hidden);
                let mut v = Vec::with_capacity(self.param_dim());
                let b1 = 1.0 / (d as f64).sqrt();
                v.extend((0..d * h + h).map(|_| rng.uniform(-b1, b1)));
                let b2 = 1.0 / (h as f64).sqrt();
                v.extend((0..h * k + k).map(|_| rng.uniform(-b2, b2)));
                ParameterVector::from_vec_unchecked(v)
            }
        }
    }

    fn check(&self, params: &ParameterVector, data: &Dataset) -> Result<()> {
        if params.dim() != self.param_dim() {
            return Err(Error::DimensionMismatch { expected: self.param_dim(), actual: params.dim() });
        }
        if data.dim() != self.features {
            return Err(Error::DimensionMismatch { expected: self.features, actual: data.dim() });
        }
        if data.classes() > self.classes {
            return Err(Error::InvalidInput(format!("{} label classes for a {}-class task", data.classes(), self.classes)));
        }
        Ok(())
    }
}

/// Writes class logits for row `x` into `logits`; fills `hidden` for mlp.
fn forward(task: &Task, w: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    let (d, k, h) = (task.features, task.classes, task.hidden);
    match task.kind {
        TaskKind::Logreg => {
            let bias = &w[d * k..];
            logits.copy_from_slice(bias);
            for (i, xi) in x.iter().enumerate() {
                let row = &w[i * k..(i + 1) * k];
                for c in 0..k {
                    logits[c] += xi * row[c];
                }
            }
        }
        TaskKind::Mlp => {
            let b1 = &w[d * h..d * h + h];
            let w2 = &w[d * h + h..d * h + h + h * k];
            let b2 = &w[d * h + h + h * k..];
            hidden.copy_from_slice(b1);
            for (i, xi) in x.iter().enumerate() {
                let row = &w[i * h..(i + 1) * h];
                for j in 0..h {
                    hidden[j] += xi * row[j];
                }
            }
            for a in hidden.iter_mut() {
                *a = a.tanh();
            }
            logits.copy_from_slice(b2);
            for (j, hj) in hidden.iter().enumerate() {
                let row = &w2[j * k..(j + 1) * k];
                for c in 0..k {
                    logits[c] += hj * row[c];
                }
            }
        }
    }
}

/// Turns logits into probabilities in place; returns `-ln p[label]`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    let target = logits[label];
    for z in logits.iter_mut() {
        *z /= sum;
    }
    sum.ln() - target.ln()
}

/// Mean loss over `rows`, accumulating the mean gradient into `grad` when given.
fn batch_loss_grad(task: &Task, w: &[f64], data: &Dataset, rows: &[usize], mut grad: Option<&mut [f64]>) -> f64 {
    let (d, k, h) = (task.features, task.classes, task.hidden);
    let mut hidden = vec![0.0; h];
    let mut probs = vec![0.0; k];
    let mut dhidden = vec![0.0; h];
    let inv = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    for &r in rows {
        let x = data.row(r);
        let y = data.labels()[r] as usize;
        forward(task, w, x, &mut hidden, &mut probs);
        loss += softmax_xent(&mut probs, y);
        let Some(g) = grad.as_deref_mut() else { continue };
        // probs now holds dLoss/dlogits for this sample, before 1/B scaling.
        probs[y] -= 1.0;
        match task.kind {
            TaskKind::Logreg => {
                for (i, xi) in x.iter().enumerate() {
                    for c in 0..k {
                        g[i * k + c] += xi * probs[c] * inv;
                    }
                }
                for c in 0..k {
                    g[d * k + c] += probs[c] * inv;
                }
            }
            TaskKind::Mlp => {
                let o_b1 = d * h;
                let o_w2 = o_b1 + h;
                let o_b2 = o_w2 + h * k;
                for j in 0..h {
                    let mut back = 0.0;
                    for c in 0..k {
                        g[o_w2 + j * k + c] += hidden[j] * probs[c] * inv;
                        back += w[o_w2 + j * k + c] * probs[c];
                    }
                    dhidden[j] = back * (1.0 - hidden[j] * hidden[j]);
                }
                for c in 0..k {
                    g[o_b2 + c] += probs[c] * inv;
                }
                for (i, xi) in x.iter().enumerate() {
                    for j in 0..h {
                        g[i * h + j] += xi * dhidden[j] * inv;
                    }
                }
                for j in 0..h {
                    g[o_b1 + j] += dhidden[j] * inv;
                }
            }
        }
    }
    loss * inv
}

/// Mean softmax cross-entropy over `batch` and its exact gradient.
pub fn loss_and_grad(task: &Task, params: &ParameterVector, batch: &Dataset) -> Result<(f64, ParameterVector)> {
    task.check(params, batch)?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; params.dim()];
    let loss = batch_loss_grad(task, params.as_slice(), batch, &rows, Some(&mut grad));
    Ok((loss, ParameterVector::new(grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and argmax accuracy; ties go to the lowest class index.
pub fn evaluate(task: &Task, params: &ParameterVector, data: &Dataset) -> Result<Evaluation> {
    task.check(params, data)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let w = params.as_slice();
    let mut hidden = vec![0.0; task.hidden];
    let mut logits = vec![0.0; task.classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for r in 0..data.len() {
        forward(task, w, data.row(r), &mut hidden, &mut logits);
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        let y = data.labels()[r] as usize;
        correct += usize::from(best == y);
        loss += softmax_xent(&mut logits, y);
    }
    let n = data.len() as f64;
    Ok(Evaluation { loss: loss / n, accuracy: correct as f64 / n })
}

/// Hyper-parameters of one local training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// FedProx proximal coefficient; zero disables the term.
    pub prox_mu: f64,
}

impl TrainSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size as usize,
            learning_rate: cfg.learning_rate,
            prox_mu: cfg.prox_mu,
        }
    }
}

/// Runs `epochs` of mini-batch SGD starting from `global`.
///
/// Each epoch visits the data in a fresh order drawn from
/// `stream_seed(seed, client_id, round)` separated by epoch index; the last
/// short batch is kept. Every step follows `grad F + mu * (w - global)`.
/// `train_loss` is the sample-weighted mean batch loss of the last epoch, or
/// the full-data loss of `global` when no epoch runs.
pub fn local_train(
    task: &Task,
    global: &ParameterVector,
    data: &Dataset,
    settings: &TrainSettings,
    client_id: u32,
    round: u32,
    seed: u64,
) -> Result<LocalUpdate> {
    if data.is_empty() {
        return Err(Error::InvalidInput(format!("client {client_id} has no training data")));
    }
    if settings.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    task.check(global, data)?;
    let stream = stream_seed(seed, client_id as u64, round as u64);
    let anchor = global.as_slice();
    let mut w = anchor.to_vec();
    let mut grad = vec![0.0; w.len()];
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = 0.0;
    for epoch in 0..settings.epochs {
        SplitMix64::new(sub_seed(stream, domain::EPOCH + epoch as u64)).shuffle(&mut order);
        epoch_loss = 0.0;
        for rows in order.chunks(settings.batch_size) {
            let loss = batch_loss_grad(task, &w, data, rows, Some(&mut grad));
            epoch_loss += loss * rows.len() as f64;
            let lr = settings.learning_rate;
            if settings.prox_mu == 0.0 {
                for (wi, gi) in w.iter_mut().zip(&grad) {
                    *wi -= lr * gi;
                }
            } else {
                let mu = settings.prox_mu;
                for ((wi, gi), ai) in w.iter_mut().zip(&grad).zip(anchor) {
                    *wi -= lr * (gi + mu * (*wi - ai));
                }
            }
        }
        epoch_loss /= n as f64;
    }
    if settings.epochs == 0 {
        let rows: Vec<usize> = (0..n).collect();
        epoch_loss = batch_loss_grad(task, anchor, data, &rows, None);
    }
    let params = ParameterVector::new(w).map_err(|e| Error::InvalidInput(format!("training diverged: {e}")))?;
    Ok(LocalUpdate {
        client_id,
        round,
        sample_count: n as u64,
        payload: Payload::Plain(params),
        train_loss: epoch_loss,
        wall_time_sec: 0.0,
        metrics: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::make_blobs;

    fn plain(u: &LocalUpdate) -> &ParameterVector {
        u.plain().unwrap()
    }

    #[test]
    fn layout_dims() {
        assert_eq!(Task::logreg(10, 3).param_dim(), 33);
        assert_eq!(Task::mlp(4, 5, 3).param_dim(), 4 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn zero_params_give_ln_k() {
        for k in [2usize, 3, 7] {
            let task = Task::logreg(3, k);
            let data = make_blobs(4, k, 3, 2.0, 1);
            let (loss, _) = loss_and_grad(&task, &ParameterVector::zeros(task.param_dim()), &data).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_single_sample_gradient() {
        let task = Task::logreg(1, 2);
        let data = Dataset::new(vec![1.0], vec![0], 1, 2).unwrap();
        let (loss, g) = loss_and_grad(&task, &ParameterVector::zeros(4), &data).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.as_slice(), &[-0.5, 0.5, -0.5, 0.5]);
    }

    #[test]
    fn evaluate_zero_params_predicts_class_zero() {
        let task = Task::logreg(2, 3);
        let data = make_blobs(5, 3, 2, 1.0, 2);
        let e = evaluate(&task, &ParameterVector::zeros(task.param_dim()), &data).unwrap();
        assert!((e.loss - 3f64.ln()).abs() < 1e-12);
        assert!((e.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(e, evaluate(&task, &ParameterVector::zeros(task.param_dim()), &data).unwrap());
    }

    #[test]
    fn evaluate_rejects_empty() {
        let task = Task::logreg(2, 2);
        let empty = Dataset::new(vec![], vec![], 2, 2).unwrap();
        assert!(evaluate(&task, &ParameterVector::zeros(6), &empty).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let task = Task::mlp(3, 4, 2);
        let g = task.init_params(5);
        let data = make_blobs(6, 2, 3, 2.0, 1);
        let s = TrainSettings { epochs: 0, batch_size: 4, learning_rate: 0.5, prox_mu: 0.3 };
        let u = local_train(&task, &g, &data, &s, 0, 0, 9).unwrap();
        assert_eq!(plain(&u), &g);
        assert_eq!(u.sample_count, 12);
    }

    #[test]
    fn full_batch_single_step() {
        let task = Task::logreg(3, 2);
        let data = make_blobs(10, 2, 3, 2.0, 4);
        let g = ParameterVector::new((0..8).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap();
        let s = TrainSettings { epochs: 1, batch_size: data.len(), learning_rate: 0.2, prox_mu: 0.0 };
        let u = local_train(&task, &g, &data, &s, 2, 3, 77).unwrap();
        let (_, grad) = loss_and_grad(&task, &g, &data).unwrap();
        let expected: Vec<f64> = g.as_slice().iter().zip(grad.as_slice()).map(|(w, d)| w - 0.2 * d).collect();
        // The epoch shuffle only reorders the gradient sum.
        for (a, b) in plain(&u).as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn proximal_pull_shrinks_drift() {
        let task = Task::logreg(4, 3);
        let data = make_blobs(30, 3, 4, 3.0, 8);
        let g = ParameterVector::zeros(task.param_dim());
        let mut last = f64::INFINITY;
        for mu in [0.0, 0.1, 1.0, 10.0] {
            let s = TrainSettings { epochs: 3, batch_size: 8, learning_rate: 0.05, prox_mu: mu };
            let u = local_train(&task, &g, &data, &s, 1, 0, 3).unwrap();
            let drift = plain(&u).sub(&g).unwrap().l2_norm();
            assert!(drift <= last, "mu {mu}: {drift} > {last}");
            last = drift;
        }
    }

    #[test]
    fn local_train_is_deterministic() {
        let task = Task::mlp(3, 4, 2);
        let data = make_blobs(10, 2, 3, 2.0, 1);
        let s = TrainSettings { epochs: 2, batch_size: 3, learning_rate: 0.1, prox_mu: 0.1 };
        let g = task.init_params(1);
        let a = local_train(&task, &g, &data, &s, 4, 2, 11).unwrap();
        let b = local_train(&task, &g, &data, &s, 4, 2, 11).unwrap();
        assert_eq!(a, b);
        let c = local_train(&task, &g, &data, &s, 4, 3, 11).unwrap();
        assert_ne!(plain(&a), plain(&c));
    }

    #[test]
    fn rejects_empty_data_and_bad_dims() {
        let task = Task::logreg(2, 2);
        let s = TrainSettings { epochs: 1, batch_size: 1, learning_rate: 0.1, prox_mu: 0.0 };
        let empty = Dataset::new(vec![], vec![], 2, 2).unwrap();
        assert!(local_train(&task, &ParameterVector::zeros(6), &empty, &s, 0, 0, 0).is_err());
        let data = make_blobs(2, 2, 2, 1.0, 0);
        assert!(matches!(
            loss_and_grad(&task, &ParameterVector::zeros(5), &data),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
