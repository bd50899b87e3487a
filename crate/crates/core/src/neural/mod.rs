//! Minimal feed-forward stack: MLP with per-action heads, binary
//! cross-entropy, Adam, and a JSON checkpoint format.

mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use mlp::{sigmoid, ForwardCache, Mlp, OutputActivation};

/// Lower clamp for logarithm arguments in [`bce_loss`].
pub const LOG_CLAMP: f64 = 1e-7;

/// Hard label with the threshold fixed at one half; `0.5` rounds to unsafe.
#[inline]
pub fn hard_label(value: f64) -> bool {
    value >= 0.5
}

/// Mean binary cross-entropy of `predictions` against `labels`.
pub fn bce_loss(predictions: &[f64], labels: &[bool]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    assert_eq!(predictions.len(), labels.len());
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if y {
                -p.max(LOG_CLAMP).ln()
            } else {
                -(1.0 - p).max(LOG_CLAMP).ln()
            }
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// One labeled `(observation, action, y)` row of a training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRow<'a> {
    pub observation: &'a [f64],
    pub action: usize,
    pub label: bool,
}

/// Loss and gradient of the mean BCE over the selected action of each row.
///
/// The gradient is that of the unclamped loss, `(p - y) / batch` w.r.t. each
/// selected logit; the clamp only guards the reported value.
pub fn bce_loss_and_grad(net: &Mlp, batch: &[BatchRow<'_>]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let inputs: Vec<f64> = batch.iter().flat_map(|r| r.observation.iter().copied()).collect();
    let cache = net.forward_cached(&inputs)?;
    let m = net.output_dim();
    let logits = cache.logits.as_slice().expect("standard layout");
    let scale = 1.0 / batch.len() as f64;
    let mut preds = Vec::with_capacity(batch.len());
    let mut dlogits = Vec::with_capacity(batch.len());
    let mut actions = Vec::with_capacity(batch.len());
    for (i, row) in batch.iter().enumerate() {
        let p = sigmoid(logits[i * m + row.action]);
        preds.push(p);
        dlogits.push((p - f64::from(u8::from(row.label))) * scale);
        actions.push(row.action);
    }
    let labels: Vec<bool> = batch.iter().map(|r| r.label).collect();
    let loss = bce_loss(&preds, &labels)?;
    Ok((loss, net.backward_selected(&cache, &actions, &dlogits)))
}

pub const LR_START: f64 = 1e-4;
pub const LR_END: f64 = 1e-6;

/// Learning rate interpolated from `1e-4` at progress 0 to `1e-6` at progress 1.
pub fn learning_rate(progress: f64) -> f64 {
    interpolate_lr(progress, LR_START, LR_END)
}

/// Linear interpolation from `start` at progress 0 to `end` at progress 1.
pub fn interpolate_lr(progress: f64, start: f64, end: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    (1.0 - p) * start + p * end
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized network parameters. Floats round-trip exactly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub algo: String,
    pub seed: u64,
    pub episodes: usize,
    pub net: Mlp,
}

impl Checkpoint {
    pub fn new(algo: &str, seed: u64, episodes: usize, net: Mlp) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            algo: algo.to_string(),
            seed,
            episodes,
            net,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: checkpoint version {} unsupported",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn bce_known_values() {
        assert!((bce_loss(&[0.5], &[true]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[1.0 - 1e-7], &[true]).unwrap() < 2e-7);
        let two = bce_loss(&[0.8, 0.4], &[true, false]).unwrap();
        let expected = (-(0.8f64.ln()) - (0.6f64.ln())) / 2.0;
        assert!((two - expected).abs() < 1e-15);
        assert!(bce_loss(&[], &[]).is_err());
        // clamped at 1e-7 instead of infinity
        assert!((bce_loss(&[0.0], &[true]).unwrap() - (-(1e-7f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn hard_label_rounds_half_up() {
        assert!(hard_label(0.5));
        assert!(!hard_label(0.5 - 1e-12));
    }

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(learning_rate(0.0), 1e-4);
        assert_eq!(learning_rate(1.0), 1e-6);
        assert!((learning_rate(0.5) - 5.05e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = Adam::new(2);
        let mut params = vec![1.0, -2.0];
        adam.update(&mut params, &[0.5, -0.5], 1e-3);
        let after_first = params.clone();
        let m_before = adam.first_moment().to_vec();
        adam.update(&mut params, &[0.0, 0.0], 1e-3);
        assert_eq!(adam.step, 2);
        for (m, m0) in adam.first_moment().iter().zip(&m_before) {
            assert!((m - 0.9 * m0).abs() < 1e-18);
        }
        // moments decay but the update keeps the previous direction
        assert!(params[0] < after_first[0]);

        let mut fresh = Adam::new(2);
        let mut p = vec![1.0, -2.0];
        fresh.update(&mut p, &[0.0, 0.0], 1e-3);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut adam = Adam::new(3);
        let mut params = vec![0.0; 3];
        adam.update(&mut params, &[3.0, -0.01, 200.0], 1e-3);
        for (p, s) in params.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 1e-3).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn saturated_fit_has_tiny_gradient() {
        // one-layer net with huge weights: p ~ 1 on y = 1 and p ~ 0 on y = 0
        let net = Mlp::from_params(&[1, 1], OutputActivation::Sigmoid, vec![40.0, 0.0]).unwrap();
        let batch = [
            BatchRow { observation: &[1.0], action: 0, label: true },
            BatchRow { observation: &[-1.0], action: 0, label: false },
        ];
        let (loss, grad) = bce_loss_and_grad(&net, &batch).unwrap();
        assert!(loss < 1e-7);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn checkpoint_reload_is_bit_exact() {
        let net = Mlp::init(&[3, 7, 5], OutputActivation::Sigmoid, &mut rng::seeded(11));
        let ckpt = Checkpoint::new("b2e", 11, 20, net);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert!(Checkpoint::load(&dir.path().join("missing.json")).is_err());
    }
}
