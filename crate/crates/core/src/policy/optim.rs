//! Minibatch Adam with cosine learning-rate decay and global-norm clipping.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::mlp::{gather_rows, MlpLayout};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fraction of the base learning rate reached at the end of the cosine decay.
const LR_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cosine_decay_steps: usize,
    pub grad_clip: f64,
    /// Sample weight given to negatives of the binary advantage indicator.
    pub weight_negative: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch: 128,
            lr: 2.5e-4,
            cosine_decay_steps: 1000,
            grad_clip: 1.0,
            weight_negative: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.cosine_decay_steps == 0 {
            return Err(Error::Config("steps, batch and cosine_decay_steps must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr and grad_clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.weight_negative) {
            return Err(Error::Config("weight_negative must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.cosine_decay_steps as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * (LR_FLOOR + (1.0 - LR_FLOOR) * cos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
}

/// Adam moment state.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub(crate) fn clip_global_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Regression data: rows of `x` map to rows of `y` with per-row weights.
pub struct Regression<'a> {
    pub x: &'a Array2<f64>,
    pub y: &'a Array2<f64>,
    pub weights: &'a Array1<f64>,
}

/// Trains `params` in place. Batch rows are drawn uniformly with replacement;
/// sample weights enter through the loss.
pub fn fit(
    layout: &MlpLayout,
    params: &mut [f64],
    data: &Regression<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    let n = data.x.nrows();
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    if data.weights.sum() <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let mut rng = Rng::new(cfg.seed).split_named("minibatches");
    let mut adam = Adam::new(params.len());
    let mut curve = Vec::new();
    let mut window = 0.0;
    let mut window_n = 0usize;
    let mut rows = vec![0usize; cfg.batch];
    for step in 0..cfg.steps {
        for r in rows.iter_mut() {
            *r = rng.below(n);
        }
        let xb = gather_rows(data.x, &rows);
        let yb = gather_rows(data.y, &rows);
        let wb = Array1::from_iter(rows.iter().map(|&r| data.weights[r]));
        if wb.sum() <= 0.0 {
            // every drawn row has zero weight; nothing to learn from this batch
            continue;
        }
        let (loss, mut grad) = layout.weighted_sse(params, xb.view(), yb.view(), wb.view())?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        clip_global_norm(&mut grad, cfg.grad_clip);
        adam.step(params, &grad, cfg.lr_at(step));
        window += loss;
        window_n += 1;
        if (step + 1) % 100 == 0 || step + 1 == cfg.steps {
            curve.push(CurvePoint {
                step: step + 1,
                loss: window / window_n.max(1) as f64,
            });
            window = 0.0;
            window_n = 0;
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok(curve)
}
