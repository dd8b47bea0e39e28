//! Chunked behavior-cloning policy.
//!
//! The policy maps an observation (position plus an optional one-hot stage) to
//! a flattened chunk of `k` actions. Outputs are produced in units of
//! `output_scale` so the network works at unit scale while losses are reported
//! in action units.

pub mod mlp;
pub mod optim;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

pub use mlp::MlpLayout;
pub use optim::{fit, Adam, CurvePoint, Regression, TrainConfig};

use crate::chunk::ActionChunk;
use crate::env::{Controller, EnvConfig, EnvState};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::rng::Rng;

pub const ACTION_DIM: usize = 2;
pub const STATE_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyLayout {
    pub stages: usize,
    pub hidden: Vec<usize>,
    /// Chunk length K.
    pub k: usize,
    /// Feed the true stage as a one-hot; otherwise the stage slots are zero.
    pub observe_stage: bool,
    pub output_scale: f64,
}

impl Default for PolicyLayout {
    fn default() -> Self {
        Self {
            stages: 3,
            hidden: vec![64, 64],
            k: 50,
            observe_stage: true,
            output_scale: 0.05,
        }
    }
}

impl PolicyLayout {
    pub fn for_env(cfg: &EnvConfig, k: usize) -> Self {
        Self {
            stages: cfg.stages(),
            k,
            output_scale: cfg.action_clip,
            ..Self::default()
        }
    }

    pub fn mlp(&self) -> MlpLayout {
        MlpLayout::new(STATE_DIM + self.stages, self.hidden.clone(), self.k * ACTION_DIM)
    }

    pub fn input_dim(&self) -> usize {
        STATE_DIM + self.stages
    }

    pub fn id(&self) -> String {
        format!(
            "policy/{}/k{}/s{}/{}/scale{:?}",
            self.mlp().id(),
            self.k,
            self.stages,
            if self.observe_stage { "stage" } else { "blind" },
            self.output_scale
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.k == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("policy layout needs positive S, K and widths".into()));
        }
        if !(self.output_scale > 0.0) {
            return Err(Error::Config("output_scale must be positive".into()));
        }
        Ok(())
    }

    /// Network input for position `p` in stage `g`.
    pub fn input(&self, p: &[f64], g: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(&p[..STATE_DIM]);
        x.extend((0..self.stages).map(|i| f64::from(u8::from(self.observe_stage && i == g))));
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub layout: PolicyLayout,
    pub params: ParameterVector,
}

pub fn init_policy(layout: &PolicyLayout, rng: &mut Rng) -> Result<PolicyNet> {
    layout.validate()?;
    let params = ParameterVector::new(layout.id(), layout.mlp().init(rng))?;
    Ok(PolicyNet {
        layout: layout.clone(),
        params,
    })
}

impl PolicyNet {
    pub fn from_params(layout: &PolicyLayout, params: ParameterVector) -> Result<Self> {
        layout.validate()?;
        if params.layout_id() != layout.id() || params.len() != layout.mlp().param_count() {
            return Err(Error::LayoutMismatch {
                left: layout.id(),
                left_len: layout.mlp().param_count(),
                right: params.layout_id().to_owned(),
                right_len: params.len(),
            });
        }
        Ok(Self {
            layout: layout.clone(),
            params,
        })
    }

    /// Raw chunk for a prepared input vector.
    pub fn forward_input(&self, input: &[f64], tick: u64) -> Result<ActionChunk> {
        if input.len() != self.layout.input_dim() {
            return Err(Error::Dimension {
                expected: self.layout.input_dim(),
                got: input.len(),
            });
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
        let out = self.layout.mlp().forward(self.params.values(), x.view())?;
        let scale = self.layout.output_scale;
        let actions = out
            .row(0)
            .as_slice()
            .expect("contiguous")
            .chunks(ACTION_DIM)
            .map(|c| c.iter().map(|v| v * scale).collect())
            .collect();
        ActionChunk::new(actions, tick)
    }

    /// Predicted chunk for an observed state. Actions are not clipped here;
    /// the environment clips at execution.
    pub fn forward(&self, obs: &EnvState) -> Result<ActionChunk> {
        self.forward_input(&self.layout.input(&obs.p, obs.g), obs.t)
    }
}

impl Controller for PolicyNet {
    fn chunk(&mut self, obs: &EnvState, _cfg: &EnvConfig) -> Result<ActionChunk> {
        self.forward(obs)
    }
}

/// Observation/target pairs for chunked behavior cloning. Targets are stored
/// in network units (divided by `output_scale`).
#[derive(Clone, Debug)]
pub struct BcDataset {
    pub layout: PolicyLayout,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    /// `(episode index, step)` of every row.
    pub origin: Vec<(usize, usize)>,
}

impl BcDataset {
    /// One row per expert-labelled step. The target for step `t` is
    /// `actions[t..t + K]`, zero-padded past the end of the episode.
    pub fn from_episodes(episodes: &[Episode], layout: &PolicyLayout) -> Result<Self> {
        Self::from_episodes_strided(episodes, layout, 1)
    }

    pub fn from_episodes_strided(
        episodes: &[Episode],
        layout: &PolicyLayout,
        stride: usize,
    ) -> Result<Self> {
        layout.validate()?;
        let stride = stride.max(1);
        let k = layout.k;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut origin = Vec::new();
        for (ei, e) in episodes.iter().enumerate() {
            if e.stages() != layout.stages {
                return Err(Error::Dimension {
                    expected: layout.stages,
                    got: e.stages(),
                });
            }
            for t in (e.expert_from..e.len()).step_by(stride) {
                xs.extend(layout.input(&e.states[t], e.stage_labels[t]));
                for j in 0..k {
                    match e.actions.get(t + j) {
                        Some(a) => ys.extend(a.iter().map(|v| v / layout.output_scale)),
                        None => ys.extend([0.0; ACTION_DIM]),
                    }
                }
                origin.push((ei, t));
            }
        }
        let n = origin.len();
        Ok(Self {
            layout: layout.clone(),
            x: Array2::from_shape_vec((n, layout.input_dim()), xs).expect("rows"),
            y: Array2::from_shape_vec((n, k * ACTION_DIM), ys).expect("rows"),
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Concatenation of two datasets built with the same layout.
    pub fn concat(&self, other: &BcDataset) -> Result<BcDataset> {
        if self.layout != other.layout {
            return Err(Error::Config("cannot concatenate datasets with different layouts".into()));
        }
        let x = ndarray::concatenate(ndarray::Axis(0), &[self.x.view(), other.x.view()])
            .expect("same width");
        let y = ndarray::concatenate(ndarray::Axis(0), &[self.y.view(), other.y.view()])
            .expect("same width");
        let mut origin = self.origin.clone();
        origin.extend(&other.origin);
        Ok(BcDataset {
            layout: self.layout.clone(),
            x,
            y,
            origin,
        })
    }
}

/// A weighted batch with targets in action units.
pub struct BcBatch<'a> {
    pub inputs: &'a Array2<f64>,
    pub targets: &'a Array2<f64>,
    pub weights: ArrayView1<'a, f64>,
}

/// Weighted squared chunk error and its gradient, both in action units.
pub fn bc_loss_and_grad(net: &PolicyNet, batch: &BcBatch<'_>) -> Result<(f64, ParameterVector)> {
    if batch.inputs.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    let scale = net.layout.output_scale;
    let y = batch.targets / scale;
    let (loss, mut grad) = net.layout.mlp().weighted_sse(
        net.params.values(),
        batch.inputs.view(),
        y.view(),
        batch.weights,
    )?;
    let s2 = scale * scale;
    grad.iter_mut().for_each(|g| *g *= s2);
    Ok((loss * s2, ParameterVector::new(net.params.layout_id(), grad)?))
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: PolicyNet,
    pub curve: Vec<CurvePoint>,
}

/// Adam behavior cloning from `net`'s current parameters. `weights`, when
/// given, holds one non-negative weight per dataset row.
pub fn train(
    net: &PolicyNet,
    data: &BcDataset,
    weights: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.layout != net.layout {
        return Err(Error::Config("dataset layout differs from the network".into()));
    }
    let w = match weights {
        Some(w) if w.len() != data.len() => {
            return Err(Error::Dimension {
                expected: data.len(),
                got: w.len(),
            })
        }
        Some(w) => Array1::from(w.to_vec()),
        None => Array1::ones(data.len()),
    };
    if w.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Config("sample weights must be non-negative".into()));
    }
    if w.sum() <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let mut params = net.params.values().to_vec();
    let reg = Regression {
        x: &data.x,
        y: &data.y,
        weights: &w,
    };
    let mut curve = fit(&net.layout.mlp(), &mut params, &reg, cfg)?;
    let s2 = net.layout.output_scale.powi(2);
    curve.iter_mut().for_each(|c| c.loss *= s2);
    Ok(Trained {
        net: PolicyNet {
            layout: net.layout.clone(),
            params: ParameterVector::new(net.params.layout_id(), params)?,
        },
        curve,
    })
}

/// Sample weights from a binary indicator: 1 for positives, `lambda` otherwise.
pub fn indicator_weights(indicator: &[bool], lambda: f64) -> Vec<f64> {
    indicator.iter().map(|&i| if i { 1.0 } else { lambda }).collect()
}

/// Unweighted mean squared chunk error (action units) of `params` on `data`.
pub fn validation_loss(params: &ParameterVector, layout: &PolicyLayout, data: &BcDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if params.layout_id() != layout.id() {
        return Err(Error::LayoutMismatch {
            left: layout.id(),
            left_len: layout.mlp().param_count(),
            right: params.layout_id().to_owned(),
            right_len: params.len(),
        });
    }
    let m = layout.mlp().mean_sse(params.values(), data.x.view(), data.y.view())?;
    Ok(m * layout.output_scale.powi(2))
}

/// Weighted loss and gradient of `params` on `data` (unit weights), in
/// action units. Used by the gradient-based merge strategy.
pub fn validation_loss_and_grad(
    params: &ParameterVector,
    layout: &PolicyLayout,
    data: &BcDataset,
) -> Result<(f64, ParameterVector)> {
    let net = PolicyNet::from_params(layout, params.clone())?;
    let targets = &data.y * layout.output_scale;
    let w = Array1::ones(data.len());
    bc_loss_and_grad(
        &net,
        &BcBatch {
            inputs: &data.x,
            targets: &targets,
            weights: w.view(),
        },
    )
}
