//! Progress-based advantage estimation.
//!
//! The direct estimator regresses relative progress between two frames of the
//! same episode, optionally conditioned on the stage. The value-difference
//! baseline regresses global progress of single frames and differences two
//! predictions.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::policy::{fit, CurvePoint, MlpLayout, Regression, TrainConfig};
use crate::rng::Rng;

pub const STATE_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageLabel {
    pub index: usize,
    pub stages: usize,
}

impl StageLabel {
    pub fn new(index: usize, stages: usize) -> Result<Self> {
        if index >= stages {
            return Err(Error::StageOutOfRange {
                label: index,
                stages,
            });
        }
        Ok(Self { index, stages })
    }

    pub fn scalar(self) -> f64 {
        self.index as f64 / self.stages as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSample {
    pub s: Vec<f64>,
    pub s_prime: Vec<f64>,
    pub g: Option<f64>,
    pub target: f64,
    pub delta: i64,
}

/// Relative progress over a whole episode of `t_len` steps.
pub fn episode_target(t: usize, t_prime: usize, t_len: usize) -> f64 {
    (t_prime as f64 - t as f64) / t_len as f64
}

/// Relative progress inside a stage segment of `frames` frames.
pub fn segment_target(t: usize, t_prime: usize, frames: usize) -> f64 {
    (t_prime as f64 - t as f64) / (frames - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub n_pairs: usize,
    pub staged: bool,
    /// Also emit every pair reversed with a negated target.
    pub symmetric: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            n_pairs: 20_000,
            staged: true,
            symmetric: true,
        }
    }
}

/// Frame range `[start, end)` carrying stage `g`.
fn segment(e: &Episode, g: usize) -> Option<(usize, usize)> {
    let start = e.stage_labels.iter().position(|&x| x == g)?;
    let end = e.stage_labels.iter().rposition(|&x| x == g)? + 1;
    Some((start, end))
}

/// Random frame pairs `t < t'` from single episodes.
pub fn sample_pairs(episodes: &[Episode], cfg: &PairConfig, rng: &mut Rng) -> Result<Vec<AdvantageSample>> {
    let usable: Vec<&Episode> = episodes.iter().filter(|e| e.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Empty("episodes with at least two steps"));
    }
    let mut out = Vec::with_capacity(cfg.n_pairs * (1 + usize::from(cfg.symmetric)));
    let mut attempts = 0usize;
    while out.len() < cfg.n_pairs * (1 + usize::from(cfg.symmetric)) {
        attempts += 1;
        if attempts > 100 * cfg.n_pairs.max(1) {
            return Err(Error::Empty("stage segments with at least two frames"));
        }
        let e = usable[rng.below(usable.len())];
        let (lo, hi, g) = if cfg.staged {
            let t = rng.below(e.len());
            let g = e.stage_labels[t];
            let (a, b) = segment(e, g).expect("label present");
            if b - a < 2 {
                continue;
            }
            (a, b, Some(StageLabel::new(g, e.stages())?.scalar()))
        } else {
            (0, e.len() + 1, None)
        };
        let i = lo + rng.below(hi - lo);
        let j = lo + rng.below(hi - lo);
        if i == j {
            continue;
        }
        let (t, tp) = (i.min(j), i.max(j));
        let target = if cfg.staged {
            segment_target(t, tp, hi - lo)
        } else {
            episode_target(t, tp, e.len())
        };
        let sample = AdvantageSample {
            s: e.states[t].clone(),
            s_prime: e.states[tp].clone(),
            g,
            target,
            delta: (tp - t) as i64,
        };
        if cfg.symmetric {
            out.push(AdvantageSample {
                s: sample.s_prime.clone(),
                s_prime: sample.s.clone(),
                g,
                target: -target,
                delta: -sample.delta,
            });
        }
        out.push(sample);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageLayout {
    pub staged: bool,
    pub hidden: Vec<usize>,
}

impl Default for AdvantageLayout {
    fn default() -> Self {
        Self {
            staged: true,
            hidden: vec![64, 64],
        }
    }
}

impl AdvantageLayout {
    pub fn mlp(&self) -> MlpLayout {
        MlpLayout::new(2 * STATE_DIM + usize::from(self.staged), self.hidden.clone(), 1)
    }

    pub fn id(&self) -> String {
        format!(
            "advantage/{}/{}",
            self.mlp().id(),
            if self.staged { "staged" } else { "plain" }
        )
    }

    fn input(&self, s: &[f64], sp: &[f64], g: Option<f64>, out: &mut Vec<f64>) {
        out.extend_from_slice(&s[..STATE_DIM]);
        out.extend_from_slice(&sp[..STATE_DIM]);
        if self.staged {
            out.push(g.unwrap_or(0.0));
        }
    }
}

/// Pairwise progress network `f(s, s' [| g])`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageNet {
    pub layout: AdvantageLayout,
    pub params: ParameterVector,
}

impl AdvantageNet {
    pub fn init(layout: &AdvantageLayout, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            layout: layout.clone(),
            params: ParameterVector::new(layout.id(), layout.mlp().init(rng))?,
        })
    }

    pub fn predict(&self, s: &[f64], s_prime: &[f64], g: Option<f64>) -> Result<f64> {
        let mut x = Vec::with_capacity(self.layout.mlp().input);
        self.layout.input(s, s_prime, g, &mut x);
        let x = Array2::from_shape_vec((1, x.len()), x).expect("row");
        Ok(self.layout.mlp().forward(self.params.values(), x.view())?[[0, 0]])
    }

    /// Network inputs and targets for `samples`.
    pub fn design(&self, samples: &[AdvantageSample]) -> (Array2<f64>, Array2<f64>) {
        let width = self.layout.mlp().input;
        let mut xs = Vec::with_capacity(samples.len() * width);
        for s in samples {
            self.layout.input(&s.s, &s.s_prime, s.g, &mut xs);
        }
        let x = Array2::from_shape_vec((samples.len(), width), xs).expect("rows");
        let y = Array2::from_shape_vec((samples.len(), 1), samples.iter().map(|s| s.target).collect())
            .expect("rows");
        (x, y)
    }

    /// Mean squared error and gradient on `samples`.
    pub fn loss_and_grad(&self, samples: &[AdvantageSample]) -> Result<(f64, Vec<f64>)> {
        if samples.is_empty() {
            return Err(Error::Empty("advantage samples"));
        }
        let (x, y) = self.design(samples);
        let w = Array1::ones(samples.len());
        self.layout
            .mlp()
            .weighted_sse(self.params.values(), x.view(), y.view(), w.view())
    }
}

/// Squared-error regression of the pairwise network onto `samples`.
pub fn train_advantage(
    samples: &[AdvantageSample],
    layout: &AdvantageLayout,
    cfg: &TrainConfig,
) -> Result<(AdvantageNet, Vec<CurvePoint>)> {
    if samples.is_empty() {
        return Err(Error::Empty("advantage samples"));
    }
    let mut net = AdvantageNet::init(layout, &mut Rng::new(cfg.seed).split_named("advantage-init"))?;
    let (x, y) = net.design(samples);
    let w = Array1::ones(samples.len());
    let mut p = net.params.values().to_vec();
    let curve = fit(&layout.mlp(), &mut p, &Regression { x: &x, y: &y, weights: &w }, cfg)?;
    net.params = ParameterVector::new(layout.id(), p)?;
    Ok((net, curve))
}

/// Global-progress regressor `V(s) ≈ t / T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    pub hidden: Vec<usize>,
    pub params: ParameterVector,
}

impl ValueNet {
    pub fn mlp(hidden: &[usize]) -> MlpLayout {
        MlpLayout::new(STATE_DIM, hidden.to_vec(), 1)
    }

    pub fn value(&self, s: &[f64]) -> Result<f64> {
        let x = Array2::from_shape_vec((1, STATE_DIM), s[..STATE_DIM].to_vec()).expect("row");
        Ok(Self::mlp(&self.hidden).forward(self.params.values(), x.view())?[[0, 0]])
    }
}

/// `(state, t / T)` for every frame of every episode.
pub fn value_targets(episodes: &[Episode]) -> (Array2<f64>, Array2<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for e in episodes {
        for (t, s) in e.states.iter().enumerate() {
            xs.extend_from_slice(&s[..STATE_DIM]);
            ys.push(t as f64 / e.len() as f64);
        }
    }
    let n = ys.len();
    (
        Array2::from_shape_vec((n, STATE_DIM), xs).expect("rows"),
        Array2::from_shape_vec((n, 1), ys).expect("rows"),
    )
}

pub fn train_value(episodes: &[Episode], hidden: &[usize], cfg: &TrainConfig) -> Result<(ValueNet, Vec<CurvePoint>)> {
    let (x, y) = value_targets(episodes);
    if x.nrows() == 0 {
        return Err(Error::Empty("value training frames"));
    }
    let mlp = ValueNet::mlp(hidden);
    let mut p = mlp.init(&mut Rng::new(cfg.seed).split_named("value-init"));
    let w = Array1::ones(x.nrows());
    let curve = fit(&mlp, &mut p, &Regression { x: &x, y: &y, weights: &w }, cfg)?;
    let params = ParameterVector::new(format!("value/{}", mlp.id()), p)?;
    Ok((
        ValueNet {
            hidden: hidden.to_vec(),
            params,
        },
        curve,
    ))
}

/// Per-step advantage of an episode.
pub trait Estimator {
    fn advantage(&self, e: &Episode, t: usize) -> Result<f64>;

    /// Advantage at every step `0..T`.
    fn series(&self, e: &Episode) -> Result<Vec<f64>> {
        (0..e.len()).map(|t| self.advantage(e, t)).collect()
    }
}

/// `f(s_t, s_{t+span}, g_t)`, with the span truncated at the episode end.
/// The staged net scores a window that crosses stage boundaries piecewise,
/// one stage per piece, and reports the sum in task units (a stage is `1/S`
/// of the task).
#[derive(Clone, Debug)]
pub struct DirectEstimator {
    pub net: AdvantageNet,
    pub span: usize,
}

impl Estimator for DirectEstimator {
    fn advantage(&self, e: &Episode, t: usize) -> Result<f64> {
        let end = (t + self.span).min(e.len());
        if !self.net.layout.staged {
            return self.net.predict(&e.states[t], &e.states[end], None);
        }
        let mut total = 0.0;
        let mut a = t;
        while a < end {
            let label = e.stage_labels[a];
            let b = e.stage_labels[a..end]
                .iter()
                .position(|&x| x != label)
                .map_or(end, |i| a + i);
            let g = StageLabel::new(label, e.stages())?.scalar();
            total += self.net.predict(&e.states[a], &e.states[b], Some(g))?;
            a = b;
        }
        Ok(total / e.stages() as f64)
    }
}

/// `V(s_{t+min(h, T-t)}) - V(s_t)`.
#[derive(Clone, Debug)]
pub struct ValueDifference {
    pub value: ValueNet,
    pub horizon: usize,
}

impl Estimator for ValueDifference {
    fn advantage(&self, e: &Episode, t: usize) -> Result<f64> {
        let tp = t + self.horizon.min(e.len() - t);
        Ok(self.value.value(&e.states[tp])? - self.value.value(&e.states[t])?)
    }
}

/// Exact global progress; useful as an oracle.
#[derive(Clone, Debug)]
pub struct OracleProgress {
    pub horizon: usize,
}

impl Estimator for OracleProgress {
    fn advantage(&self, e: &Episode, t: usize) -> Result<f64> {
        let tp = t + self.horizon.min(e.len() - t);
        Ok((tp - t) as f64 / e.len() as f64)
    }
}

pub fn baseline_value_difference(
    episodes: &[Episode],
    horizon: usize,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<ValueDifference> {
    let (value, _) = train_value(episodes, hidden, cfg)?;
    Ok(ValueDifference { value, horizon })
}

/// Top `fraction` of samples by advantage are positive. Ties go to the lower
/// index.
pub fn binarize(advantages: &[f64], fraction: f64) -> Result<Vec<bool>> {
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::Config("advantages must be finite".into()));
    }
    let n_pos = ((fraction.clamp(0.0, 1.0) * advantages.len() as f64).round() as usize).min(advantages.len());
    let mut order: Vec<usize> = (0..advantages.len()).collect();
    order.sort_by(|&a, &b| advantages[b].total_cmp(&advantages[a]));
    let mut out = vec![false; advantages.len()];
    for &i in &order[..n_pos] {
        out[i] = true;
    }
    Ok(out)
}

/// `a > threshold`.
pub fn binarize_threshold(advantages: &[f64], threshold: f64) -> Vec<bool> {
    advantages.iter().map(|&a| a > threshold).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub mstd: f64,
    pub sfr: f64,
}

/// Mean squared first difference and fraction of sub-`tau` differences.
pub fn stability_metrics(series: &[f64], tau: f64) -> Result<Stability> {
    if series.len() < 2 {
        return Err(Error::Empty("advantage series of length >= 2"));
    }
    let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let n = diffs.len() as f64;
    Ok(Stability {
        mstd: diffs.iter().map(|d| d * d).sum::<f64>() / n,
        sfr: diffs.iter().filter(|d| d.abs() < tau).count() as f64 / n,
    })
}

pub fn cumulative_value_trace(est: &dyn Estimator, e: &Episode) -> Result<Vec<f64>> {
    if e.len() < 1 {
        return Err(Error::Empty("episode frames"));
    }
    let mut acc = 0.0;
    Ok(est
        .series(e)?
        .into_iter()
        .map(|a| {
            acc += a;
            acc
        })
        .collect())
}

/// `t,a_t,cumulative` rows.
pub fn trace_csv(series: &[f64]) -> String {
    let mut out = String::from("t,a_t,cumulative\n");
    let mut acc = 0.0;
    for (t, a) in series.iter().enumerate() {
        acc += a;
        out.push_str(&format!("{t},{a},{acc}\n"));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageVariant {
    None,
    ValueDiff,
    Direct,
    DirectStage,
}

impl AdvantageVariant {
    pub const ALL: [AdvantageVariant; 4] = [
        AdvantageVariant::None,
        AdvantageVariant::ValueDiff,
        AdvantageVariant::Direct,
        AdvantageVariant::DirectStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdvantageVariant::None => "none",
            AdvantageVariant::ValueDiff => "value_diff",
            AdvantageVariant::Direct => "direct",
            AdvantageVariant::DirectStage => "direct_stage",
        }
    }
}

impl fmt::Display for AdvantageVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdvantageVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdvantageVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown advantage variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageConfig {
    pub hidden: Vec<usize>,
    pub pairs: PairConfig,
    pub train: TrainConfig,
    /// Span used when scoring steps of the direct estimators for weighting.
    pub weight_span: usize,
    pub value_horizon: usize,
    pub epsilon_fraction: f64,
    /// Threshold the raw advantage at `threshold` instead of ranking.
    pub threshold_mode: bool,
    pub threshold: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            pairs: PairConfig::default(),
            train: TrainConfig {
                steps: 3000,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            weight_span: 10,
            value_horizon: 50,
            epsilon_fraction: 0.3,
            threshold_mode: false,
            threshold: 0.0,
        }
    }
}

/// Trains the estimator a variant calls for. `None` for the plain variant.
pub fn fit_estimator(
    variant: AdvantageVariant,
    episodes: &[Episode],
    cfg: &AdvantageConfig,
    rng: &mut Rng,
) -> Result<Option<Box<dyn Estimator>>> {
    Ok(match variant {
        AdvantageVariant::None => None,
        AdvantageVariant::ValueDiff => Some(Box::new(baseline_value_difference(
            episodes,
            cfg.value_horizon,
            &cfg.hidden,
            &cfg.train,
        )?)),
        AdvantageVariant::Direct | AdvantageVariant::DirectStage => {
            let staged = variant == AdvantageVariant::DirectStage;
            let pairs = PairConfig {
                staged,
                ..cfg.pairs.clone()
            };
            let samples = sample_pairs(episodes, &pairs, rng)?;
            let layout = AdvantageLayout {
                staged,
                hidden: cfg.hidden.clone(),
            };
            let (net, _) = train_advantage(&samples, &layout, &cfg.train)?;
            Some(Box::new(DirectEstimator {
                net,
                span: cfg.weight_span,
            }))
        }
    })
}

/// Binary optimality indicator for every expert-labelled step, in the row
/// order used by the behavior-cloning dataset.
pub fn step_indicators(est: &dyn Estimator, episodes: &[Episode], cfg: &AdvantageConfig) -> Result<Vec<bool>> {
    let mut adv = Vec::new();
    for e in episodes {
        for t in e.expert_from..e.len() {
            adv.push(est.advantage(e, t)?);
        }
    }
    if cfg.threshold_mode {
        Ok(binarize_threshold(&adv, cfg.threshold))
    } else {
        binarize(&adv, cfg.epsilon_fraction)
    }
}
