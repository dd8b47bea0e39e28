//! Closed-loop simulation with inference latency, the metric suite, the
//! experiment pipeline and the matrix runner.

pub mod matrix;
pub mod pipeline;
pub mod plot;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::advantage::{stability_metrics, Estimator};
use crate::chunk::ActionChunk;
use crate::control::{boundary_jerk, EmitSource, Executor, SmoothingConfig, TraceRow};
use crate::env::{dist, observe, reset, step, Controller, EnvConfig, EnvState};
use crate::episode::{Episode, Provenance};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use matrix::{run_matrix, MatrixConfig, ResultRow};
pub use plot::emit_plotdata;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub inference_latency_ticks: u64,
    pub chunk_length: usize,
    pub control_hz: f64,
    /// Episode cap H in ticks; `None` uses the environment horizon.
    pub max_episode_ticks: Option<u64>,
    /// Request a new chunk when fewer fresh commands remain. `None` means
    /// half the chunk length.
    pub refill_threshold: Option<usize>,
    pub smoothing: SmoothingConfig,
    pub env: EnvConfig,
    /// Ticks after each swap over which boundary jerk is measured.
    pub jerk_window: usize,
    /// Retry approach and withdraw radii in multiples of `r_goal`.
    pub retry_inner: f64,
    pub retry_outer: f64,
    pub tau_smooth: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            inference_latency_ticks: 20,
            chunk_length: 50,
            control_hz: 100.0,
            max_episode_ticks: None,
            refill_threshold: None,
            smoothing: SmoothingConfig::default(),
            env: EnvConfig::default(),
            jerk_window: 10,
            retry_inner: 2.0,
            retry_outer: 3.0,
            tau_smooth: 0.05,
        }
    }
}

impl SimConfig {
    pub fn horizon(&self) -> u64 {
        self.max_episode_ticks.unwrap_or(self.env.horizon)
    }

    pub fn threshold(&self) -> usize {
        self.refill_threshold.unwrap_or(self.chunk_length / 2)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.smoothing.validate()?;
        if self.chunk_length == 0 {
            return Err(Error::Config("chunk_length must be at least 1".into()));
        }
        if self.inference_latency_ticks >= self.horizon() {
            return Err(Error::Config("latency must be below the episode cap".into()));
        }
        if !(self.control_hz > 0.0) {
            return Err(Error::Config("control_hz must be positive".into()));
        }
        if !(self.retry_outer > self.retry_inner) {
            return Err(Error::Config("retry_outer must exceed retry_inner".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub success: bool,
    pub ticks: u64,
    pub stages_completed: usize,
    pub stages: usize,
    pub retries: usize,
    /// Ticks on which no fresh command was available.
    pub starved_ticks: usize,
    pub boundary_jerk: Option<f64>,
    pub mstd: Option<f64>,
    pub sfr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub episode: Episode,
    pub trace: Vec<TraceRow>,
    pub metrics: EpisodeMetrics,
}

/// Approach/withdraw events toward the current goal that end without a stage
/// advance.
pub fn count_retries(e: &Episode, inner: f64, outer: f64) -> usize {
    let r = e.env.r_goal;
    let mut retries = 0;
    let mut armed = false;
    let mut stage = usize::MAX;
    for (t, s) in e.states.iter().enumerate().skip(1) {
        let g = e.stage_labels.get(t).copied().unwrap_or_else(|| e.final_stage());
        if g != stage {
            stage = g;
            armed = false;
        }
        if g >= e.stages() {
            break;
        }
        let d = dist(s, &e.env.waypoint(g));
        if d < inner * r {
            armed = true;
        } else if armed && d > outer * r {
            retries += 1;
            armed = false;
        }
    }
    retries
}

/// Runs one closed-loop episode. Inference requested after tick `t` observes
/// the post-step state and is delivered at `t + 1 + latency`.
pub fn run_episode(sim: &SimConfig, controller: &mut dyn Controller, rng: &Rng) -> Result<Rollout> {
    sim.validate()?;
    let env = &sim.env;
    let mut state = reset(env, &mut rng.split_named("reset"))?;
    let mut obs_rng = rng.split_named("observation");
    let mut exec = Executor::new(sim.smoothing.clone(), 2)?;
    let mut pending: VecDeque<(u64, ActionChunk)> = VecDeque::new();
    let latency = sim.inference_latency_ticks;
    let mut request = |s: &EnvState, pending: &mut VecDeque<(u64, ActionChunk)>, obs_rng: &mut Rng| -> Result<()> {
        let obs = observe(s, env, obs_rng);
        let c = controller.chunk(&obs, env)?;
        let c = ActionChunk::new(c.into_actions(), s.t)?;
        pending.push_back((s.t + latency, c));
        Ok(())
    };
    request(&state, &mut pending, &mut obs_rng)?;

    let id = rng.split_named("episode-id").next_u64();
    let mut states = vec![state.p.to_vec()];
    let mut actions = Vec::new();
    let mut labels = Vec::new();
    let mut trace = Vec::new();
    let horizon = sim.horizon();
    for t in 0..horizon {
        while pending.front().is_some_and(|(due, _)| *due <= t) {
            let (_, c) = pending.pop_front().expect("checked");
            exec.deliver(&c, t)?;
        }
        let row = exec.tick(t);
        let next = step(&state, &row.action, env)?;
        labels.push(state.g);
        actions.push(row.action.clone());
        states.push(next.p.to_vec());
        trace.push(row);
        state = next;
        if state.is_complete(env) {
            break;
        }
        if pending.is_empty() && exec.wants_request(t + 1, sim.threshold()) {
            request(&state, &mut pending, &mut obs_rng)?;
        }
    }
    let n = states.len() as u64;
    let episode = Episode {
        id,
        states,
        actions,
        stage_labels: labels,
        timestamps: (0..n).collect(),
        provenance: Provenance::Rollout,
        env: env.clone(),
        expert_from: n as usize - 1,
        flagged: Vec::new(),
    };
    let swaps: Vec<usize> = trace
        .iter()
        .enumerate()
        .filter(|(i, r)| r.swapped && *i > 0)
        .map(|(i, _)| i)
        .collect();
    let metrics = EpisodeMetrics {
        seed: rng.seed(),
        success: state.is_complete(env),
        ticks: episode.len() as u64,
        stages_completed: state.g,
        stages: env.stages(),
        retries: count_retries(&episode, sim.retry_inner, sim.retry_outer),
        starved_ticks: trace.iter().filter(|r| r.source != EmitSource::Fresh).count(),
        boundary_jerk: boundary_jerk(&episode.actions, &swaps, sim.jerk_window),
        mstd: None,
        sfr: None,
    };
    Ok(Rollout {
        episode,
        trace,
        metrics,
    })
}

/// Attaches advantage-series stability figures to a rollout.
pub fn attach_stability(r: &mut Rollout, est: &dyn Estimator, tau: f64) -> Result<()> {
    if r.episode.len() >= 2 {
        let s = stability_metrics(&est.series(&r.episode)?, tau)?;
        r.metrics.mstd = Some(s.mstd);
        r.metrics.sfr = Some(s.sfr);
    }
    Ok(())
}

/// Mean and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len();
        if n == 0 {
            return Stat { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Stat { mean, se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub episodes: usize,
    pub sr: f64,
    pub tp: f64,
    pub retry_cost: f64,
    pub score: f64,
    pub mean_ticks: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub sr: f64,
    /// Task completions per simulated hour.
    pub tp: f64,
    pub retry_cost: f64,
    pub score: f64,
    pub mean_ticks: f64,
    pub starved_ticks: f64,
    pub mstd: Option<f64>,
    pub sfr: Option<f64>,
    pub boundary_jerk: Option<f64>,
    pub se_sr: f64,
    pub se_tp: f64,
    pub se_retry: f64,
    pub se_score: f64,
    pub per_seed: Vec<SeedMetrics>,
}

fn summary(eps: &[&EpisodeMetrics], hz: f64) -> (f64, f64, f64, f64, f64) {
    let n = eps.len() as f64;
    let succ = eps.iter().filter(|e| e.success).count() as f64;
    let ticks: u64 = eps.iter().map(|e| e.ticks).sum();
    let hours = ticks as f64 / hz / 3600.0;
    (
        succ / n,
        if hours > 0.0 { succ / hours } else { 0.0 },
        eps.iter().map(|e| e.retries as f64).sum::<f64>() / n,
        eps.iter()
            .map(|e| 100.0 * e.stages_completed as f64 / e.stages as f64)
            .sum::<f64>()
            / n,
        ticks as f64 / n,
    )
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Pooled metrics plus a per-seed breakdown. Standard errors are taken across
/// seeds when there are at least two, otherwise across episodes.
pub fn compute_metrics(episodes: &[EpisodeMetrics], control_hz: f64) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::Empty("episode set"));
    }
    let all: Vec<&EpisodeMetrics> = episodes.iter().collect();
    let (sr, tp, retry_cost, score, mean_ticks) = summary(&all, control_hz);
    let mut seeds: Vec<u64> = episodes.iter().map(|e| e.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let per_seed: Vec<SeedMetrics> = seeds
        .iter()
        .map(|&seed| {
            let group: Vec<&EpisodeMetrics> = episodes.iter().filter(|e| e.seed == seed).collect();
            let (sr, tp, retry_cost, score, mean_ticks) = summary(&group, control_hz);
            SeedMetrics {
                seed,
                episodes: group.len(),
                sr,
                tp,
                retry_cost,
                score,
                mean_ticks,
            }
        })
        .collect();
    let units: Vec<SeedMetrics> = if per_seed.len() >= 2 {
        per_seed.clone()
    } else {
        episodes
            .iter()
            .map(|e| {
                let (sr, tp, retry_cost, score, mean_ticks) = summary(&[e], control_hz);
                SeedMetrics {
                    seed: e.seed,
                    episodes: 1,
                    sr,
                    tp,
                    retry_cost,
                    score,
                    mean_ticks,
                }
            })
            .collect()
    };
    let se = |f: fn(&SeedMetrics) -> f64| Stat::of(&units.iter().map(f).collect::<Vec<_>>()).se;
    Ok(MetricsReport {
        episodes: episodes.len(),
        sr,
        tp,
        retry_cost,
        score,
        mean_ticks,
        starved_ticks: episodes.iter().map(|e| e.starved_ticks as f64).sum::<f64>() / episodes.len() as f64,
        mstd: mean_opt(episodes.iter().map(|e| e.mstd)),
        sfr: mean_opt(episodes.iter().map(|e| e.sfr)),
        boundary_jerk: mean_opt(episodes.iter().map(|e| e.boundary_jerk)),
        se_sr: se(|m| m.sr),
        se_tp: se(|m| m.tp),
        se_retry: se(|m| m.retry_cost),
        se_score: se(|m| m.score),
        per_seed,
    })
}

/// `n` evaluation episodes of `controller`, each from its own stream of `rng`.
pub fn evaluate(sim: &SimConfig, controller: &mut dyn Controller, n: usize, rng: &Rng) -> Result<Vec<Rollout>> {
    (0..n).map(|i| run_episode(sim, controller, &rng.split(i as u64))).collect()
}
