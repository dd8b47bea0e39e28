//! A deterministic multi-stage 2D reaching task.
//!
//! The agent must visit `S` waypoints in order. A waypoint is captured when
//! the agent ends a tick within `r_goal` of it, which advances the stage. The
//! default waypoints lie on the vertical axis and the path doubles back on
//! itself, so identical positions occur in different stages and the task is
//! invariant under reflection `x -> -x`.

mod augment;
mod datasets;

pub use augment::{augment_frameskip, augment_mirror, mirror_config};
pub(crate) use datasets::observe;
pub use datasets::{
    dagger_dataset, degraded_dataset, generate_expert_dataset, heuristic_dagger_dataset, rollout,
    sample_failure_state, DaggerConfig, DegradeOptions, ExpertOptions, FailureKind,
};

use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Positions are clamped to `[-BOUND, BOUND]^2`.
pub const BOUND: f64 = 1.2;

/// Proportional gain of the scripted expert.
pub const EXPERT_GAIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub waypoints: Vec<[f64; 2]>,
    pub r_goal: f64,
    /// Episode horizon in ticks.
    pub horizon: u64,
    pub dt: f64,
    /// Maximum commanded speed per axis per tick.
    pub action_clip: f64,
    pub obs_noise_sigma: f64,
    pub xi_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            waypoints: vec![[0.0, 0.6], [0.0, -0.6], [0.0, 0.2]],
            r_goal: 0.05,
            horizon: 600,
            dt: 1.0,
            action_clip: 0.05,
            obs_noise_sigma: 0.0,
            xi_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn stages(&self) -> usize {
        self.waypoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 {
            return Err(Error::Config("S must be at least 1".into()));
        }
        if !(self.r_goal > 0.0) {
            return Err(Error::Config("r_goal must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(self.dt > 0.0) || !(self.action_clip > 0.0) || !(self.obs_noise_sigma >= 0.0) {
            return Err(Error::Config(
                "dt and action_clip must be positive, obs_noise_sigma non-negative".into(),
            ));
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if w.iter().any(|c| !(-1.0..=1.0).contains(c)) {
                return Err(Error::Config(format!("waypoint {i} outside [-1, 1]^2")));
            }
            for (j, v) in self.waypoints.iter().enumerate().skip(i + 1) {
                if w == v {
                    return Err(Error::Config(format!("waypoints {i} and {j} coincide")));
                }
            }
        }
        for (i, pair) in self.waypoints.windows(2).enumerate() {
            if dist(&pair[0], &pair[1]) <= 2.0 * self.r_goal {
                return Err(Error::Config(format!(
                    "waypoints {i} and {} are closer than 2 r_goal",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn waypoint(&self, g: usize) -> [f64; 2] {
        self.waypoints[g]
    }

    /// Whether position `p` is inside the capture radius of waypoint `g`.
    pub fn captures(&self, p: &[f64], g: usize) -> bool {
        g < self.stages() && dist(p, &self.waypoints[g]) < self.r_goal
    }
}

/// Position, stage and tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub p: [f64; 2],
    /// Index of the waypoint currently sought; equals `S` once complete.
    pub g: usize,
    pub t: u64,
}

impl EnvState {
    pub fn is_complete(&self, cfg: &EnvConfig) -> bool {
        self.g >= cfg.stages()
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn reset(cfg: &EnvConfig, rng: &mut Rng) -> Result<EnvState> {
    cfg.validate()?;
    let x = rng.uniform_range(-1.0, 1.0);
    let y = rng.uniform_range(-1.0, 1.0);
    Ok(EnvState {
        p: [x, y],
        g: 0,
        t: 0,
    })
}

/// Clip each component of `a` to `[-limit, limit]`.
pub fn clip_action(a: &[f64], limit: f64) -> [f64; 2] {
    [a[0].clamp(-limit, limit), a[1].clamp(-limit, limit)]
}

pub fn step(s: &EnvState, a: &[f64], cfg: &EnvConfig) -> Result<EnvState> {
    if a.len() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: a.len(),
        });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteAction);
    }
    let c = clip_action(a, cfg.action_clip);
    let p = [
        (s.p[0] + c[0] * cfg.dt).clamp(-BOUND, BOUND),
        (s.p[1] + c[1] * cfg.dt).clamp(-BOUND, BOUND),
    ];
    let g = if cfg.captures(&p, s.g) { s.g + 1 } else { s.g };
    Ok(EnvState { p, g, t: s.t + 1 })
}

/// Noise-free proportional command toward the current waypoint. The vector is
/// scaled down uniformly so no axis exceeds `action_clip`, which keeps motion
/// on the straight line to the target.
pub fn expert_action(p: &[f64; 2], g: usize, cfg: &EnvConfig) -> [f64; 2] {
    if g >= cfg.stages() {
        return [0.0, 0.0];
    }
    let w = cfg.waypoint(g);
    let mut v = [EXPERT_GAIN * (w[0] - p[0]), EXPERT_GAIN * (w[1] - p[1])];
    let m = v[0].abs().max(v[1].abs());
    if m > cfg.action_clip {
        let s = cfg.action_clip / m;
        v = [v[0] * s, v[1] * s];
    }
    v
}

/// Plans `k` expert actions open-loop from `s`, advancing stages along the
/// imagined trajectory. Perturbations are drawn per component.
pub fn expert_policy(
    s: &EnvState,
    cfg: &EnvConfig,
    rng: &mut Rng,
    noise_sigma: f64,
    k: usize,
) -> Result<ActionChunk> {
    if s.is_complete(cfg) {
        return Err(Error::TaskComplete);
    }
    let mut sim = *s;
    let mut actions = Vec::with_capacity(k);
    for _ in 0..k {
        let base = expert_action(&sim.p, sim.g, cfg);
        let a = vec![base[0] + rng.gaussian(noise_sigma), base[1] + rng.gaussian(noise_sigma)];
        sim = step(&sim, &a, cfg)?;
        actions.push(a);
    }
    ActionChunk::new(actions, s.t)
}

/// Anything that maps an observation to an action chunk.
pub trait Controller {
    fn chunk(&mut self, obs: &EnvState, cfg: &EnvConfig) -> Result<ActionChunk>;
}

/// The scripted expert as a [`Controller`].
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    pub noise_sigma: f64,
    pub k: usize,
    pub rng: Rng,
}

impl Controller for ScriptedExpert {
    fn chunk(&mut self, obs: &EnvState, cfg: &EnvConfig) -> Result<ActionChunk> {
        if obs.is_complete(cfg) {
            return ActionChunk::new(vec![vec![0.0, 0.0]; self.k], obs.t);
        }
        expert_policy(obs, cfg, &mut self.rng, self.noise_sigma, self.k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn far_cfg() -> EnvConfig {
        EnvConfig {
            waypoints: vec![[1.0, 0.0]],
            ..EnvConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let mut c = EnvConfig::default();
        c.waypoints.clear();
        assert!(c.validate().is_err());
        let c = EnvConfig {
            waypoints: vec![[0.0, 0.0], [0.05, 0.0]],
            ..EnvConfig::default()
        };
        assert!(c.validate().is_err());
        let c = EnvConfig {
            waypoints: vec![[0.0, 0.0], [0.5, 0.0], [0.0, 0.0]],
            ..EnvConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let cfg = EnvConfig::default();
        let a = reset(&cfg, &mut Rng::new(7)).unwrap();
        let b = reset(&cfg, &mut Rng::new(7)).unwrap();
        let c = reset(&cfg, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.p, c.p);
        assert_eq!((a.g, a.t), (0, 0));
        assert!(a.p.iter().all(|x| (-1.0..1.0).contains(x)));
    }

    #[test]
    fn reset_with_no_stages_fails() {
        let cfg = EnvConfig {
            waypoints: vec![],
            ..EnvConfig::default()
        };
        assert!(reset(&cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn euler_step_and_clip() {
        let cfg = far_cfg();
        let s = EnvState { p: [0.0, 0.0], g: 0, t: 0 };
        let n = step(&s, &[0.05, 0.0], &cfg).unwrap();
        assert_eq!(n.p, [0.05, 0.0]);
        assert_eq!((n.g, n.t), (0, 1));
        let n = step(&s, &[10.0, 10.0], &cfg).unwrap();
        assert_eq!(n.p, [0.05, 0.05]);
        assert!(matches!(step(&s, &[f64::NAN, 0.0], &cfg), Err(Error::NonFiniteAction)));
        assert!(matches!(step(&s, &[0.0], &cfg), Err(Error::Dimension { .. })));
    }

    #[test]
    fn capture_advances_exactly_one_stage() {
        let cfg = EnvConfig::default();
        let w = cfg.waypoint(0);
        let s = EnvState { p: [w[0], w[1] - 0.06], g: 0, t: 5 };
        let n = step(&s, &[0.0, 0.03], &cfg).unwrap();
        assert_eq!(n.g, 1);
        assert_eq!(n.t, 6);
    }

    #[test]
    fn position_is_clamped() {
        let cfg = far_cfg();
        let s = EnvState { p: [1.19, -1.19], g: 0, t: 0 };
        let n = step(&s, &[0.05, -0.05], &cfg).unwrap();
        assert_eq!(n.p, [BOUND, -BOUND]);
    }

    #[test]
    fn expert_chunk_toward_far_waypoint() {
        let cfg = far_cfg();
        let s = EnvState { p: [0.0, 0.0], g: 0, t: 0 };
        let c = expert_policy(&s, &cfg, &mut Rng::new(1), 0.0, 10).unwrap();
        assert_eq!(c.len(), 10);
        for a in c.actions() {
            assert_eq!(a, &vec![0.05, 0.0]);
        }
    }

    #[test]
    fn expert_at_waypoint_is_still() {
        let cfg = EnvConfig {
            waypoints: vec![[0.3, 0.3], [0.9, 0.9]],
            ..EnvConfig::default()
        };
        let s = EnvState { p: [0.3, 0.3], g: 0, t: 0 };
        let a = expert_action(&s.p, s.g, &cfg);
        assert!(a[0].abs() < 1e-12 && a[1].abs() < 1e-12);
    }

    #[test]
    fn expert_is_deterministic_and_refuses_finished_tasks() {
        let cfg = EnvConfig::default();
        let s = EnvState { p: [0.1, 0.2], g: 1, t: 3 };
        let a = expert_policy(&s, &cfg, &mut Rng::new(4), 0.02, 50).unwrap();
        let b = expert_policy(&s, &cfg, &mut Rng::new(4), 0.02, 50).unwrap();
        assert_eq!(a, b);
        let done = EnvState { g: 3, ..s };
        assert!(matches!(
            expert_policy(&done, &cfg, &mut Rng::new(4), 0.0, 5),
            Err(Error::TaskComplete)
        ));
    }

    #[test]
    fn mirrored_dynamics_commute() {
        let cfg = EnvConfig {
            waypoints: vec![[0.3, 0.5], [-0.7, 0.1]],
            ..EnvConfig::default()
        };
        let m = mirror_config(&cfg);
        let mut rng = Rng::new(11);
        for _ in 0..500 {
            let s = EnvState {
                p: [rng.uniform_range(-1.2, 1.2), rng.uniform_range(-1.2, 1.2)],
                g: rng.below(2),
                t: 0,
            };
            let a = [rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1)];
            let n = step(&s, &a, &cfg).unwrap();
            let ms = EnvState { p: [-s.p[0], s.p[1]], ..s };
            let mn = step(&ms, &[-a[0], a[1]], &m).unwrap();
            assert_eq!(mn.p, [-n.p[0], n.p[1]]);
            assert_eq!(mn.g, n.g);
        }
    }
}
