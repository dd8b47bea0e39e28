use serde::{Deserialize, Serialize};

use super::{dist, expert_action, reset, step, Controller, EnvConfig, EnvState, BOUND};
use crate::episode::{Episode, Provenance};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertOptions {
    /// Std of the Gaussian perturbation added to each action component.
    pub noise_sigma: f64,
    /// Generation attempts per episode slot before giving up.
    pub max_attempts: usize,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        Self {
            noise_sigma: 0.01,
            max_attempts: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Just past the current waypoint along the approach direction.
    Overshoot,
    /// Next to a waypoint other than the current one.
    WrongBasin,
    /// Displaced sideways from the middle of the current path segment.
    StalledOffset,
}

impl FailureKind {
    pub const ALL: [FailureKind; 3] = [
        FailureKind::Overshoot,
        FailureKind::WrongBasin,
        FailureKind::StalledOffset,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaggerConfig {
    /// Ticks without stage advance and with net displacement below
    /// `r_goal / 2` that count as a failure.
    pub stall_window: u64,
    /// Actions executed from each queried chunk before re-querying.
    pub exec_horizon: usize,
    pub expert_noise: f64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        Self {
            stall_window: 100,
            exec_horizon: 10,
            expert_noise: 0.01,
        }
    }
}

struct Recorder {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    labels: Vec<usize>,
    ticks: Vec<u64>,
}

impl Recorder {
    fn new(s: &EnvState) -> Self {
        Self {
            states: vec![s.p.to_vec()],
            actions: Vec::new(),
            labels: Vec::new(),
            ticks: vec![s.t],
        }
    }

    fn push(&mut self, before: &EnvState, a: Vec<f64>, after: &EnvState) {
        self.labels.push(before.g);
        self.actions.push(a);
        self.states.push(after.p.to_vec());
        self.ticks.push(after.t);
    }

    fn finish(self, id: u64, provenance: Provenance, cfg: &EnvConfig, expert_from: usize) -> Episode {
        Episode {
            id,
            states: self.states,
            actions: self.actions,
            stage_labels: self.labels,
            timestamps: self.ticks,
            provenance,
            env: cfg.clone(),
            expert_from,
            flagged: Vec::new(),
        }
    }
}

/// Closed-loop expert from `s` until completion or `budget` ticks elapse.
fn expert_continue(
    rec: &mut Recorder,
    mut s: EnvState,
    cfg: &EnvConfig,
    noise: f64,
    budget: u64,
    rng: &mut Rng,
) -> Result<EnvState> {
    let stop = s.t + budget;
    while !s.is_complete(cfg) && s.t < stop {
        let base = expert_action(&s.p, s.g, cfg);
        let a = vec![base[0] + rng.gaussian(noise), base[1] + rng.gaussian(noise)];
        let n = step(&s, &a, cfg)?;
        rec.push(&s, a, &n);
        s = n;
    }
    Ok(s)
}

fn expert_from_state(
    start: EnvState,
    cfg: &EnvConfig,
    opts: &ExpertOptions,
    provenance: Provenance,
    slot_rng: &Rng,
) -> Result<Option<Episode>> {
    for attempt in 0..opts.max_attempts.max(1) {
        let mut rng = slot_rng.split(attempt as u64);
        let id = rng.next_u64();
        let mut rec = Recorder::new(&start);
        let end = expert_continue(&mut rec, start, cfg, opts.noise_sigma, cfg.horizon, &mut rng)?;
        if end.is_complete(cfg) {
            return Ok(Some(rec.finish(id, provenance, cfg, 0)));
        }
    }
    Ok(None)
}

/// Closed-loop expert demonstrations. Only successful episodes are kept; each
/// slot is retried up to `opts.max_attempts` times with fresh randomness.
pub fn generate_expert_dataset(
    cfg: &EnvConfig,
    n_episodes: usize,
    rng: &Rng,
    opts: &ExpertOptions,
) -> Result<Vec<Episode>> {
    cfg.validate()?;
    if n_episodes == 0 {
        return Err(Error::Empty("expert dataset request (n_episodes = 0)"));
    }
    (0..n_episodes)
        .map(|slot| {
            let slot_rng = rng.split(slot as u64);
            for attempt in 0..opts.max_attempts.max(1) {
                let mut r = slot_rng.split(attempt as u64);
                let start = reset(cfg, &mut r)?;
                let id = r.next_u64();
                let mut rec = Recorder::new(&start);
                let end = expert_continue(&mut rec, start, cfg, opts.noise_sigma, cfg.horizon, &mut r)?;
                if end.is_complete(cfg) {
                    return Ok(rec.finish(id, Provenance::Expert, cfg, 0));
                }
            }
            Err(Error::Unsolvable(format!(
                "expert failed {} attempts for slot {slot}",
                opts.max_attempts
            )))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeOptions {
    pub noise_sigma: f64,
    /// Per-tick probability of starting a stall.
    pub stall_prob: f64,
    /// Inclusive range of stall lengths in ticks.
    pub stall_ticks: [u64; 2],
    pub max_attempts: usize,
}

impl Default for DegradeOptions {
    fn default() -> Self {
        Self {
            noise_sigma: 0.03,
            stall_prob: 0.03,
            stall_ticks: [10, 30],
            max_attempts: 20,
        }
    }
}

/// Demonstrations by a poor operator: heavy action noise and stalls during
/// which only noise is commanded. Only completed episodes are kept.
pub fn degraded_dataset(cfg: &EnvConfig, n_episodes: usize, rng: &Rng, opts: &DegradeOptions) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let [lo, hi] = opts.stall_ticks;
    if lo > hi {
        return Err(Error::Config("stall_ticks must be an ordered pair".into()));
    }
    (0..n_episodes)
        .map(|slot| {
            let slot_rng = rng.split(slot as u64);
            for attempt in 0..opts.max_attempts.max(1) {
                let mut r = slot_rng.split(attempt as u64);
                let mut s = reset(cfg, &mut r)?;
                let id = r.next_u64();
                let mut rec = Recorder::new(&s);
                let mut stall = 0u64;
                while !s.is_complete(cfg) && s.t < cfg.horizon {
                    if stall == 0 && r.bernoulli(opts.stall_prob) {
                        stall = lo + r.below((hi - lo + 1) as usize) as u64;
                    }
                    let base = if stall > 0 {
                        stall -= 1;
                        [0.0, 0.0]
                    } else {
                        expert_action(&s.p, s.g, cfg)
                    };
                    let a = vec![base[0] + r.gaussian(opts.noise_sigma), base[1] + r.gaussian(opts.noise_sigma)];
                    let n = step(&s, &a, cfg)?;
                    rec.push(&s, a, &n);
                    s = n;
                }
                if s.is_complete(cfg) {
                    return Ok(rec.finish(id, Provenance::Expert, cfg, 0));
                }
            }
            Err(Error::Unsolvable(format!("degraded operator failed slot {slot}")))
        })
        .collect()
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n == 0.0 {
        [1.0, 0.0]
    } else {
        [v[0] / n, v[1] / n]
    }
}

fn clamp_box(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(-BOUND, BOUND), p[1].clamp(-BOUND, BOUND)]
}

/// Draws a designed failure state. The stage is always at least 1, so these
/// states never coincide with an initial state from [`reset`].
pub fn sample_failure_state(kind: FailureKind, cfg: &EnvConfig, rng: &mut Rng) -> Result<EnvState> {
    let s = cfg.stages();
    if s < 2 {
        return Err(Error::Config(
            "designed failure states need at least two stages".into(),
        ));
    }
    let r = cfg.r_goal;
    let g = 1 + rng.below(s - 1);
    let w = cfg.waypoint(g);
    let prev = cfg.waypoint(g - 1);
    let dir = unit([w[0] - prev[0], w[1] - prev[1]]);
    let p = match kind {
        FailureKind::Overshoot => {
            let d = rng.uniform_range(2.0, 4.0) * r;
            [w[0] + dir[0] * d, w[1] + dir[1] * d]
        }
        FailureKind::WrongBasin => {
            let mut j = rng.below(s - 1);
            if j >= g {
                j += 1;
            }
            let wj = cfg.waypoint(j);
            let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
            let d = rng.uniform_range(2.0, 4.0) * r;
            [wj[0] + d * theta.cos(), wj[1] + d * theta.sin()]
        }
        FailureKind::StalledOffset => {
            let f = rng.uniform_range(0.3, 0.7);
            let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let off = side * rng.uniform_range(3.0, 6.0) * r;
            [
                prev[0] + f * (w[0] - prev[0]) - dir[1] * off,
                prev[1] + f * (w[1] - prev[1]) + dir[0] * off,
            ]
        }
    };
    let mut p = clamp_box(p);
    // Never start already inside the capture radius of the sought waypoint.
    if dist(&p, &w) < 2.0 * r {
        let away = unit([p[0] - w[0], p[1] - w[1]]);
        p = clamp_box([w[0] + away[0] * 2.0 * r, w[1] + away[1] * 2.0 * r]);
    }
    Ok(EnvState { p, g, t: 0 })
}

/// Expert recovery demonstrations started directly in designed failure states.
/// Kinds are drawn uniformly per episode.
pub fn heuristic_dagger_dataset(
    cfg: &EnvConfig,
    n_episodes: usize,
    failure_kinds: &[FailureKind],
    rng: &Rng,
    opts: &ExpertOptions,
) -> Result<Vec<Episode>> {
    cfg.validate()?;
    if failure_kinds.is_empty() {
        return Err(Error::Empty("failure_kinds"));
    }
    (0..n_episodes)
        .map(|slot| {
            let slot_rng = rng.split(slot as u64);
            let mut r = slot_rng.split_named("failure-state");
            let kind = failure_kinds[r.below(failure_kinds.len())];
            let start = sample_failure_state(kind, cfg, &mut r)?;
            expert_from_state(start, cfg, opts, Provenance::HeuristicDagger, &slot_rng)?.ok_or_else(
                || Error::Unsolvable(format!("expert could not recover from {kind:?} in slot {slot}")),
            )
        })
        .collect()
}

/// Runs `controller` from `start`, querying a chunk every `exec_horizon`
/// ticks, for at most `max_ticks`. Observations carry `cfg.obs_noise_sigma`.
pub fn rollout(
    controller: &mut dyn Controller,
    cfg: &EnvConfig,
    start: EnvState,
    exec_horizon: usize,
    max_ticks: u64,
    rng: &mut Rng,
) -> Result<Episode> {
    let mut rec = Recorder::new(&start);
    let mut s = start;
    let mut queue: std::collections::VecDeque<Vec<f64>> = Default::default();
    let id = rng.next_u64();
    while !s.is_complete(cfg) && s.t - start.t < max_ticks {
        if queue.is_empty() {
            let obs = observe(&s, cfg, rng);
            let chunk = controller.chunk(&obs, cfg)?;
            queue.extend(chunk.into_actions().into_iter().take(exec_horizon.max(1)));
        }
        let a = queue.pop_front().expect("refilled above");
        let n = step(&s, &a, cfg)?;
        rec.push(&s, a, &n);
        s = n;
    }
    let len = rec.actions.len();
    Ok(rec.finish(id, Provenance::Rollout, cfg, len))
}

pub(crate) fn observe(s: &EnvState, cfg: &EnvConfig, rng: &mut Rng) -> EnvState {
    if cfg.obs_noise_sigma == 0.0 {
        return *s;
    }
    EnvState {
        p: [
            s.p[0] + rng.gaussian(cfg.obs_noise_sigma),
            s.p[1] + rng.gaussian(cfg.obs_noise_sigma),
        ],
        ..*s
    }
}

/// Standard DAgger collection: roll out `policy`; when it stalls, hand control
/// to the expert from the current state. Episodes that never stall are kept
/// with `Rollout` provenance.
pub fn dagger_dataset(
    policy: &mut dyn Controller,
    cfg: &EnvConfig,
    n_episodes: usize,
    dcfg: &DaggerConfig,
    rng: &Rng,
) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let window = dcfg.stall_window.max(1) as usize;
    (0..n_episodes)
        .map(|slot| {
            let mut r = rng.split(slot as u64);
            let mut s = reset(cfg, &mut r)?;
            let id = r.next_u64();
            let mut rec = Recorder::new(&s);
            let mut stages_hist = vec![s.g];
            let mut queue: std::collections::VecDeque<Vec<f64>> = Default::default();
            let mut corrected_at = None;
            while !s.is_complete(cfg) && s.t < cfg.horizon {
                if queue.is_empty() {
                    let obs = observe(&s, cfg, &mut r);
                    let chunk = policy.chunk(&obs, cfg)?;
                    queue.extend(chunk.into_actions().into_iter().take(dcfg.exec_horizon.max(1)));
                }
                let a = queue.pop_front().expect("refilled above");
                let n = step(&s, &a, cfg)?;
                rec.push(&s, a, &n);
                stages_hist.push(n.g);
                s = n;
                let t = rec.states.len() - 1;
                if t >= window {
                    let stuck_stage = stages_hist[t - window] == s.g;
                    let moved = dist(&rec.states[t - window], &rec.states[t]);
                    if stuck_stage && moved < cfg.r_goal / 2.0 && !s.is_complete(cfg) {
                        corrected_at = Some(rec.actions.len());
                        break;
                    }
                }
            }
            match corrected_at {
                Some(from) => {
                    let mut er = r.split_named("correction");
                    expert_continue(&mut rec, s, cfg, dcfg.expert_noise, cfg.horizon, &mut er)?;
                    Ok(rec.finish(id, Provenance::Dagger, cfg, from))
                }
                None => {
                    let len = rec.actions.len();
                    Ok(rec.finish(id, Provenance::Rollout, cfg, len))
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::ActionChunk;
    use crate::env::ScriptedExpert;

    struct Still;
    impl Controller for Still {
        fn chunk(&mut self, obs: &EnvState, _: &EnvConfig) -> Result<ActionChunk> {
            ActionChunk::new(vec![vec![0.0, 0.0]; 50], obs.t)
        }
    }

    #[test]
    fn expert_dataset_completes_every_episode() {
        let cfg = EnvConfig::default();
        let eps = generate_expert_dataset(&cfg, 100, &Rng::new(1), &ExpertOptions::default()).unwrap();
        assert_eq!(eps.len(), 100);
        for e in &eps {
            e.validate().unwrap();
            assert!(e.is_success());
            assert_eq!(e.provenance, Provenance::Expert);
        }
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let cfg = EnvConfig::default();
        assert!(generate_expert_dataset(&cfg, 0, &Rng::new(1), &ExpertOptions::default()).is_err());
    }

    #[test]
    fn expert_succeeds_on_99_of_100_low_noise_seeds() {
        let cfg = EnvConfig::default();
        let opts = ExpertOptions {
            noise_sigma: 0.01,
            max_attempts: 1,
        };
        let ok = (0..100)
            .filter(|&seed| generate_expert_dataset(&cfg, 1, &Rng::new(seed), &opts).is_ok())
            .count();
        assert!(ok >= 99, "{ok}/100");
    }

    #[test]
    fn noisy_expert_lengths_vary_across_seeds() {
        let cfg = EnvConfig::default();
        let opts = ExpertOptions {
            noise_sigma: 0.02,
            ..Default::default()
        };
        let lens: std::collections::BTreeSet<usize> = (0..8)
            .map(|s| generate_expert_dataset(&cfg, 1, &Rng::new(s), &opts).unwrap()[0].len())
            .collect();
        assert!(lens.len() > 1);
    }

    #[test]
    fn unsolvable_configuration_is_reported() {
        let cfg = EnvConfig {
            horizon: 3,
            ..EnvConfig::default()
        };
        let err = generate_expert_dataset(&cfg, 1, &Rng::new(0), &ExpertOptions::default());
        assert!(matches!(err, Err(Error::Unsolvable(_))));
    }

    #[test]
    fn overshoot_lies_past_the_waypoint() {
        let cfg = EnvConfig::default();
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let s = sample_failure_state(FailureKind::Overshoot, &cfg, &mut rng).unwrap();
            let w = cfg.waypoint(s.g);
            let prev = cfg.waypoint(s.g - 1);
            let d = dist(&s.p, &w);
            assert!(d >= 2.0 * cfg.r_goal - 1e-12 && d <= 4.0 * cfg.r_goal + 1e-12, "{d}");
            // beyond the waypoint: farther from the previous waypoint than w is
            assert!(dist(&s.p, &prev) > dist(&w, &prev));
        }
    }

    #[test]
    fn failure_states_are_outside_reset_support() {
        let cfg = EnvConfig::default();
        let mut rng = Rng::new(6);
        for kind in FailureKind::ALL {
            for _ in 0..100 {
                let s = sample_failure_state(kind, &cfg, &mut rng).unwrap();
                assert!(s.g >= 1, "reset always starts in stage 0");
                assert!(!cfg.captures(&s.p, s.g));
            }
        }
    }

    #[test]
    fn heuristic_dagger_tags_and_completes() {
        let cfg = EnvConfig::default();
        let eps = heuristic_dagger_dataset(&cfg, 60, &FailureKind::ALL, &Rng::new(2), &ExpertOptions::default())
            .unwrap();
        assert_eq!(eps.len(), 60);
        for e in &eps {
            assert_eq!(e.provenance, Provenance::HeuristicDagger);
            assert!(e.is_success());
            e.validate().unwrap();
        }
        assert!(heuristic_dagger_dataset(&cfg, 1, &[], &Rng::new(2), &ExpertOptions::default()).is_err());
    }

    #[test]
    fn perfect_policy_needs_no_corrections() {
        let cfg = EnvConfig::default();
        let mut expert = ScriptedExpert {
            noise_sigma: 0.0,
            k: 50,
            rng: Rng::new(0),
        };
        let eps = dagger_dataset(&mut expert, &cfg, 10, &DaggerConfig::default(), &Rng::new(3)).unwrap();
        assert!(eps.iter().all(|e| e.provenance == Provenance::Rollout && e.is_success()));
    }

    #[test]
    fn still_policy_is_corrected_after_the_stall_window() {
        let cfg = EnvConfig::default();
        let d = DaggerConfig::default();
        let eps = dagger_dataset(&mut Still, &cfg, 5, &d, &Rng::new(3)).unwrap();
        for e in &eps {
            assert_eq!(e.provenance, Provenance::Dagger);
            assert_eq!(e.expert_from as u64, d.stall_window);
            assert!(e.is_success());
            assert!(e.stage_labels.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
