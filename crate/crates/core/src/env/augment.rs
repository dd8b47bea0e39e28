use super::EnvConfig;
use crate::episode::{Episode, Provenance};
use crate::error::{Error, Result};
use crate::rng::Rng;

const MIRROR_ID_TAG: u64 = 0x4d49_5252_4f52_0001;

pub fn mirror_config(cfg: &EnvConfig) -> EnvConfig {
    EnvConfig {
        waypoints: cfg.waypoints.iter().map(|w| [-w[0], w[1]]).collect(),
        ..cfg.clone()
    }
}

fn mirror_vec(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    if let Some(x) = out.first_mut() {
        *x = -*x;
    }
    out
}

/// Reflects an episode through `x = 0`: states, actions and waypoints get
/// their first coordinate negated. Applying it twice restores every field but
/// the provenance.
pub fn augment_mirror(e: &Episode) -> Episode {
    Episode {
        id: e.id ^ MIRROR_ID_TAG,
        states: e.states.iter().map(|s| mirror_vec(s)).collect(),
        actions: e.actions.iter().map(|a| mirror_vec(a)).collect(),
        stage_labels: e.stage_labels.clone(),
        timestamps: e.timestamps.clone(),
        provenance: Provenance::Augmented,
        env: mirror_config(&e.env),
        expert_from: e.expert_from,
        flagged: e.flagged.clone(),
    }
}

/// Speed augmentation: every interior frame is dropped with probability
/// `skip_prob`. The action leading into a dropped frame absorbs the following
/// one, so kept states are joined by their true displacement. Frames at which
/// a stage is captured are never dropped. Merged actions larger than twice
/// `action_clip` on any axis are clipped and their step recorded in `flagged`.
pub fn augment_frameskip(e: &Episode, skip_prob: f64, rng: &mut Rng) -> Result<Episode> {
    if !(0.0..=0.5).contains(&skip_prob) {
        return Err(Error::Config(format!("skip_prob {skip_prob} outside [0, 0.5]")));
    }
    if e.len() < 3 {
        return Err(Error::InvalidEpisode(format!(
            "frame skipping needs at least 3 steps, got {}",
            e.len()
        )));
    }
    let t_end = e.len();
    let mut kept = vec![0usize];
    for t in 1..t_end {
        let stage_change = e.stage_labels[t] != e.stage_labels[t - 1];
        let drop = !stage_change && rng.bernoulli(skip_prob);
        if !drop {
            kept.push(t);
        }
    }
    kept.push(t_end);

    let limit = 2.0 * e.env.action_clip;
    let mut actions = Vec::with_capacity(kept.len() - 1);
    let mut flagged = Vec::new();
    for (i, pair) in kept.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let mut sum = e.actions[a].clone();
        for m in a + 1..b {
            for (s, x) in sum.iter_mut().zip(&e.actions[m]) {
                *s += x;
            }
        }
        if b - a > 1 && sum.iter().any(|x| x.abs() > limit) {
            for x in &mut sum {
                *x = x.clamp(-limit, limit);
            }
            flagged.push(i);
        }
        actions.push(sum);
    }
    let states: Vec<Vec<f64>> = kept.iter().map(|&t| e.states[t].clone()).collect();

    // Replay the capture rule over the kept positions.
    let mut g = e.stage_labels[0];
    let mut labels = Vec::with_capacity(actions.len());
    labels.push(g);
    for s in states.iter().take(actions.len()).skip(1) {
        if e.env.captures(s, g) {
            g += 1;
        }
        labels.push(g.min(e.stages() - 1));
    }

    let t0 = e.timestamps[0];
    let timestamps = (0..states.len() as u64).map(|i| t0 + i).collect();
    let expert_from = kept
        .iter()
        .position(|&t| t >= e.expert_from)
        .unwrap_or(actions.len())
        .min(actions.len());
    let out = Episode {
        id: e.id.rotate_left(17) ^ rng.next_u64(),
        states,
        actions,
        stage_labels: labels,
        timestamps,
        provenance: Provenance::Augmented,
        env: e.env.clone(),
        expert_from,
        flagged,
    };
    out.validate()?;
    Ok(out)
}
