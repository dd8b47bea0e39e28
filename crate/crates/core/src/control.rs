//! Chunked-action execution runtime.
//!
//! A producer delivers [`ActionChunk`]s, a consumer ticks the executor once per
//! control step. The swap strategies decide how a fresh chunk replaces the
//! residual commands of the previous one.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SyncHold,
    NaiveSwitch,
    TemporalEnsemble,
    ChunkSmooth,
    PrefixFreeze,
    ChunkSmoothPlusFreeze,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::SyncHold,
        Strategy::NaiveSwitch,
        Strategy::TemporalEnsemble,
        Strategy::ChunkSmooth,
        Strategy::PrefixFreeze,
        Strategy::ChunkSmoothPlusFreeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SyncHold => "sync_hold",
            Strategy::NaiveSwitch => "naive_switch",
            Strategy::TemporalEnsemble => "temporal_ensemble",
            Strategy::ChunkSmooth => "chunk_smooth",
            Strategy::PrefixFreeze => "prefix_freeze",
            Strategy::ChunkSmoothPlusFreeze => "chunk_smooth_plus_freeze",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown control strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub d_max: usize,
    pub m_min: usize,
    pub strategy: Strategy,
    pub ensemble_decay: f64,
    /// Blend against the whole previously adopted chunk instead of its
    /// residual tail. For A/B measurement only.
    pub blend_full_old: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            d_max: 10,
            m_min: 5,
            strategy: Strategy::ChunkSmooth,
            ensemble_decay: 0.5,
            blend_full_old: false,
        }
    }
}

impl SmoothingConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_min == 0 {
            return Err(Error::Config("m_min must be at least 1".into()));
        }
        if !(self.ensemble_decay > 0.0 && self.ensemble_decay <= 1.0) {
            return Err(Error::Config("ensemble_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Residual commands plus the consumption index `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionBuffer {
    pub actions: VecDeque<Vec<f64>>,
    pub k: usize,
    /// The chunk as adopted at the last swap.
    pub adopted: Vec<Vec<f64>>,
    /// Most recently emitted action, used for hold and padding.
    pub last: Option<Vec<f64>>,
    pub dim: usize,
}

impl ExecutionBuffer {
    pub fn empty(dim: usize) -> Self {
        Self {
            actions: VecDeque::new(),
            k: 0,
            adopted: Vec::new(),
            last: None,
            dim,
        }
    }

    pub fn new(actions: Vec<Vec<f64>>, k: usize) -> Self {
        let dim = actions.first().map_or(0, Vec::len);
        Self {
            actions: actions.iter().cloned().collect(),
            k,
            adopted: actions,
            last: None,
            dim,
        }
    }

    pub fn residual(&self) -> Vec<Vec<f64>> {
        self.actions.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn adopt(&self, actions: Vec<Vec<f64>>) -> ExecutionBuffer {
        ExecutionBuffer {
            actions: actions.iter().cloned().collect(),
            k: 0,
            adopted: actions,
            last: self.last.clone(),
            dim: self.dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitSource {
    Fresh,
    Hold,
    /// Synchronous wait for inference; the robot stands still.
    Idle,
    /// No chunk has been delivered yet.
    NoChunk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Emitted {
    pub action: Vec<f64>,
    pub source: EmitSource,
}

/// Pops the front action. On underrun the last emitted action is held; before
/// any action exists a zero action is emitted and flagged.
pub fn executor_tick(buf: &mut ExecutionBuffer) -> Emitted {
    buf.k += 1;
    let (action, source) = match buf.actions.pop_front() {
        Some(a) => (a, EmitSource::Fresh),
        None => match &buf.last {
            Some(a) => (a.clone(), EmitSource::Hold),
            None => {
                return Emitted {
                    action: vec![0.0; buf.dim],
                    source: EmitSource::NoChunk,
                }
            }
        },
    };
    buf.last = Some(action.clone());
    Emitted { action, source }
}

fn mix(old: &[f64], new: &[f64], w: f64) -> Vec<f64> {
    old.iter()
        .zip(new)
        .map(|(&o, &n)| {
            if o == n {
                o
            } else {
                (w * o + (1.0 - w) * n).clamp(o.min(n), o.max(n))
            }
        })
        .collect()
}

/// Linear cross-fade from `old` into `new_rem`, padding `old` to `m_min` with
/// its last action (or `pad` when `old` is empty).
pub fn cross_fade(
    old: &[Vec<f64>],
    new_rem: &[Vec<f64>],
    m_min: usize,
    pad: Option<&[f64]>,
) -> Vec<Vec<f64>> {
    let mut o = old.to_vec();
    if o.len() < m_min {
        if let Some(fill) = o.last().cloned().or_else(|| pad.map(<[f64]>::to_vec)) {
            o.resize(m_min, fill);
        }
    }
    let l = o.len().min(new_rem.len());
    let denom = l.saturating_sub(1).max(1) as f64;
    (0..l)
        .map(|i| mix(&o[i], &new_rem[i], 1.0 - i as f64 / denom))
        .chain(new_rem[l..].iter().cloned())
        .collect()
}

fn blend_source(old: &ExecutionBuffer, cfg: &SmoothingConfig) -> Vec<Vec<f64>> {
    if cfg.blend_full_old {
        old.adopted.clone()
    } else {
        old.residual()
    }
}

/// Temporal chunk-wise smoothing.
pub fn smooth_swap(old: &ExecutionBuffer, new: &ActionChunk, cfg: &SmoothingConfig) -> Result<ExecutionBuffer> {
    let d = old.k.min(cfg.d_max);
    if d >= new.len() {
        return Ok(old.clone());
    }
    let rem = &new.actions()[d..];
    let src = blend_source(old, cfg);
    Ok(old.adopt(cross_fade(&src, rem, cfg.m_min, old.last.as_deref())))
}

/// Drops stale actions and replaces the buffer without interpolation.
pub fn naive_switch(old: &ExecutionBuffer, new: &ActionChunk, k: usize, d_max: usize) -> ExecutionBuffer {
    let d = k.min(d_max);
    if d >= new.len() {
        return old.clone();
    }
    old.adopt(new.actions()[d..].to_vec())
}

/// Overwrites the head of `new` with `prefix`.
pub fn freeze_prefix(new: &[Vec<f64>], prefix: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = new.to_vec();
    for (slot, p) in out.iter_mut().zip(prefix) {
        slot.clone_from(p);
    }
    out
}

/// Prefix freeze: after the stale drop, the first `d` commands of the new
/// chunk are replaced by the old buffer's next commands, then the chunk is
/// adopted.
pub fn prefix_freeze(old: &ExecutionBuffer, new: &ActionChunk, k: usize, d_max: usize) -> ExecutionBuffer {
    let d = k.min(d_max);
    if d >= new.len() {
        return old.clone();
    }
    let res = old.residual();
    let head = &res[..d.min(res.len())];
    old.adopt(freeze_prefix(&new.actions()[d..], head))
}

/// Freeze first, then cross-fade the frozen chunk against the residual.
pub fn smooth_plus_freeze(
    old: &ExecutionBuffer,
    new: &ActionChunk,
    cfg: &SmoothingConfig,
) -> Result<ExecutionBuffer> {
    let d = old.k.min(cfg.d_max);
    if d >= new.len() {
        return Ok(old.clone());
    }
    let res = old.residual();
    let frozen = freeze_prefix(&new.actions()[d..], &res[..d.min(res.len())]);
    let src = blend_source(old, cfg);
    Ok(old.adopt(cross_fade(&src, &frozen, cfg.m_min, old.last.as_deref())))
}

/// Applies the configured buffer strategy. Temporal ensembling is not a
/// buffer strategy and is handled by [`TemporalEnsembler`].
pub fn swap(old: &ExecutionBuffer, new: &ActionChunk, cfg: &SmoothingConfig) -> Result<ExecutionBuffer> {
    match cfg.strategy {
        Strategy::SyncHold => Ok(old.adopt(new.actions().to_vec())),
        Strategy::NaiveSwitch => Ok(naive_switch(old, new, old.k, cfg.d_max)),
        Strategy::ChunkSmooth => smooth_swap(old, new, cfg),
        Strategy::PrefixFreeze => Ok(prefix_freeze(old, new, old.k, cfg.d_max)),
        Strategy::ChunkSmoothPlusFreeze => smooth_plus_freeze(old, new, cfg),
        Strategy::TemporalEnsemble => Err(Error::Config(
            "temporal ensembling has no buffer swap".into(),
        )),
    }
}

/// Exponentially weighted average of every live chunk's prediction for `tick`.
/// Each entry is `(tick of the first action, actions)`; later entries are
/// newer. Returns `None` when no chunk covers the tick.
pub fn ensemble_action(history: &[(u64, &[Vec<f64>])], tick: u64, decay: f64) -> Option<Vec<f64>> {
    let live: Vec<&[f64]> = history
        .iter()
        .filter_map(|(start, a)| {
            let i = tick.checked_sub(*start)? as usize;
            a.get(i).map(Vec::as_slice)
        })
        .collect();
    let first = *live.first()?;
    if live.iter().all(|a| *a == first) {
        return Some(first.to_vec());
    }
    let n = live.len();
    let mut acc = vec![0.0; first.len()];
    let mut total = 0.0;
    for (i, a) in live.iter().enumerate() {
        let w = decay.powi((n - 1 - i) as i32);
        total += w;
        for (s, v) in acc.iter_mut().zip(a.iter()) {
            *s += w * v;
        }
    }
    acc.iter_mut().for_each(|s| *s /= total);
    Some(acc)
}

/// Rolling store of chunks aligned to absolute ticks.
#[derive(Clone, Debug, Default)]
pub struct TemporalEnsembler {
    chunks: Vec<(u64, Vec<Vec<f64>>)>,
}

impl TemporalEnsembler {
    pub fn push(&mut self, start: u64, chunk: &ActionChunk) {
        self.chunks.push((start, chunk.actions().to_vec()));
    }

    pub fn action_at(&mut self, tick: u64, decay: f64) -> Option<Vec<f64>> {
        self.chunks.retain(|(s, a)| s + a.len() as u64 > tick);
        let view: Vec<(u64, &[Vec<f64>])> = self.chunks.iter().map(|(s, a)| (*s, a.as_slice())).collect();
        ensemble_action(&view, tick, decay)
    }

    /// Ticks at and after `tick` covered by the newest chunk.
    pub fn remaining(&self, tick: u64) -> usize {
        self.chunks
            .last()
            .map_or(0, |(s, a)| (s + a.len() as u64).saturating_sub(tick) as usize)
    }
}

/// One row of the per-tick execution trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: u64,
    pub action: Vec<f64>,
    pub buffer_len: usize,
    pub k: usize,
    pub swapped: bool,
    pub source: EmitSource,
}

/// Executor state machine driving one strategy.
#[derive(Clone, Debug)]
pub struct Executor {
    pub cfg: SmoothingConfig,
    pub buffer: ExecutionBuffer,
    ensembler: TemporalEnsembler,
    swapped: bool,
    /// Ticks on which a planned command was executed, ascending.
    fresh_ticks: Vec<u64>,
}

impl Executor {
    pub fn new(cfg: SmoothingConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            buffer: ExecutionBuffer::empty(dim),
            ensembler: TemporalEnsembler::default(),
            swapped: false,
            fresh_ticks: Vec::new(),
        })
    }

    /// Commands executed from planned chunks during `[from, now)`.
    pub fn consumed_since(&self, from: u64, now: u64) -> usize {
        let lo = self.fresh_ticks.partition_point(|&t| t < from);
        let hi = self.fresh_ticks.partition_point(|&t| t < now);
        hi - lo
    }

    /// Delivers a chunk computed from the observation at
    /// `chunk.produced_at_tick()`. The consumption index is the number of
    /// planned commands executed since then; idle and held ticks do not count,
    /// because the robot did not advance along any plan during them.
    pub fn deliver(&mut self, chunk: &ActionChunk, now: u64) -> Result<()> {
        let stale = self.consumed_since(chunk.produced_at_tick(), now);
        if self.cfg.strategy == Strategy::TemporalEnsemble {
            self.ensembler.push(now - stale as u64, chunk);
        } else {
            self.buffer.k = stale;
            self.buffer = swap(&self.buffer, chunk, &self.cfg)?;
        }
        self.swapped = true;
        Ok(())
    }

    pub fn tick(&mut self, now: u64) -> TraceRow {
        let emitted = match self.cfg.strategy {
            Strategy::TemporalEnsemble => {
                self.buffer.k += 1;
                match self.ensembler.action_at(now, self.cfg.ensemble_decay) {
                    Some(a) => {
                        self.buffer.last = Some(a.clone());
                        Emitted {
                            action: a,
                            source: EmitSource::Fresh,
                        }
                    }
                    None => {
                        self.buffer.k -= 1;
                        executor_tick(&mut self.buffer)
                    }
                }
            }
            Strategy::SyncHold if self.buffer.is_empty() => {
                self.buffer.k += 1;
                let action = vec![0.0; self.buffer.dim];
                let source = if self.buffer.last.is_some() {
                    EmitSource::Idle
                } else {
                    EmitSource::NoChunk
                };
                Emitted { action, source }
            }
            _ => executor_tick(&mut self.buffer),
        };
        if emitted.source == EmitSource::Fresh {
            self.fresh_ticks.push(now);
        }
        let row = TraceRow {
            tick: now,
            action: emitted.action,
            buffer_len: self.residual(now + 1),
            k: self.buffer.k,
            swapped: self.swapped,
            source: emitted.source,
        };
        self.swapped = false;
        row
    }

    /// Fresh commands available from tick `next` on.
    pub fn residual(&self, next: u64) -> usize {
        match self.cfg.strategy {
            Strategy::TemporalEnsemble => self.ensembler.remaining(next),
            _ => self.buffer.len(),
        }
    }

    /// Whether a new inference request should be issued.
    pub fn wants_request(&self, next: u64, threshold: usize) -> bool {
        match self.cfg.strategy {
            Strategy::SyncHold => self.buffer.is_empty(),
            _ => self.residual(next) < threshold.max(1),
        }
    }
}

/// Mean squared action difference over the `window` ticks starting at each
/// swap tick. `None` when no difference falls inside any window.
pub fn boundary_jerk(actions: &[Vec<f64>], swap_ticks: &[usize], window: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut seen = vec![false; actions.len()];
    for &s in swap_ticks {
        for t in s.max(1)..(s + window).min(actions.len()) {
            if std::mem::replace(&mut seen[t], true) {
                continue;
            }
            total += actions[t]
                .iter()
                .zip(&actions[t - 1])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}
