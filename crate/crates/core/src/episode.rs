//! Episodes and their JSONL persistence.
//!
//! One file holds one episode: a header record, one record per executed step
//! (`{t, state, action, stage}`), and a closing record carrying the final
//! state (`{t, state}`). Reals are written in shortest round-trip form, so a
//! write/read cycle reproduces every value exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Expert,
    Dagger,
    HeuristicDagger,
    Augmented,
    Rollout,
}

/// A time-indexed trajectory: `states[t]` is observed before `actions[t]` is
/// applied, so there is always one more state than actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Stage of `states[t]` for every step `t < actions.len()`.
    pub stage_labels: Vec<usize>,
    /// Tick of every state.
    pub timestamps: Vec<u64>,
    pub provenance: Provenance,
    pub env: EnvConfig,
    /// First step whose action came from the expert. Steps before it are
    /// policy rollout (DAgger prefixes); `actions.len()` means none.
    pub expert_from: usize,
    /// Steps whose action was produced by merging dropped frames and had to be
    /// clipped.
    pub flagged: Vec<usize>,
}

impl Episode {
    /// Builds an episode from a position path: actions are the displacements
    /// and stages follow the capture rule along the path.
    pub fn from_path(id: u64, path: &[[f64; 2]], env: &EnvConfig, provenance: Provenance) -> Result<Self> {
        if path.len() < 2 {
            return Err(Error::InvalidEpisode("a path needs at least two positions".into()));
        }
        let mut g = 0usize;
        let mut labels = Vec::with_capacity(path.len() - 1);
        for p in &path[..path.len() - 1] {
            if g + 1 < env.stages() && env.captures(p, g) {
                g += 1;
            }
            labels.push(g);
        }
        let e = Episode {
            id,
            states: path.iter().map(|p| p.to_vec()).collect(),
            actions: path.windows(2).map(|w| vec![w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect(),
            stage_labels: labels,
            timestamps: (0..path.len() as u64).collect(),
            provenance,
            env: env.clone(),
            expert_from: 0,
            flagged: Vec::new(),
        };
        e.validate()?;
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn stages(&self) -> usize {
        self.env.stages()
    }

    /// Stage reached after the last step, recomputed from the final state.
    pub fn final_stage(&self) -> usize {
        let last = self.stage_labels.last().copied().unwrap_or(0);
        let p = self.states.last().expect("episodes have at least one state");
        if last < self.stages() && self.env.captures(p, last) {
            last + 1
        } else {
            last
        }
    }

    pub fn is_success(&self) -> bool {
        self.final_stage() == self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(Error::InvalidEpisode(format!(
                "{} states for {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if self.stage_labels.len() != self.actions.len() {
            return Err(Error::InvalidEpisode(format!(
                "{} stage labels for {} actions",
                self.stage_labels.len(),
                self.actions.len()
            )));
        }
        if self.timestamps.len() != self.states.len() {
            return Err(Error::InvalidEpisode(format!(
                "{} timestamps for {} states",
                self.timestamps.len(),
                self.states.len()
            )));
        }
        let s = self.stages();
        for &g in &self.stage_labels {
            if g >= s {
                return Err(Error::StageOutOfRange { label: g, stages: s });
            }
        }
        if self.stage_labels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::NonMonotoneStages);
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotoneTimestamps);
        }
        let sd = self.states[0].len();
        if let Some(bad) = self.states.iter().find(|x| x.len() != sd) {
            return Err(Error::Dimension {
                expected: sd,
                got: bad.len(),
            });
        }
        if let Some(a0) = self.actions.first() {
            let ad = a0.len();
            if let Some(bad) = self.actions.iter().find(|a| a.len() != ad) {
                return Err(Error::Dimension {
                    expected: ad,
                    got: bad.len(),
                });
            }
        }
        let finite = self
            .states
            .iter()
            .chain(&self.actions)
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidEpisode("non-finite value".into()));
        }
        if self.expert_from > self.actions.len() {
            return Err(Error::InvalidEpisode("expert_from past the end".into()));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        let header = Header {
            kind: "header".into(),
            id: self.id,
            provenance: self.provenance,
            stages: self.stages(),
            env_params: self.env.clone(),
            expert_from: self.expert_from,
            flagged: self.flagged.clone(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for t in 0..self.actions.len() {
            let rec = StepRecord {
                t: self.timestamps[t],
                state: self.states[t].clone(),
                action: Some(self.actions[t].clone()),
                stage: Some(self.stage_labels[t]),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        let last = StepRecord {
            t: *self.timestamps.last().expect("validated"),
            state: self.states.last().expect("validated").clone(),
            action: None,
            stage: None,
        };
        out.push_str(&serde_json::to_string(&last)?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Episode> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_owned())))
    }

    fn from_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Episode> {
        let mut header: Option<Header> = None;
        let mut steps: Vec<StepRecord> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if header.is_none() {
                let h: Header =
                    serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                        line: lineno,
                        reason: e.to_string(),
                    })?;
                if h.kind != "header" {
                    return Err(Error::MalformedLine {
                        line: lineno,
                        reason: format!("expected header, found kind {:?}", h.kind),
                    });
                }
                if h.stages != h.env_params.stages() {
                    return Err(Error::MalformedLine {
                        line: lineno,
                        reason: format!(
                            "S = {} disagrees with {} waypoints",
                            h.stages,
                            h.env_params.stages()
                        ),
                    });
                }
                header = Some(h);
                continue;
            }
            let rec: StepRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                    line: lineno,
                    reason: e.to_string(),
                })?;
            if let Some(prev) = steps.last() {
                if prev.action.is_none() {
                    return Err(Error::MalformedLine {
                        line: lineno,
                        reason: "record after the final state".into(),
                    });
                }
            }
            if rec.action.is_some() != rec.stage.is_some() {
                return Err(Error::MalformedLine {
                    line: lineno,
                    reason: "action and stage must appear together".into(),
                });
            }
            steps.push(rec);
        }
        let header = header.ok_or(Error::MalformedLine {
            line: 1,
            reason: "missing header".into(),
        })?;
        match steps.last() {
            Some(last) if last.action.is_none() => {}
            _ => {
                return Err(Error::MalformedLine {
                    line: steps.len() + 1,
                    reason: "missing final state record".into(),
                })
            }
        }
        let mut ep = Episode {
            id: header.id,
            states: Vec::with_capacity(steps.len()),
            actions: Vec::with_capacity(steps.len()),
            stage_labels: Vec::with_capacity(steps.len()),
            timestamps: Vec::with_capacity(steps.len()),
            provenance: header.provenance,
            env: header.env_params,
            expert_from: header.expert_from,
            flagged: header.flagged,
        };
        for rec in steps {
            ep.states.push(rec.state);
            ep.timestamps.push(rec.t);
            if let (Some(a), Some(g)) = (rec.action, rec.stage) {
                ep.actions.push(a);
                ep.stage_labels.push(g);
            }
        }
        ep.validate()?;
        Ok(ep)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex_digest(self.to_jsonl()?.as_bytes()))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    id: u64,
    provenance: Provenance,
    #[serde(rename = "S")]
    stages: usize,
    env_params: EnvConfig,
    #[serde(default)]
    expert_from: usize,
    #[serde(default)]
    flagged: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    t: u64,
    state: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage: Option<usize>,
}

pub fn write_episode(e: &Episode, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = e.to_jsonl()?;
    let f = fs::File::create(path).map_err(|err| Error::io(path, err))?;
    let mut w = BufWriter::new(f);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|err| Error::io(path, err))
}

pub fn read_episode(path: impl AsRef<Path>) -> Result<Episode> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|err| Error::io(path, err))?;
    let owned = path.to_path_buf();
    Episode::from_lines(
        BufReader::new(f)
            .lines()
            .map(move |l| l.map_err(|e| Error::io(owned.clone(), e))),
    )
}

fn episode_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("episode_{index:05}.jsonl"))
}

/// Writes one file per episode into `dir`, creating it if needed.
pub fn write_dataset(episodes: &[Episode], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, e) in episodes.iter().enumerate() {
        write_episode(e, episode_file(dir, i))?;
    }
    Ok(())
}

/// Reads every `*.jsonl` file of `dir` in file-name order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    files.iter().map(read_episode).collect()
}
