//! Experiment matrix: declarative families of cells, content-addressed by a
//! canonical hash, appended to a JSONL results store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use super::pipeline::{DataVariant, Protocol, SeedContext, MA_BASELINES};
use super::MetricsReport;
use crate::advantage::AdvantageVariant;
use crate::control::Strategy;
use crate::episode::hex_digest;
use crate::error::{Error, Result};
use crate::merge::{MergeStrategy, ValSplit};
use crate::policy::PolicyNet;
use crate::rng::Rng;

/// Environment variable overriding [`MatrixConfig::seed`].
pub const SEED_ENV: &str = "KAI0_SEED";

pub const STORE_FILE: &str = "results.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    /// Merge candidates (strategies and baselines) × validation split.
    Ma {
        candidates: Vec<String>,
        splits: Vec<ValSplit>,
    },
    Advantage {
        variants: Vec<AdvantageVariant>,
    },
    Data {
        variants: Vec<DataVariant>,
    },
    Control {
        strategies: Vec<Strategy>,
        latencies: Vec<u64>,
    },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Ma { .. } => "ma",
            Family::Advantage { .. } => "advantage",
            Family::Data { .. } => "data",
            Family::Control { .. } => "control",
        }
    }

    /// Axis assignments of every cell, in declaration order.
    pub fn axes(&self) -> Vec<BTreeMap<String, String>> {
        fn one(k: &str, v: &str) -> BTreeMap<String, String> {
            BTreeMap::from([(k.to_string(), v.to_string())])
        }
        match self {
            Family::Ma { candidates, splits } => candidates
                .iter()
                .flat_map(|c| {
                    splits.iter().map(move |s| {
                        let mut m = one("candidate", c);
                        m.insert("split".into(), s.name().into());
                        m
                    })
                })
                .collect(),
            Family::Advantage { variants } => variants.iter().map(|v| one("variant", v.name())).collect(),
            Family::Data { variants } => variants.iter().map(|v| one("variant", v.name())).collect(),
            Family::Control { strategies, latencies } => strategies
                .iter()
                .flat_map(|s| {
                    latencies.iter().map(move |l| {
                        let mut m = one("strategy", s.name());
                        m.insert("latency".into(), l.to_string());
                        m
                    })
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Family::Ma { candidates, splits } => {
                if candidates.is_empty() || splits.is_empty() {
                    return Err(Error::Config("ma: candidates and splits must be nonempty".into()));
                }
                for c in candidates {
                    if !MA_BASELINES.contains(&c.as_str()) {
                        c.parse::<MergeStrategy>()
                            .map_err(|_| Error::Config(format!("ma.candidates: unknown candidate `{c}`")))?;
                    }
                }
            }
            Family::Advantage { variants } if variants.is_empty() => {
                return Err(Error::Config("advantage.variants must be nonempty".into()))
            }
            Family::Data { variants } if variants.is_empty() => {
                return Err(Error::Config("data.variants must be nonempty".into()))
            }
            Family::Control { strategies, latencies } => {
                if strategies.is_empty() || latencies.is_empty() {
                    return Err(Error::Config("control: strategies and latencies must be nonempty".into()));
                }
                if strategies.contains(&Strategy::TemporalEnsemble) {
                    return Err(Error::Config(
                        "control.strategies: temporal_ensemble has no executor buffer".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Parses JSON (by extension) or YAML; errors carry line and field.
pub fn parse_config<T: DeserializeOwned>(text: &str, ext: &str) -> Result<T> {
    if ext.eq_ignore_ascii_case("json") {
        Ok(serde_json::from_str(text)?)
    } else {
        serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    parse_config(&text, ext)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    /// Root seed; per-seed streams are split from it.
    pub seed: u64,
    pub n_seeds: usize,
    pub protocol: Protocol,
    pub families: Vec<Family>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seeds: 5,
            protocol: Protocol::default(),
            families: vec![
                Family::Ma {
                    candidates: MergeStrategy::ALL
                        .iter()
                        .map(|s| s.name().to_string())
                        .chain(MA_BASELINES.iter().map(|s| s.to_string()))
                        .collect(),
                    splits: vec![ValSplit::InDomain, ValSplit::Ood],
                },
                Family::Advantage {
                    variants: AdvantageVariant::ALL.to_vec(),
                },
                Family::Data {
                    variants: DataVariant::ALL.to_vec(),
                },
                Family::Control {
                    strategies: vec![
                        Strategy::SyncHold,
                        Strategy::NaiveSwitch,
                        Strategy::ChunkSmooth,
                        Strategy::PrefixFreeze,
                        Strategy::ChunkSmoothPlusFreeze,
                    ],
                    latencies: vec![0, 10, 20, 40],
                },
            ],
        }
    }
}

impl MatrixConfig {
    pub fn from_str_with_ext(text: &str, ext: &str) -> Result<Self> {
        let cfg: MatrixConfig = parse_config(text, ext)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file and applies the seed override from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg: MatrixConfig = load_config(path)?;
        cfg.validate()?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be positive".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("families must be nonempty".into()));
        }
        self.protocol.validate()?;
        self.families.iter().try_for_each(Family::validate)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let root = Rng::new(self.seed);
        (0..self.n_seeds as u64).map(|i| root.split(i).seed()).collect()
    }

    /// Every cell, grouped by seed so that per-seed artifacts are shared.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let protocol = serde_json::to_value(&self.protocol)?;
        let mut out = Vec::new();
        for seed in self.seeds() {
            for f in &self.families {
                for axes in f.axes() {
                    out.push(Cell {
                        family: f.name().to_string(),
                        axes,
                        seed,
                        protocol: protocol.clone(),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub family: String,
    pub axes: BTreeMap<String, String>,
    pub seed: u64,
    /// Everything that determines the outcome besides the axes.
    pub protocol: Value,
}

impl Cell {
    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(canonical_json(&serde_json::to_value(self)?).as_bytes()))
    }

    /// Seed-independent display name, e.g. `greedy@ood` or `chunk_smooth@20`.
    pub fn name(&self) -> String {
        cell_name(&self.family, &self.axes)
    }
}

pub(crate) fn cell_name(family: &str, axes: &BTreeMap<String, String>) -> String {
    let get = |k: &str| axes.get(k).map(String::as_str).unwrap_or("?");
    match family {
        "ma" => format!("{}@{}", get("candidate"), get("split")),
        "control" => format!("{}@{}", get("strategy"), get("latency")),
        _ => get("variant").to_string(),
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<&String, &Value> = m.iter().collect();
            let body: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{}", Value::String(k.clone()), canonical_json(v)))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell_hash: String,
    pub family: String,
    pub cell: String,
    pub axes: BTreeMap<String, String>,
    pub seed: u64,
    pub metrics: MetricsReport,
    /// Family-specific diagnostics such as merge reports.
    #[serde(default)]
    pub extra: Value,
}

/// Append-only JSONL store of result rows.
#[derive(Clone, Debug)]
pub struct ResultStore {
    pub path: PathBuf,
}

impl ResultStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn rows(&self) -> Result<Vec<ResultRow>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    pub fn completed(&self) -> Result<BTreeSet<String>> {
        Ok(self.rows()?.into_iter().map(|r| r.cell_hash).collect())
    }

    /// Appends one row with a single write of a full line.
    pub fn append(&self, row: &ResultRow) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut line = serde_json::to_string(row)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    /// SHA-256 of the store's bytes.
    pub fn hash(&self) -> Result<String> {
        let bytes = fs::read(&self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(hex_digest(&bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixSummary {
    pub total_cells: usize,
    pub new_rows: usize,
    pub skipped: usize,
}

/// Runs every cell not yet in `store`.
pub fn run_matrix(cfg: &MatrixConfig, store: &ResultStore) -> Result<MatrixSummary> {
    run_matrix_with(cfg, store, |_, _| {})
}

/// As [`run_matrix`], calling `progress(done, total)` after each new row.
pub fn run_matrix_with(
    cfg: &MatrixConfig,
    store: &ResultStore,
    mut progress: impl FnMut(&ResultRow, usize),
) -> Result<MatrixSummary> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    let done = store.completed()?;
    let mut summary = MatrixSummary {
        total_cells: cells.len(),
        new_rows: 0,
        skipped: 0,
    };
    let mut ctx: Option<SeedContext<'_>> = None;
    for cell in &cells {
        let hash = cell.hash()?;
        if done.contains(&hash) {
            summary.skipped += 1;
            continue;
        }
        if ctx.as_ref().map(|c| c.seed) != Some(cell.seed) {
            ctx = Some(SeedContext::new(&cfg.protocol, cell.seed));
        }
        let c = ctx.as_mut().expect("set above");
        let (metrics, extra) = run_cell(c, cell)?;
        let row = ResultRow {
            cell_hash: hash,
            family: cell.family.clone(),
            cell: cell.name(),
            axes: cell.axes.clone(),
            seed: cell.seed,
            metrics,
            extra,
        };
        store.append(&row)?;
        summary.new_rows += 1;
        progress(&row, summary.new_rows);
    }
    Ok(summary)
}

fn axis<'c, T: std::str::FromStr<Err = Error>>(cell: &'c Cell, key: &str) -> Result<T> {
    cell.axes
        .get(key)
        .ok_or_else(|| Error::Config(format!("cell {} lacks axis `{key}`", cell.name())))?
        .parse()
}

/// Evaluates a single cell within its seed's context.
pub fn run_cell(ctx: &mut SeedContext<'_>, cell: &Cell) -> Result<(MetricsReport, Value)> {
    let proto = ctx.proto;
    let default_sim = proto.sim();
    match cell.family.as_str() {
        "ma" => {
            let split: ValSplit = axis(cell, "split")?;
            let candidate = cell.axes.get("candidate").cloned().unwrap_or_default();
            let (params, report) = ctx.ma_candidate(&candidate, split)?;
            let net = PolicyNet::from_params(&proto.policy, params)?;
            let metrics = proto.evaluate_policy(&net, &default_sim, ctx.seed)?;
            let extra = match report {
                Some(r) => serde_json::to_value(r)?,
                None => Value::Null,
            };
            Ok((metrics, extra))
        }
        "advantage" => {
            let variant: AdvantageVariant = axis(cell, "variant")?;
            let net = ctx.advantage_policy(variant)?;
            let sim = ctx.advantage_sim(default_sim.smoothing.strategy, default_sim.inference_latency_ticks);
            Ok((proto.evaluate_policy(&net, &sim, ctx.seed)?, Value::Null))
        }
        "data" => {
            let variant: DataVariant = axis(cell, "variant")?;
            let net = ctx.data_policy(variant)?;
            Ok((proto.evaluate_policy(&net, &default_sim, ctx.seed)?, Value::Null))
        }
        "control" => {
            let strategy: Strategy = axis(cell, "strategy")?;
            let latency: u64 = cell.axes["latency"]
                .parse()
                .map_err(|_| Error::Config(format!("bad latency in {}", cell.name())))?;
            let net = ctx.control_policy()?;
            let sim = proto.sim_with(strategy, latency);
            let m = proto.evaluate_policy(&net, &sim, ctx.seed)?;
            Ok((m, json!({ "latency": latency })))
        }
        other => Err(Error::Config(format!("unknown family `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting() {
        let cfg = MatrixConfig {
            n_seeds: 3,
            families: vec![Family::Control {
                strategies: vec![Strategy::NaiveSwitch, Strategy::ChunkSmooth],
                latencies: vec![0, 20],
            }],
            ..MatrixConfig::default()
        };
        assert_eq!(cfg.cells().unwrap().len(), 12);
    }

    #[test]
    fn hash_ignores_field_order() {
        let a = r#"{"seed": 3, "n_seeds": 1, "families": [{"family": "data", "variants": ["base"]}]}"#;
        let b = r#"{"families": [{"variants": ["base"], "family": "data"}], "n_seeds": 1, "seed": 3}"#;
        let ca = MatrixConfig::from_str_with_ext(a, "json").unwrap().cells().unwrap();
        let cb = MatrixConfig::from_str_with_ext(b, "json").unwrap().cells().unwrap();
        assert_eq!(ca[0].hash().unwrap(), cb[0].hash().unwrap());
        let y = "families:\n  - family: data\n    variants: [base]\nseed: 3\nn_seeds: 1\n";
        let cy = MatrixConfig::from_str_with_ext(y, "yaml").unwrap().cells().unwrap();
        assert_eq!(ca[0].hash().unwrap(), cy[0].hash().unwrap());
    }

    #[test]
    fn canonical_sorts_nested_keys() {
        let v: Value = serde_json::from_str(r#"{"b": {"z": 1, "a": [2, {"d": 0, "c": 1}]}, "a": null}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":null,"b":{"a":[2,{"c":1,"d":0}],"z":1}}"#);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = MatrixConfig::from_str_with_ext("seed: 1\nn_sedes: 2\n", "yaml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_sedes") && msg.contains("line 2"), "{msg}");
        let err = MatrixConfig::from_str_with_ext("{\"seed\": 1,\n \"families\": [{\"family\": \"nope\"}]}", "json")
            .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_candidate_rejected() {
        let f = Family::Ma {
            candidates: vec!["soup".into()],
            splits: vec![ValSplit::Ood],
        };
        assert!(f.validate().is_err());
    }
}
