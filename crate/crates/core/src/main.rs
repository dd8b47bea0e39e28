use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kai0::advantage::AdvantageVariant;
use kai0::control::Strategy;
use kai0::env::ScriptedExpert;
use kai0::episode::{read_dataset, write_dataset};
use kai0::harness::matrix::{load_config, run_matrix_with, MatrixConfig, ResultStore, STORE_FILE};
use kai0::harness::pipeline::{Protocol, TaskSpec};
use kai0::harness::plot::plotdata_with;
use kai0::harness::{compute_metrics, evaluate};
use kai0::merge::{merge_checkpoints, CheckpointSet, MergeStrategy, PolicyValidation, ValSplit};
use kai0::params::{load_params, save_params};
use kai0::policy::{BcDataset, PolicyNet};
use kai0::{Error, Result, Rng};

#[derive(Parser)]
#[command(name = "kai0", version, about = "Desk-scale policy merging, advantage weighting and chunked control")]
struct Cli {
    /// Run directory holding checkpoints/, episodes/, results.jsonl and plots/.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    /// Protocol file (YAML or JSON) overriding the built-in defaults.
    #[arg(long, global = true)]
    protocol: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset of episodes.
    GenData {
        #[arg(long)]
        task: Option<PathBuf>,
        /// Defaults to <run>/episodes/<kind>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Behavior cloning, optionally advantage weighted.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "none")]
        advantage: AdvantageVariant,
        /// JSON array of per-step sample weights; excludes --advantage.
        #[arg(long, conflicts_with = "advantage")]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to <run>/checkpoints/policy-<advantage>.bin.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge every checkpoint in a directory.
    Merge {
        #[arg(long)]
        ckpts: PathBuf,
        #[arg(long)]
        strategy: MergeStrategy,
        #[arg(long)]
        val: ValSplit,
        /// Validation episodes; defaults to <run>/episodes/val-<split>.
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop evaluation of a checkpoint or the scripted expert.
    Simulate {
        /// Policy checkpoint; the scripted expert when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "chunk_smooth")]
        control: Strategy,
        #[arg(long, default_value_t = 20)]
        latency: u64,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run (or resume) an experiment matrix into <run>/results.jsonl.
    Matrix {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Tidy CSV for one figure, written to <run>/plots/<figure>.csv.
    Plotdata {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        figure: String,
        /// Matrix config whose cells the figure expects; the default matrix
        /// when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn mkdirs(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn parent_dir(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => mkdirs(d),
        _ => Ok(()),
    }
}

fn protocol(cli: &Cli) -> Result<Protocol> {
    let p: Protocol = match &cli.protocol {
        Some(path) => load_config(path)?,
        None => Protocol::default(),
    };
    p.validate()?;
    Ok(p)
}

fn load_policy(p: &Protocol, path: &Path) -> Result<PolicyNet> {
    PolicyNet::from_params(&p.policy, load_params(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { task, out } => {
            let spec: TaskSpec = match task {
                Some(t) => load_config(t)?,
                None => TaskSpec::default(),
            };
            let kind = serde_json::to_value(spec.kind)?;
            let dir = out
                .clone()
                .unwrap_or_else(|| cli.run.join("episodes").join(kind.as_str().unwrap_or("data")));
            let eps = spec.generate()?;
            write_dataset(&eps, &dir)?;
            println!("wrote {} episodes to {}", eps.len(), dir.display());
        }
        Cmd::Train {
            data,
            advantage,
            weights,
            seed,
            out,
        } => {
            let p = protocol(&cli)?;
            let eps = read_dataset(data)?;
            let w = match weights {
                Some(f) => {
                    let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                    Some(serde_json::from_str::<Vec<f64>>(&text)?)
                }
                None => p.advantage_weights(*advantage, &eps, &mut Rng::new(*seed).split_named("estimator"))?,
            };
            let net = p.train_bc(&eps, w.as_deref(), *seed)?;
            let path = out
                .clone()
                .unwrap_or_else(|| cli.run.join("checkpoints").join(format!("policy-{}.bin", advantage.name())));
            parent_dir(&path)?;
            save_params(&net.params, &path)?;
            println!("trained on {} episodes -> {}", eps.len(), path.display());
        }
        Cmd::Merge {
            ckpts,
            strategy,
            val,
            val_data,
            out,
        } => {
            let p = protocol(&cli)?;
            let mut files: Vec<PathBuf> = fs::read_dir(ckpts)
                .map_err(|e| Error::io(ckpts, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "bin"))
                .collect();
            files.sort();
            let params = files.iter().map(load_params).collect::<Result<Vec<_>>>()?;
            let labels = files
                .iter()
                .map(|f| f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
                .collect();
            let cs = CheckpointSet::new(params, labels)?;
            let vdir = val_data
                .clone()
                .unwrap_or_else(|| cli.run.join("episodes").join(format!("val-{val}")));
            let data = BcDataset::from_episodes(&read_dataset(&vdir)?, &p.policy)?;
            let obj = PolicyValidation {
                layout: &p.policy,
                data: &data,
            };
            let (merged, report) = merge_checkpoints(&cs, *strategy, *val, &obj, &p.ma.merge, None)?;
            let path = out
                .clone()
                .unwrap_or_else(|| cli.run.join("checkpoints").join(format!("merged-{strategy}-{val}.bin")));
            parent_dir(&path)?;
            save_params(&merged, &path)?;
            println!("{}", report.to_json()?);
        }
        Cmd::Simulate {
            ckpt,
            control,
            latency,
            episodes,
            seed,
        } => {
            let p = protocol(&cli)?;
            let sim = p.sim_with(*control, *latency);
            sim.validate()?;
            let rng = Rng::new(*seed).split_named("evaluation");
            let rollouts = match ckpt {
                Some(f) => evaluate(&sim, &mut load_policy(&p, f)?, *episodes, &rng)?,
                None => {
                    let mut ex = ScriptedExpert {
                        noise_sigma: p.expert.noise_sigma,
                        k: p.policy.k,
                        rng: Rng::new(*seed).split_named("expert"),
                    };
                    evaluate(&sim, &mut ex, *episodes, &rng)?
                }
            };
            let m: Vec<_> = rollouts.into_iter().map(|r| r.metrics).collect();
            println!("{}", serde_json::to_string_pretty(&compute_metrics(&m, sim.control_hz)?)?);
        }
        Cmd::Matrix { config } => {
            let cfg = match config {
                Some(c) => MatrixConfig::load(c)?,
                None => {
                    let mut c = MatrixConfig::default();
                    c.apply_env()?;
                    c
                }
            };
            mkdirs(&cli.run)?;
            let store = ResultStore::new(cli.run.join(STORE_FILE));
            let total = cfg.cells()?.len();
            let summary = run_matrix_with(&cfg, &store, |row, done| {
                eprintln!(
                    "[{done}/{total}] {}/{} seed {} sr={:.2}",
                    row.family, row.cell, row.seed, row.metrics.sr
                );
            })?;
            println!(
                "{} cells, {} new rows, {} skipped; store hash {}",
                summary.total_cells,
                summary.new_rows,
                summary.skipped,
                store.hash()?
            );
        }
        Cmd::Plotdata { store, figure, config } => {
            let path = store.clone().unwrap_or_else(|| cli.run.join(STORE_FILE));
            let cfg = match config {
                Some(c) => MatrixConfig::load(c)?,
                None => MatrixConfig::default(),
            };
            let csv = plotdata_with(&ResultStore::new(path).rows()?, figure, &cfg)?;
            let dir = cli.run.join("plots");
            mkdirs(&dir)?;
            let out = dir.join(format!("{figure}.csv"));
            fs::write(&out, &csv).map_err(|e| Error::io(&out, e))?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
