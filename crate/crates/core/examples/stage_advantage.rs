//! Stage-conditioned progress estimation on the looped waypoint course.
//! Compares per-frame stability against the value-difference baseline and
//! writes one cumulative-value trace as CSV.

use kai0::advantage::{fit_estimator, trace_csv, AdvantageConfig, AdvantageVariant};
use kai0::env::generate_expert_dataset;
use kai0::harness::pipeline::{Protocol, SeedContext};
use kai0::{Result, Rng};

fn main() -> Result<()> {
    let mut p = Protocol::default();
    p.stability.n_train = 15;
    p.advantage.estimator.train.steps = 1500;
    for seed in 0..2 {
        for (v, s) in SeedContext::new(&p, seed).stability()? {
            println!("seed {seed} {:<13} mstd {:.2e} sfr {:.3}", v.name(), s.mstd, s.sfr);
        }
    }

    let eps = generate_expert_dataset(&p.env, 15, &Rng::new(9), &p.expert)?;
    let cfg = AdvantageConfig {
        weight_span: 1,
        ..p.advantage.estimator.clone()
    };
    let est = fit_estimator(AdvantageVariant::DirectStage, &eps, &cfg, &mut Rng::new(10))?.expect("estimator");
    let csv = trace_csv(&est.series(&eps[0])?);
    let path = std::env::temp_dir().join("kai0_stage_advantage_trace.csv");
    std::fs::write(&path, &csv).expect("write trace");
    let last = csv.lines().last().unwrap_or_default();
    println!("trace of {} frames -> {} (last row {last})", eps[0].len(), path.display());
    Ok(())
}
