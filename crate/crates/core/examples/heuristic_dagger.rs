//! Recovery data from designed failure states versus plain demonstrations,
//! DAgger, and mirror/frame-skip augmentation.

use kai0::control::Strategy;
use kai0::env::{heuristic_dagger_dataset, sample_failure_state, EnvConfig, ExpertOptions, FailureKind};
use kai0::harness::pipeline::{DataVariant, Protocol, SeedContext};
use kai0::{Result, Rng};

fn main() -> Result<()> {
    let cfg = EnvConfig::default();
    let mut rng = Rng::new(4);
    for kind in FailureKind::ALL {
        let s = sample_failure_state(kind, &cfg, &mut rng)?;
        println!("{kind:?}: p=({:.3}, {:.3}) stage {}", s.p[0], s.p[1], s.g);
    }
    let rec = heuristic_dagger_dataset(&cfg, 10, &FailureKind::ALL, &Rng::new(5), &ExpertOptions::default())?;
    let steps: usize = rec.iter().map(|e| e.len()).sum();
    println!("{} recovery episodes, {steps} labelled steps", rec.len());

    let mut p = Protocol::default();
    p.eval_episodes = 20;
    let sim = p.sim_with(Strategy::ChunkSmooth, 20);
    let mut ctx = SeedContext::new(&p, 0);
    for v in DataVariant::ALL {
        let net = ctx.data_policy(v)?;
        let m = p.evaluate_policy(&net, &sim, 0)?;
        println!("{:<17} sr {:.2} retry {:.2} tp {:.2}", v.name(), m.sr, m.retry_cost, m.tp);
    }
    Ok(())
}
