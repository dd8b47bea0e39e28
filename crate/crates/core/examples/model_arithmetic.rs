//! Weight-space merging of policies fine-tuned on disjoint expert subsets.
//! Prints each strategy's coefficients, its validation loss on both splits,
//! and closed-loop success.

use kai0::control::Strategy;
use kai0::harness::pipeline::{Protocol, SeedContext};
use kai0::merge::{MergeStrategy, ValSplit};
use kai0::policy::{validation_loss, PolicyNet};
use kai0::Result;

fn main() -> Result<()> {
    let mut p = Protocol::default();
    // Smaller than the experiment protocol so this finishes in seconds.
    p.ma.n_expert = 44;
    p.ma.n_ood = 10;
    p.ma.finetune_steps = 800;
    p.train.steps = 3000;
    p.train.cosine_decay_steps = 3000;
    p.eval_episodes = 10;
    let sim = p.sim_with(Strategy::ChunkSmooth, 20);
    let mut ctx = SeedContext::new(&p, 3);
    for split in [ValSplit::InDomain, ValSplit::Ood] {
        for name in MergeStrategy::ALL.iter().map(|s| s.name()).chain(["single_best", "full_data"]) {
            let (theta, report) = ctx.ma_candidate(name, split)?;
            let art = ctx.ma_artifacts()?;
            let l_in = validation_loss(&theta, &p.policy, &art.in_domain_val)?;
            let l_ood = validation_loss(&theta, &p.policy, &art.ood_val)?;
            let net = PolicyNet::from_params(&p.policy, theta)?;
            let m = p.evaluate_policy(&net, &sim, 3)?;
            let alphas = report
                .filter(|_| name != "single_best")
                .map(|r| r.alphas.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            println!(
                "{split:>3} {name:<12} alphas [{alphas:<19}] val_in {l_in:.5} val_ood {l_ood:.5} sr {:.2}",
                m.sr
            );
        }
    }
    Ok(())
}
