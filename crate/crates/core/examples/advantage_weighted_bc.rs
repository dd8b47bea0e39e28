//! Behavior cloning on a mixed expert/poor-operator dataset, with and without
//! advantage-indicator sample weights.

use kai0::advantage::AdvantageVariant;
use kai0::control::Strategy;
use kai0::harness::pipeline::{Protocol, SeedContext};
use kai0::{Result, Rng};

fn main() -> Result<()> {
    let mut p = Protocol::default();
    p.train.steps = 3000;
    p.train.cosine_decay_steps = 3000;
    p.eval_episodes = 20;
    let mut ctx = SeedContext::new(&p, 1);
    let data = ctx.advantage_data()?;
    let n_bad = (p.advantage.n_episodes as f64 * p.advantage.degraded_fraction).round() as usize;
    println!(
        "{} episodes ({} expert, {n_bad} degraded)",
        data.len(),
        data.len() - n_bad
    );
    let good_steps: usize = data[..data.len() - n_bad].iter().map(|e| e.len()).sum();
    let sim = ctx.advantage_sim(Strategy::ChunkSmooth, 20);
    for v in AdvantageVariant::ALL {
        if let Some(w) = p.advantage_weights(v, &data, &mut Rng::new(11))? {
            let pos_good = w[..good_steps].iter().filter(|&&x| x == 1.0).count() as f64 / good_steps as f64;
            let pos_bad = w[good_steps..].iter().filter(|&&x| x == 1.0).count() as f64 / (w.len() - good_steps) as f64;
            print!("{:<13} positive share: expert {pos_good:.2} degraded {pos_bad:.2}; ", v.name());
        } else {
            print!("{:<13} unweighted; ", v.name());
        }
        let m = p.evaluate_policy(&ctx.advantage_policy(v)?, &sim, 1)?;
        println!("sr {:.2} tp {:.2}", m.sr, m.tp);
    }
    Ok(())
}
