//! The scripted expert under inference latency, for every execution
//! strategy: success, episode length and jerk around chunk boundaries.

use kai0::control::Strategy;
use kai0::env::ScriptedExpert;
use kai0::harness::pipeline::Protocol;
use kai0::harness::{compute_metrics, evaluate};
use kai0::{Result, Rng};

fn main() -> Result<()> {
    let p = Protocol::default();
    println!("{:<26} {:>4} {:>5} {:>6} {:>10}", "strategy", "lat", "sr", "ticks", "jerk");
    for latency in [0, 20, 40] {
        for s in Strategy::ALL {
            let sim = p.sim_with(s, latency);
            let mut expert = ScriptedExpert {
                noise_sigma: 0.004,
                k: p.policy.k,
                rng: Rng::new(1),
            };
            let runs = evaluate(&sim, &mut expert, 10, &Rng::new(2))?;
            let m = compute_metrics(&runs.into_iter().map(|r| r.metrics).collect::<Vec<_>>(), sim.control_hz)?;
            println!(
                "{:<26} {:>4} {:>5.2} {:>6.0} {:>10.2e}",
                s.name(),
                latency,
                m.sr,
                m.mean_ticks,
                m.boundary_jerk.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
