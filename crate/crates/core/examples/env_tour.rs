//! The waypoint course: reset, step, the scripted expert's chunk plans, and
//! episode round trips through JSONL.

use kai0::env::{expert_policy, generate_expert_dataset, reset, step, EnvConfig, ExpertOptions};
use kai0::episode::{read_episode, write_episode};
use kai0::{Result, Rng};

fn main() -> Result<()> {
    let cfg = EnvConfig::default();
    let mut rng = Rng::new(1);
    let mut s = reset(&cfg, &mut rng)?;
    println!("start p=({:.3}, {:.3}) stage {}/{}", s.p[0], s.p[1], s.g, cfg.stages());

    // Execute whole expert chunks open loop until every waypoint is captured.
    while !s.is_complete(&cfg) && s.t < cfg.horizon {
        let chunk = expert_policy(&s, &cfg, &mut rng, 0.0, 50)?;
        for a in chunk.actions() {
            let next = step(&s, a, &cfg)?;
            if next.g != s.g {
                println!("t={:>3} captured waypoint {} at ({:.3}, {:.3})", next.t, s.g, next.p[0], next.p[1]);
            }
            s = next;
            if s.is_complete(&cfg) {
                break;
            }
        }
    }

    let eps = generate_expert_dataset(&cfg, 3, &Rng::new(2), &ExpertOptions::default())?;
    for e in &eps {
        println!("episode {:016x}: {} steps, success {}", e.id, e.len(), e.is_success());
    }
    let path = std::env::temp_dir().join("kai0_env_tour.jsonl");
    write_episode(&eps[0], &path)?;
    let back = read_episode(&path)?;
    println!("round trip through {} identical: {}", path.display(), back == eps[0]);
    Ok(())
}
