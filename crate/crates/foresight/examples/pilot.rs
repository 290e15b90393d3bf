//! Scratch pilot runs used to choose thresholds and hyperparameters.
//! Usage: cargo run --example pilot -- <ff|rec|planner> [transitions]

use foresight::agents::{
    evaluate_solve_rate, train_actor_critic, PlannerConfig, Policy, PolicyKind, TrainConfig,
};
use foresight::gridworld::{EnvConfig, GenConfig};
use foresight::world_model::oracle_model;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("ff");
    let transitions: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300_000);
    let env = EnvConfig::default();
    let gen = GenConfig::default();
    let t0 = std::time::Instant::now();
    match mode {
        "planner" => {
            let model = oracle_model(env).unwrap();
            let policy = Policy::MctsPlanner(PlannerConfig::default());
            let sr = evaluate_solve_rate(&policy, Some(&model), &env, &gen, 200, 1_000_000, 7).unwrap();
            println!("planner(oracle) solve_rate={sr:.3} elapsed={:?}", t0.elapsed());
        }
        kind => {
            let pk = match kind {
                "rec" | "rec-easy" => PolicyKind::Recurrent,
                _ => PolicyKind::Feedforward,
            };
            let gen = if kind.contains("easy") {
                GenConfig { min_pulls: 1, max_pulls: 2, max_walls: 0, ..gen }
            } else {
                gen
            };
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let n_step: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5);
            let num_envs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(16);
            let entropy: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.01);
            let cfg = TrainConfig {
                transitions,
                learning_rate: lr,
                n_step,
                num_envs,
                entropy_weight: entropy,
                ..TrainConfig::default()
            };
            let (policy, log) = train_actor_critic(&env, &gen, pk, &cfg, 0).unwrap();
            for w in &log.windows {
                println!(
                    "t={} episodes={} solve={:.3} ret={:.2}",
                    w.transitions_seen, w.episodes, w.solve_rate, w.mean_return
                );
            }
            let sr = evaluate_solve_rate(&policy, None, &env, &gen, 200, 1_000_000, 7).unwrap();
            println!("{kind} lr={lr} solve_rate={sr:.3} elapsed={:?}", t0.elapsed());
        }
    }
}
