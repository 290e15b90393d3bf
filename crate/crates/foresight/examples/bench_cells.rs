//! Rough timings for the expensive experiment stages: world-model training,
//! planner dataset collection, and predictor training. Used to size budgets.

use std::time::Instant;

use foresight::agents::{PlannerConfig, Policy, PolicyKind, TrainConfig};
use foresight::datagen::{collect, collect_transitions, split, AuxMode, SplitSizes};
use foresight::gridworld::{EnvConfig, GenConfig};
use foresight::predictor::{evaluate, train_predictor, PredictorConfig, Task};
use foresight::world_model::{train_model, Capacity, ModelConfig};

fn main() {
    let env = EnvConfig::default();
    let gen = GenConfig::default();

    let t = Instant::now();
    let cfg = TrainConfig { transitions: 1_000_000, ..TrainConfig::default() };
    let (ff, _) = foresight::agents::train_actor_critic(&env, &gen, PolicyKind::Feedforward, &cfg, 0).unwrap();
    eprintln!("ff 1M: {:.1?}", t.elapsed());

    let t = Instant::now();
    let replay = collect_transitions(&ff, None, &env, &gen, 20_000, 101).unwrap();
    eprintln!("replay 20k: {:.1?}", t.elapsed());

    let t = Instant::now();
    let mcfg = ModelConfig { epochs: 20, ..ModelConfig::with_capacity(Capacity::Default) };
    let model = train_model(&replay, &mcfg, env.step_limit, 0).unwrap();
    eprintln!("model 20 epochs: {:.1?}", t.elapsed());

    let planner = Policy::MctsPlanner(PlannerConfig::default());
    let t = Instant::now();
    let ds = collect(&planner, Some(&model), &env, &gen, 500, AuxMode::InnerPlan { top_k: 1 }, 7).unwrap();
    eprintln!("planner collect 500 (budget 100): {:.1?} ({} records)", t.elapsed(), ds.records.len());

    let small = Policy::MctsPlanner(PlannerConfig { budget: 32, ..PlannerConfig::default() });
    let t = Instant::now();
    let ds = collect(&small, Some(&model), &env, &gen, 500, AuxMode::InnerPlan { top_k: 1 }, 7).unwrap();
    eprintln!("planner collect 500 (budget 32): {:.1?} ({} records)", t.elapsed(), ds.records.len());

    let t = Instant::now();
    let _ = collect(&ff, Some(&model), &env, &gen, 2_000, AuxMode::Simulation, 7).unwrap();
    eprintln!("ff sim collect 2000: {:.1?}", t.elapsed());

    let t = Instant::now();
    let big = collect(&ff, Some(&model), &env, &gen, 12_000, AuxMode::Simulation, 7).unwrap();
    let sp = split(&big, &SplitSizes { train_sizes: vec![5_000], val: 1_500, test: 1_500 }, 0).unwrap();
    eprintln!("ff sim collect 12k + split: {:.1?}", t.elapsed());

    let t = Instant::now();
    let mut pcfg = PredictorConfig::new(Task::Action, AuxMode::Simulation, 0);
    pcfg.max_epochs = 40;
    let (p, log) = train_predictor(&sp.train[0], &sp.val, &pcfg).unwrap();
    let m = evaluate(&p, &sp.test).unwrap();
    eprintln!(
        "predictor 5k sim action: {:.1?} ({} epochs, exact_match {:.3}, per_step {:?})",
        t.elapsed(),
        log.epochs.len(),
        m.exact_match,
        m.per_step.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
}
