//! Measures how often the planner's most-visited search path at time t
//! matches its realized actions at t+1..t+L, per depth, for different
//! search budgets. Low agreement means the plan carries little signal
//! about the planner's own future behavior.

use foresight::agents::{PlannerConfig, Policy};
use foresight::auxinfo::AuxInfo;
use foresight::datagen::{collect, AuxMode, HORIZON};
use foresight::gridworld::{EnvConfig, GenConfig};
use foresight::world_model::WorldModel;

fn main() {
    let env = EnvConfig::default();
    let gen = GenConfig::default();
    let model = WorldModel::load(std::io::BufReader::new(
        std::fs::File::open("target/acceptance/v1/model-Default.json").unwrap(),
    ))
    .unwrap();
    for budget in [100usize, 400, 1600] {
        let planner = Policy::MctsPlanner(PlannerConfig { budget, ..PlannerConfig::default() });
        let ds = collect(
            &planner,
            Some(&model),
            &env,
            &gen,
            1_500,
            AuxMode::InnerPlan { top_k: 1 },
            99,
        )
        .unwrap();
        // agree[j] = P(plan step j+1 action == realized action at t+1+j)
        let mut agree = vec![0usize; HORIZON];
        let mut have = vec![0usize; HORIZON];
        let mut n = 0usize;
        for r in ds.labeled() {
            let labels = r.labels.as_ref().unwrap();
            let AuxInfo::InnerPlan { rollouts, .. } = &r.aux else { panic!() };
            let steps = &rollouts[0].steps;
            n += 1;
            for j in 0..HORIZON {
                if let Some(s) = steps.get(j + 1) {
                    have[j] += 1;
                    if s.action == labels.next_actions[j] {
                        agree[j] += 1;
                    }
                }
            }
        }
        let rates: Vec<f64> = (0..HORIZON)
            .map(|j| if have[j] > 0 { agree[j] as f64 / have[j] as f64 } else { 0.0 })
            .collect();
        let lens: Vec<f64> = (0..HORIZON).map(|j| have[j] as f64 / n as f64).collect();
        println!("budget {budget}: agreement {rates:?}");
        println!("           plan-depth coverage {lens:?} over {n} records");
    }
}
