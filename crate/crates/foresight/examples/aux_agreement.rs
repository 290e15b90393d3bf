//! Reports how often a dataset's auxiliary rollout actions agree with the
//! realized next-L actions, per step, plus the exact-sequence agreement.
//! This is the ceiling a pure copy strategy could reach on the action task.

use foresight::auxinfo::AuxInfo;
use foresight::datagen::{load_dataset_file, HORIZON};
use std::path::Path;

fn main() {
    for arg in std::env::args().skip(1) {
        let ds = load_dataset_file(Path::new(&arg)).unwrap();
        let mut agree = vec![0usize; HORIZON];
        let mut have = vec![0usize; HORIZON];
        let mut exact = 0usize;
        let mut n = 0usize;
        for r in ds.labeled() {
            let labels = r.labels.as_ref().unwrap();
            let steps = match &r.aux {
                AuxInfo::SimRollout(roll) => &roll.steps[..],
                // The planner rollout's first step is the committed action
                // at time t; its remaining steps line up with the labels.
                AuxInfo::InnerPlan { rollouts, .. } => &rollouts[0].steps[1..],
                _ => continue,
            };
            n += 1;
            let mut all = true;
            for j in 0..HORIZON {
                match steps.get(j) {
                    Some(s) => {
                        have[j] += 1;
                        if s.action == labels.next_actions[j] {
                            agree[j] += 1;
                        } else {
                            all = false;
                        }
                    }
                    None => all = false,
                }
            }
            exact += all as usize;
        }
        let rates: Vec<f64> = (0..HORIZON)
            .map(|j| if have[j] > 0 { agree[j] as f64 / have[j] as f64 } else { 0.0 })
            .collect();
        println!(
            "{arg}: per-step {rates:?} exact {:.4} over {n} labeled",
            exact as f64 / n.max(1) as f64
        );
    }
}
