//! Auxiliary information for predictors: inner-state extraction (search
//! rollouts, hidden vectors) and simulation-based rollouts, plus the exact
//! enumeration oracle for future action/event distributions.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::{
    act_greedy, extract_hidden, rollout_from, AgentError, HiddenSelection, InnerTrace,
    PlanRollout, Policy, PolicyState, RolloutOrigin, RolloutStep,
};
use crate::gridworld::{
    observe, step_executed, Action, EnvConfig, EnvState, EnvVariant, ExecutedAction, Observation,
    ALL_ACTIONS,
};
use crate::world_model::WorldModel;

#[derive(Debug, Error)]
pub enum AuxError {
    #[error("inner-state config incompatible with trace kind")]
    IncompatibleConfig,
    #[error("simulation-based aux is not defined for explicit planners")]
    PlannerNotSimulatable,
    #[error("enumeration does not support the pomdp variant")]
    PomdpNotEnumerable,
    #[error("enumeration requires a feedforward or recurrent policy")]
    PlannerNotEnumerable,
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// What extract_inner should pull from a trace.
#[derive(Clone, Copy, Debug)]
pub enum InnerConfig {
    /// Top-k root-visit-ranked rollouts from a search tree (k ∈ {1, 3}).
    TopKRollouts(usize),
    /// Hidden-vector selection for recurrent/feedforward traces.
    Hidden(HiddenSelection),
}

/// Auxiliary information I_t available before the next real observation.
#[derive(Clone, Debug)]
pub enum AuxInfo {
    None,
    /// Search rollouts ranked by root visit count; may fall short of the
    /// requested k when fewer root children were visited.
    InnerPlan { rollouts: Vec<PlanRollout>, top_k: usize },
    InnerHidden { vectors: Vec<Vec<f64>>, selection: HiddenSelection },
    SimRollout(PlanRollout),
}

/// Root actions ranked by visit count, descending; ties to the lowest
/// action index; unvisited children excluded.
pub fn ranked_root_actions(tree: &crate::agents::SearchTree) -> Vec<Action> {
    let visits = tree.root_visits();
    let mut actions: Vec<Action> = ALL_ACTIONS.into_iter().filter(|a| visits[a.index()] > 0).collect();
    actions.sort_by(|a, b| visits[b.index()].cmp(&visits[a.index()]).then(a.index().cmp(&b.index())));
    actions
}

/// Extract inner-state auxiliary information from a trace.
pub fn extract_inner(trace: &InnerTrace, config: InnerConfig, l: usize) -> Result<AuxInfo, AuxError> {
    match (trace, config) {
        (InnerTrace::Search(tree), InnerConfig::TopKRollouts(k)) => {
            let rollouts = ranked_root_actions(tree)
                .into_iter()
                .take(k)
                .map(|a| rollout_from(tree, 0, l, Some(a)))
                .collect();
            Ok(AuxInfo::InnerPlan { rollouts, top_k: k })
        }
        (InnerTrace::Recurrent { .. } | InnerTrace::Feedforward { .. }, InnerConfig::Hidden(sel)) => {
            let vectors = extract_hidden(trace, sel).map_err(|_| AuxError::IncompatibleConfig)?;
            Ok(AuxInfo::InnerHidden { vectors, selection: sel })
        }
        _ => Err(AuxError::IncompatibleConfig),
    }
}

/// Simulate the agent inside the world model from prediction point
/// (obs_t, committed action A_t). Steps hold the observation the simulated
/// action was chosen in: step i is (decoded S_{t+i}, simulated A_{t+i},
/// predicted reward of A_{t+i}), so L steps cover the whole prediction
/// window. Truncates at the first predicted done. For recurrent policies
/// `carried` must be the agent's hidden state after acting at t.
pub fn simulate_rollout(
    model: &WorldModel,
    policy: &Policy,
    carried: &PolicyState,
    obs: &Observation,
    committed: Action,
    l: usize,
    seed: u64,
) -> Result<AuxInfo, AuxError> {
    if matches!(policy, Policy::MctsPlanner(_)) {
        return Err(AuxError::PlannerNotSimulatable);
    }
    let mut steps = Vec::with_capacity(l);
    let mut pstate = carried.clone();
    let first = model.predict(obs, committed);
    let mut cur = first.next_obs;
    let mut done = first.done;
    for i in 0..l {
        if done {
            break;
        }
        let (a, _) = act_greedy(policy, &mut pstate, &cur, None, seed.wrapping_add(i as u64))?;
        let pred = model.predict(&cur, a);
        steps.push(RolloutStep { obs: cur.clone(), action: a, reward: pred.reward });
        done = pred.done;
        cur = pred.next_obs;
    }
    Ok(AuxInfo::SimRollout(PlanRollout { steps, origin: RolloutOrigin::Simulation }))
}

/// One aggregated outcome of the exact future enumeration: the greedy
/// action sequence A_{t+1..t+L} (shorter if the episode ends early) and
/// whether the blue-tile event fires within the window.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureBranch {
    pub actions: Vec<Action>,
    pub event: bool,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct FutureDistribution {
    pub branches: Vec<FutureBranch>,
    pub event_probability: f64,
}

fn execution_branches(env: &EnvConfig, a: Action) -> Vec<(ExecutedAction, f64)> {
    match env.variant {
        EnvVariant::Default => vec![(ExecutedAction::Move(a), 1.0)],
        EnvVariant::StochasticNoop => vec![
            (ExecutedAction::Move(a), 1.0 - env.noop_prob),
            (ExecutedAction::Noop, env.noop_prob),
        ],
        EnvVariant::PomdpJitter => unreachable!("rejected before enumeration"),
    }
}

/// Exact distribution over the next-L greedy action sequence and the
/// event-within-L indicator, starting from real state `state` with the
/// already-chosen action `committed`. Exhaustively branches over the 2^L
/// executed/no-op outcomes in the stochastic variant; a point mass in the
/// deterministic variant.
pub fn enumerate_future(
    env: &EnvConfig,
    policy: &Policy,
    carried: &PolicyState,
    state: &EnvState,
    committed: Action,
    l: usize,
) -> Result<FutureDistribution, AuxError> {
    if env.variant == EnvVariant::PomdpJitter {
        return Err(AuxError::PomdpNotEnumerable);
    }
    if matches!(policy, Policy::MctsPlanner(_)) {
        return Err(AuxError::PlannerNotEnumerable);
    }
    let mut acc: HashMap<(Vec<u8>, bool), f64> = HashMap::new();
    recurse(env, policy, state, carried.clone(), committed, 1, l, 1.0, &mut Vec::new(), false, &mut acc)?;

    let total: f64 = acc.values().sum();
    assert!((total - 1.0).abs() < 1e-12, "enumeration weights sum to {total}");
    let mut branches: Vec<FutureBranch> = acc
        .into_iter()
        .map(|((bytes, event), weight)| FutureBranch {
            actions: bytes.into_iter().map(|b| Action::from_index(b as usize)).collect(),
            event,
            weight,
        })
        .collect();
    branches.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap()
            .then_with(|| a.actions.iter().map(|x| x.index()).cmp(b.actions.iter().map(|x| x.index())))
    });
    let event_probability = branches.iter().filter(|b| b.event).map(|b| b.weight).sum();
    Ok(FutureDistribution { branches, event_probability })
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    env: &EnvConfig,
    policy: &Policy,
    state: &EnvState,
    pstate: PolicyState,
    committed: Action,
    i: usize,
    l: usize,
    weight: f64,
    actions: &mut Vec<u8>,
    event: bool,
    acc: &mut HashMap<(Vec<u8>, bool), f64>,
) -> Result<(), AuxError> {
    // Observation rendering consumes no randomness outside the pomdp variant.
    let mut obs_rng = ChaCha8Rng::seed_from_u64(0);
    for (exec, w) in execution_branches(env, committed) {
        let res = step_executed(state, exec, env);
        let ev = event || res.event_flag == 1;
        let weight = weight * w;
        if res.done {
            *acc.entry((actions.clone(), ev)).or_insert(0.0) += weight;
            continue;
        }
        let obs = observe(&res.next, env, &mut obs_rng);
        let mut pstate = pstate.clone();
        let (a, _) = act_greedy(policy, &mut pstate, &obs, None, 0)?;
        actions.push(a.index() as u8);
        if i == l {
            *acc.entry((actions.clone(), ev)).or_insert(0.0) += weight;
        } else {
            recurse(env, policy, &res.next, pstate, a, i + 1, l, weight, actions, ev, acc)?;
        }
        actions.pop();
    }
    Ok(())
}

/// Monte-Carlo counterpart of [`enumerate_future`]: samples realized
/// futures with the true environment. Test oracle cross-check only.
pub fn sample_future(
    env: &EnvConfig,
    policy: &Policy,
    carried: &PolicyState,
    state: &EnvState,
    committed: Action,
    l: usize,
    samples: usize,
    seed: u64,
) -> Result<(HashMap<(Vec<u8>, bool), f64>, f64), AuxError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: HashMap<(Vec<u8>, bool), f64> = HashMap::new();
    let mut events = 0usize;
    for _ in 0..samples {
        let mut s = state.clone();
        let mut pstate = carried.clone();
        let mut a = committed;
        let mut actions = Vec::new();
        let mut ev = false;
        for i in 1..=l {
            let res = crate::gridworld::step(&s, a, env, &mut rng);
            ev = ev || res.event_flag == 1;
            if res.done {
                break;
            }
            let obs = observe(&res.next, env, &mut rng);
            s = res.next;
            let (next_a, _) = act_greedy(policy, &mut pstate, &obs, None, 0)?;
            actions.push(next_a.index() as u8);
            a = next_a;
            if i == l {
                break;
            }
        }
        events += ev as usize;
        *acc.entry((actions, ev)).or_insert(0.0) += 1.0 / samples as f64;
    }
    Ok((acc, events as f64 / samples as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::NUM_ACTIONS;
    use crate::agents::{
        mcts_search, most_visited_rollout, train_actor_critic, Node, PlannerConfig, PolicyKind,
        SearchTree, TrainConfig,
    };
    use crate::gridworld::{generate_level, reset, step, GenConfig};
    use crate::world_model::oracle_model;
    use rand::Rng;
    use std::sync::Arc;

    fn quick_policy(kind: PolicyKind, seed: u64) -> Policy {
        let cfg = TrainConfig { transitions: 500, log_window: 500, ..TrainConfig::default() };
        train_actor_critic(&EnvConfig::default(), &GenConfig::default(), kind, &cfg, seed)
            .unwrap()
            .0
    }

    fn searched_tree(seed: u64) -> SearchTree {
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        let level = Arc::new(generate_level(seed, &GenConfig::default()).unwrap());
        let (_, obs) = reset(&level, &env, 0);
        mcts_search(&model, &obs, &PlannerConfig::default(), 0)
    }

    #[test]
    fn top_one_rollout_equals_most_visited_rollout() {
        let tree = searched_tree(3);
        let aux = extract_inner(&InnerTrace::Search(tree.clone()), InnerConfig::TopKRollouts(1), 5).unwrap();
        let expected = most_visited_rollout(&tree, 5);
        match aux {
            AuxInfo::InnerPlan { rollouts, top_k } => {
                assert_eq!(top_k, 1);
                assert_eq!(rollouts.len(), 1);
                assert_eq!(rollouts[0].steps.len(), expected.steps.len());
                for (a, b) in rollouts[0].steps.iter().zip(&expected.steps) {
                    assert_eq!(a.action, b.action);
                    assert_eq!(a.obs, b.obs);
                }
            }
            _ => panic!("wrong aux kind"),
        }
    }

    #[test]
    fn top_three_with_two_visited_children_yields_two_rollouts() {
        let mut tree = searched_tree(3);
        // Zero out visits on all but the two best root children.
        let ranked = ranked_root_actions(&tree);
        for a in ranked.iter().skip(2) {
            let c = tree.nodes[0].children[a.index()].unwrap();
            tree.nodes[c].visits = 0;
        }
        let aux = extract_inner(&InnerTrace::Search(tree), InnerConfig::TopKRollouts(3), 5).unwrap();
        match aux {
            AuxInfo::InnerPlan { rollouts, top_k } => {
                assert_eq!(top_k, 3);
                assert_eq!(rollouts.len(), 2);
            }
            _ => panic!("wrong aux kind"),
        }
    }

    #[test]
    fn ranked_actions_match_independent_sort_on_fuzzed_trees() {
        let level = Arc::new(generate_level(0, &GenConfig::default()).unwrap());
        let (_, obs) = reset(&level, &EnvConfig::default(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut root = Node {
                obs: obs.clone(),
                visits: 0,
                total_value: 0.0,
                prior: 1.0,
                reward: 0.0,
                done: false,
                depth: 0,
                value_est: 0.0,
                priors: [0.25; NUM_ACTIONS],
                children: [None; NUM_ACTIONS],
            };
            let mut nodes = vec![root.clone()];
            for a in 0..NUM_ACTIONS {
                if rng.gen_bool(0.7) {
                    let mut child = root.clone();
                    child.visits = rng.gen_range(0..8);
                    child.depth = 1;
                    nodes.push(child);
                    root.children[a] = Some(nodes.len() - 1);
                }
            }
            nodes[0] = root;
            let tree = SearchTree { nodes, budget: 100 };
            let ranked = ranked_root_actions(&tree);
            // Independent oracle: stable sort of (visits, index) pairs.
            let visits = tree.root_visits();
            let mut pairs: Vec<(u32, usize)> =
                (0..NUM_ACTIONS).filter(|&i| visits[i] > 0).map(|i| (visits[i], i)).collect();
            pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = pairs.into_iter().map(|(_, i)| i).collect();
            let got: Vec<usize> = ranked.into_iter().map(|a| a.index()).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn extract_inner_is_pure() {
        let tree = searched_tree(7);
        let trace = InnerTrace::Search(tree);
        let a = extract_inner(&trace, InnerConfig::TopKRollouts(3), 5).unwrap();
        let b = extract_inner(&trace, InnerConfig::TopKRollouts(3), 5).unwrap();
        match (a, b) {
            (AuxInfo::InnerPlan { rollouts: ra, .. }, AuxInfo::InnerPlan { rollouts: rb, .. }) => {
                assert_eq!(ra.len(), rb.len());
                for (x, y) in ra.iter().zip(&rb) {
                    assert_eq!(x.steps.len(), y.steps.len());
                    for (s, t) in x.steps.iter().zip(&y.steps) {
                        assert_eq!(s.action, t.action);
                        assert_eq!(s.obs, t.obs);
                    }
                }
            }
            _ => panic!("wrong aux kind"),
        }
    }

    #[test]
    fn hidden_config_on_search_trace_errors() {
        let tree = searched_tree(7);
        assert!(matches!(
            extract_inner(&InnerTrace::Search(tree), InnerConfig::Hidden(HiddenSelection::AllTicks), 5),
            Err(AuxError::IncompatibleConfig)
        ));
    }

    /// With the oracle model in the deterministic variant, simulated actions
    /// must equal the realized next-L actions at every prediction point.
    #[test]
    fn oracle_simulation_reproduces_realized_actions() {
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        for kind in [PolicyKind::Feedforward, PolicyKind::Recurrent] {
            let policy = quick_policy(kind, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut checked = 0;
            for seed in 100..110u64 {
                let level = Arc::new(generate_level(seed, &GenConfig::default()).unwrap());
                let (mut state, mut obs) = reset(&level, &env, 0);
                let mut pstate = policy.initial_state();
                // Realized trajectory.
                let mut traj: Vec<(Observation, Action, PolicyState)> = Vec::new();
                while !state.done {
                    let (a, _) = act_greedy(&policy, &mut pstate, &obs, None, 0).unwrap();
                    traj.push((obs.clone(), a, pstate.clone()));
                    let res = step(&state, a, &env, &mut rng);
                    obs = observe(&res.next, &env, &mut rng);
                    state = res.next;
                }
                let realized: Vec<Action> = traj.iter().map(|(_, a, _)| *a).collect();
                for (t, (o, a, carried)) in traj.iter().enumerate() {
                    let aux = simulate_rollout(&model, &policy, carried, o, *a, 5, 0).unwrap();
                    let rollout = match aux {
                        AuxInfo::SimRollout(r) => r,
                        _ => panic!("wrong aux kind"),
                    };
                    let future = &realized[(t + 1).min(realized.len())..realized.len().min(t + 1 + 5)];
                    let got: Vec<Action> = rollout.steps.iter().map(|s| s.action).collect();
                    assert_eq!(got, future, "kind {kind:?}, level {seed}, t={t}");
                    checked += 1;
                }
            }
            assert!(checked > 50, "too few prediction points exercised");
        }
    }

    #[test]
    fn simulation_refuses_planner_policies() {
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        let policy = Policy::MctsPlanner(PlannerConfig::default());
        let level = Arc::new(generate_level(0, &GenConfig::default()).unwrap());
        let (_, obs) = reset(&level, &env, 0);
        assert!(matches!(
            simulate_rollout(&model, &policy, &policy.initial_state(), &obs, Action::Up, 5, 0),
            Err(AuxError::PlannerNotSimulatable)
        ));
    }

    #[test]
    fn deterministic_enumeration_is_a_point_mass() {
        let env = EnvConfig::default();
        let policy = quick_policy(PolicyKind::Feedforward, 2);
        let level = Arc::new(generate_level(5, &GenConfig::default()).unwrap());
        let (state, obs) = reset(&level, &env, 0);
        let mut pstate = policy.initial_state();
        let (a, _) = act_greedy(&policy, &mut pstate, &obs, None, 0).unwrap();
        let dist = enumerate_future(&env, &policy, &pstate, &state, a, 5).unwrap();
        assert_eq!(dist.branches.len(), 1);
        assert!((dist.branches[0].weight - 1.0).abs() < 1e-15);
        assert!(dist.event_probability == 0.0 || dist.event_probability == 1.0);
    }

    #[test]
    fn stochastic_l1_event_probability_is_one_of_four_values() {
        let env = EnvConfig::with_variant(EnvVariant::StochasticNoop);
        let policy = quick_policy(PolicyKind::Feedforward, 2);
        let p = env.noop_prob;
        let mut seen = std::collections::HashSet::new();
        for seed in 0..30u64 {
            let level = Arc::new(generate_level(seed, &GenConfig::default()).unwrap());
            let (state, obs) = reset(&level, &env, 0);
            let mut pstate = policy.initial_state();
            let (a, _) = act_greedy(&policy, &mut pstate, &obs, None, 0).unwrap();
            let dist = enumerate_future(&env, &policy, &pstate, &state, a, 1).unwrap();
            let ep = dist.event_probability;
            let legal = [0.0, p, 1.0 - p, 1.0];
            assert!(
                legal.iter().any(|&v| (ep - v).abs() < 1e-12),
                "event probability {ep} not in {legal:?}"
            );
            seen.insert((ep * 1e6) as i64);
        }
        assert!(!seen.is_empty());
    }

    #[test]
    fn enumeration_refuses_pomdp() {
        let env = EnvConfig::with_variant(EnvVariant::PomdpJitter);
        let policy = quick_policy(PolicyKind::Feedforward, 2);
        let level = Arc::new(generate_level(0, &GenConfig::default()).unwrap());
        let (state, _) = reset(&level, &env, 0);
        assert!(matches!(
            enumerate_future(&env, &policy, &policy.initial_state(), &state, Action::Up, 5),
            Err(AuxError::PomdpNotEnumerable)
        ));
    }

    #[test]
    fn enumeration_matches_monte_carlo_within_3_sigma() {
        let env = EnvConfig::with_variant(EnvVariant::StochasticNoop);
        let policy = quick_policy(PolicyKind::Feedforward, 3);
        let samples = 20_000;
        for seed in 0..5u64 {
            let level = Arc::new(generate_level(200 + seed, &GenConfig::default()).unwrap());
            let (state, obs) = reset(&level, &env, 0);
            let mut pstate = policy.initial_state();
            let (a, _) = act_greedy(&policy, &mut pstate, &obs, None, 0).unwrap();
            let dist = enumerate_future(&env, &policy, &pstate, &state, a, 5).unwrap();
            let total: f64 = dist.branches.iter().map(|b| b.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let (_, mc_event) =
                sample_future(&env, &policy, &pstate, &state, a, 5, samples, 900 + seed).unwrap();
            let p = dist.event_probability;
            let sigma = (p * (1.0 - p) / samples as f64).sqrt().max(1e-9);
            assert!(
                (mc_event - p).abs() <= 3.0 * sigma + 1e-9,
                "level {seed}: exact {p} vs mc {mc_event} (sigma {sigma})"
            );
        }
    }
}
