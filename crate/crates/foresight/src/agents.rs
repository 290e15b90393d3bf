//! Three trained policies spanning the planning taxonomy: an explicit
//! planner (MCTS over a world model), an implicit planner (recurrent core
//! with internal ticks), and a non-planner (feedforward). Each exposes an
//! inner-computation trace: the full search tree, the hidden vector per
//! tick, or the activation vector per hidden layer.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{
    generate_level, observe, reset, step, Action, EnvConfig, GenConfig, GridError, Observation,
    ALL_ACTIONS, NUM_ACTIONS, NUM_PLANES,
};
use crate::nn::ops::{linear_backward, linear_forward, relu_backward, relu_forward, GruCache};
use crate::nn::params::{ParamId, ParamSet};
use crate::nn::tensor::Tensor;
use crate::nn::{softmax_rows, Adam, GruCell};
use crate::world_model::{ModelOutput, WorldModel, DISCOUNT};

pub const FF_HIDDEN: usize = 64;
pub const REC_HIDDEN: usize = 96;
pub const REC_TICKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    MctsPlanner,
    Recurrent,
    Feedforward,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub budget: usize,
    pub c_puct: f64,
    pub discount: f64,
    /// Search depth cap; matches the world model's unroll horizon.
    pub horizon: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { budget: 100, c_puct: 1.25, discount: DISCOUNT, horizon: 5 }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("training budget must be positive")]
    ZeroBudget,
    #[error("training diverged: non-finite loss after {transitions} transitions")]
    Divergence { transitions: usize },
    #[error("planner policy needs a world model")]
    MissingModel,
    #[error("cannot train policy kind {0:?} with actor-critic")]
    UntrainableKind(PolicyKind),
    #[error("hidden-state selection incompatible with trace kind")]
    IncompatibleSelection,
    #[error("level generation: {0}")]
    Gen(#[from] GridError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Search tree

/// Minimal interface MCTS needs from a model. Implemented by [`WorldModel`]
/// and by test stubs.
pub trait SearchModel {
    fn predict(&self, obs: &Observation, action: Action) -> ModelOutput;
    fn evaluate(&self, obs: &Observation) -> ([f64; NUM_ACTIONS], f64);
}

impl SearchModel for WorldModel {
    fn predict(&self, obs: &Observation, action: Action) -> ModelOutput {
        WorldModel::predict(self, obs, action)
    }
    fn evaluate(&self, obs: &Observation) -> ([f64; NUM_ACTIONS], f64) {
        WorldModel::evaluate(self, obs)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub obs: Observation,
    pub visits: u32,
    pub total_value: f64,
    /// Prior probability of the edge into this node.
    pub prior: f64,
    /// Predicted reward on the edge into this node.
    pub reward: f64,
    pub done: bool,
    pub depth: usize,
    /// Model value estimate at this node (bootstrap at the depth cap).
    pub value_est: f64,
    /// Policy prior over actions taken from this node.
    pub priors: [f64; NUM_ACTIONS],
    pub children: [Option<usize>; NUM_ACTIONS],
}

/// Arena-allocated search tree; index 0 is the root.
#[derive(Clone, Debug)]
pub struct SearchTree {
    pub nodes: Vec<Node>,
    pub budget: usize,
}

impl SearchTree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn root_visits(&self) -> [u32; NUM_ACTIONS] {
        let mut v = [0u32; NUM_ACTIONS];
        for a in ALL_ACTIONS {
            if let Some(c) = self.root().children[a.index()] {
                v[a.index()] = self.nodes[c].visits;
            }
        }
        v
    }

    /// Argmax over root child visit counts, ties to the lowest action index.
    pub fn best_action(&self) -> Action {
        let v = self.root_visits();
        let mut best = 0;
        for i in 1..NUM_ACTIONS {
            if v[i] > v[best] {
                best = i;
            }
        }
        Action::from_index(best)
    }
}

/// PUCT search. Deterministic for a deterministic model: ties break to the
/// lowest action index, so the seed only matters for stochastic models.
pub fn mcts_search<M: SearchModel>(
    model: &M,
    obs: &Observation,
    config: &PlannerConfig,
    _seed: u64,
) -> SearchTree {
    assert!(config.budget >= 1, "search budget must be at least 1");
    let (priors, value) = model.evaluate(obs);
    let mut nodes = vec![Node {
        obs: obs.clone(),
        visits: 0,
        total_value: 0.0,
        prior: 1.0,
        reward: 0.0,
        done: false,
        depth: 0,
        value_est: value,
        priors,
        children: [None; NUM_ACTIONS],
    }];

    for _ in 0..config.budget {
        // Selection: descend until a new node is created or a terminal /
        // depth-capped node is reached.
        let mut path = vec![0usize];
        let bootstrap;
        loop {
            let cur = *path.last().unwrap();
            if nodes[cur].done {
                bootstrap = 0.0;
                break;
            }
            if nodes[cur].depth >= config.horizon {
                bootstrap = nodes[cur].value_est;
                break;
            }
            let child_sum: u32 = nodes[cur]
                .children
                .iter()
                .flatten()
                .map(|&c| nodes[c].visits)
                .sum();
            let sqrt_sum = (child_sum as f64 + 1.0).sqrt();
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for a in 0..NUM_ACTIONS {
                let (q, n) = match nodes[cur].children[a] {
                    Some(c) if nodes[c].visits > 0 => {
                        (nodes[c].total_value / nodes[c].visits as f64, nodes[c].visits)
                    }
                    _ => (0.0, 0),
                };
                let u = config.c_puct * nodes[cur].priors[a] * sqrt_sum / (1.0 + n as f64);
                let score = q + u;
                if score > best_score {
                    best_score = score;
                    best = a;
                }
            }
            if let Some(c) = nodes[cur].children[best] {
                path.push(c);
                continue;
            }
            // Expansion.
            let action = Action::from_index(best);
            let pred = model.predict(&nodes[cur].obs, action);
            let child = Node {
                obs: pred.next_obs,
                visits: 0,
                total_value: 0.0,
                prior: nodes[cur].priors[best],
                reward: pred.reward,
                done: pred.done,
                depth: nodes[cur].depth + 1,
                value_est: if pred.done { 0.0 } else { pred.value },
                priors: pred.prior,
                children: [None; NUM_ACTIONS],
            };
            let idx = nodes.len();
            nodes.push(child);
            nodes[cur].children[best] = Some(idx);
            path.push(idx);
            bootstrap = if pred.done { 0.0 } else { pred.value };
            break;
        }
        // Backup: each node on the path stores the return of the edge
        // leading into it.
        let mut g = bootstrap;
        for &idx in path.iter().skip(1).rev() {
            g = nodes[idx].reward + config.discount * g;
            nodes[idx].visits += 1;
            nodes[idx].total_value += g;
        }
        nodes[0].visits += 1;
    }
    SearchTree { nodes, budget: config.budget }
}

// ---------------------------------------------------------------------------
// Rollouts and traces

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutOrigin {
    Search,
    Simulation,
}

#[derive(Clone, Debug)]
pub struct RolloutStep {
    /// Decoded observation after taking the action.
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
}

/// A predicted future path of length ≤ L. Shorter rollouts are padded by
/// the consumer using the length as the mask.
#[derive(Clone, Debug)]
pub struct PlanRollout {
    pub steps: Vec<RolloutStep>,
    pub origin: RolloutOrigin,
}

/// Walk from the root, descending to the max-visit child at each depth
/// (ties to the lowest action index), up to `l` steps. Stops when a node
/// has no visited children.
pub fn most_visited_rollout(tree: &SearchTree, l: usize) -> PlanRollout {
    rollout_from(tree, 0, l, None)
}

/// As [`most_visited_rollout`] but committing to `first` at the root. Used
/// for the top-k ranked rollouts.
pub(crate) fn rollout_from(
    tree: &SearchTree,
    root: usize,
    l: usize,
    first: Option<Action>,
) -> PlanRollout {
    let mut steps = Vec::new();
    let mut cur = root;
    while steps.len() < l {
        let forced = if steps.is_empty() { first } else { None };
        let next = match forced {
            Some(a) => tree.nodes[cur].children[a.index()]
                .filter(|&c| tree.nodes[c].visits > 0)
                .map(|c| (a, c)),
            None => {
                let mut best: Option<(Action, usize)> = None;
                for a in ALL_ACTIONS {
                    if let Some(c) = tree.nodes[cur].children[a.index()] {
                        let v = tree.nodes[c].visits;
                        if v > 0 && best.map_or(true, |(_, bc)| v > tree.nodes[bc].visits) {
                            best = Some((a, c));
                        }
                    }
                }
                best
            }
        };
        match next {
            Some((a, c)) => {
                steps.push(RolloutStep {
                    obs: tree.nodes[c].obs.clone(),
                    action: a,
                    reward: tree.nodes[c].reward,
                });
                cur = c;
            }
            None => break,
        }
    }
    PlanRollout { steps, origin: RolloutOrigin::Search }
}

/// Inner computation trace for one acted step.
#[derive(Clone, Debug)]
pub enum InnerTrace {
    Search(SearchTree),
    /// Hidden vector after each internal tick (K vectors).
    Recurrent { ticks: Vec<Vec<f64>> },
    /// Activation vector per hidden layer.
    Feedforward { layers: Vec<Vec<f64>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenSelection {
    AllTicks,
    LastTick,
    AllLayers,
    LastLayer,
}

/// Select hidden vectors from a trace for predictor tokens.
pub fn extract_hidden(
    trace: &InnerTrace,
    selection: HiddenSelection,
) -> Result<Vec<Vec<f64>>, AgentError> {
    match (trace, selection) {
        (InnerTrace::Recurrent { ticks }, HiddenSelection::AllTicks) => Ok(ticks.clone()),
        (InnerTrace::Recurrent { ticks }, HiddenSelection::LastTick) => {
            Ok(vec![ticks.last().expect("trace has ticks").clone()])
        }
        (InnerTrace::Feedforward { layers }, HiddenSelection::AllLayers) => Ok(layers.clone()),
        (InnerTrace::Feedforward { layers }, HiddenSelection::LastLayer) => {
            Ok(vec![layers.last().expect("trace has layers").clone()])
        }
        _ => Err(AgentError::IncompatibleSelection),
    }
}

// ---------------------------------------------------------------------------
// Policies

#[derive(Clone, Copy, Debug)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pw: ParamId,
    pb: ParamId,
    vw: ParamId,
    vb: ParamId,
}

#[derive(Clone, Debug)]
pub struct FeedforwardPolicy {
    store: ParamSet,
    ids: FfIds,
    pub in_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
struct RecIds {
    enc_w: ParamId,
    enc_b: ParamId,
    pw: ParamId,
    pb: ParamId,
    vw: ParamId,
    vb: ParamId,
}

#[derive(Clone, Debug)]
pub struct RecurrentPolicy {
    store: ParamSet,
    ids: RecIds,
    gru: GruCell,
    pub in_dim: usize,
    pub hidden: usize,
    pub ticks: usize,
}

#[derive(Clone, Debug)]
pub enum Policy {
    Feedforward(FeedforwardPolicy),
    Recurrent(RecurrentPolicy),
    /// Explicit planner; the world model is supplied at act time.
    MctsPlanner(PlannerConfig),
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Feedforward(_) => PolicyKind::Feedforward,
            Policy::Recurrent(_) => PolicyKind::Recurrent,
            Policy::MctsPlanner(_) => PolicyKind::MctsPlanner,
        }
    }

    pub fn initial_state(&self) -> PolicyState {
        match self {
            Policy::Recurrent(p) => PolicyState { hidden: Some(Tensor::zeros(&[1, p.hidden])) },
            _ => PolicyState { hidden: None },
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), AgentError> {
        let (kind, in_dim, hidden, ticks, store) = match self {
            Policy::Feedforward(p) => (PolicyKind::Feedforward, p.in_dim, p.hidden, 0, Some(&p.store)),
            Policy::Recurrent(p) => (PolicyKind::Recurrent, p.in_dim, p.hidden, p.ticks, Some(&p.store)),
            Policy::MctsPlanner(_) => (PolicyKind::MctsPlanner, 0, 0, 0, None),
        };
        let header = serde_json::json!({
            "kind": kind,
            "in_dim": in_dim,
            "hidden": hidden,
            "ticks": ticks,
            "planner": if let Policy::MctsPlanner(c) = self { Some(c) } else { None },
        });
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        if let Some(store) = store {
            store.save(&mut w)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<Policy, AgentError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: serde_json::Value = serde_json::from_str(&line)?;
        let kind: PolicyKind = serde_json::from_value(header["kind"].clone())?;
        match kind {
            PolicyKind::MctsPlanner => {
                let cfg: PlannerConfig = serde_json::from_value(header["planner"].clone())?;
                Ok(Policy::MctsPlanner(cfg))
            }
            PolicyKind::Feedforward => {
                let in_dim = header["in_dim"].as_u64().unwrap() as usize;
                let hidden = header["hidden"].as_u64().unwrap() as usize;
                let mut p = FeedforwardPolicy::new(in_dim, hidden, 0);
                p.store.load(r)?;
                Ok(Policy::Feedforward(p))
            }
            PolicyKind::Recurrent => {
                let in_dim = header["in_dim"].as_u64().unwrap() as usize;
                let hidden = header["hidden"].as_u64().unwrap() as usize;
                let ticks = header["ticks"].as_u64().unwrap() as usize;
                let mut p = RecurrentPolicy::new(in_dim, hidden, ticks, 0);
                p.store.load(r)?;
                Ok(Policy::Recurrent(p))
            }
        }
    }
}

/// Mutable per-episode policy state: the recurrent hidden vector. Empty
/// for feedforward and planner policies.
#[derive(Clone, Debug)]
pub struct PolicyState {
    pub hidden: Option<Tensor>,
}

struct FfForward {
    logits: Tensor,
    /// One value per batch row.
    values: Tensor,
    h1: Tensor,
    h2: Tensor,
    caches: (
        crate::nn::ops::LinearCache,
        crate::nn::ops::ReluCache,
        crate::nn::ops::LinearCache,
        crate::nn::ops::ReluCache,
        crate::nn::ops::LinearCache,
        crate::nn::ops::LinearCache,
    ),
}

impl FeedforwardPolicy {
    fn new(in_dim: usize, hidden: usize, seed: u64) -> FeedforwardPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamSet::new();
        let ids = FfIds {
            w1: store.add_linear_init("ff.w1", &[in_dim, hidden], in_dim, &mut rng),
            b1: store.add("ff.b1", Tensor::zeros(&[hidden])),
            w2: store.add_linear_init("ff.w2", &[hidden, hidden], hidden, &mut rng),
            b2: store.add("ff.b2", Tensor::zeros(&[hidden])),
            pw: store.add_linear_init("ff.policy.w", &[hidden, NUM_ACTIONS], hidden, &mut rng),
            pb: store.add("ff.policy.b", Tensor::zeros(&[NUM_ACTIONS])),
            vw: store.add_linear_init("ff.value.w", &[hidden, 1], hidden, &mut rng),
            vb: store.add("ff.value.b", Tensor::zeros(&[1])),
        };
        FeedforwardPolicy { store, ids, in_dim, hidden }
    }

    fn forward(&self, x: &Tensor) -> FfForward {
        let (a1, c1) = linear_forward(x, self.store.value(self.ids.w1), self.store.value(self.ids.b1));
        let (h1, r1) = relu_forward(&a1);
        let (a2, c2) = linear_forward(&h1, self.store.value(self.ids.w2), self.store.value(self.ids.b2));
        let (h2, r2) = relu_forward(&a2);
        let (logits, cp) = linear_forward(&h2, self.store.value(self.ids.pw), self.store.value(self.ids.pb));
        let (values, cv) = linear_forward(&h2, self.store.value(self.ids.vw), self.store.value(self.ids.vb));
        FfForward { logits, values, h1, h2, caches: (c1, r1, c2, r2, cp, cv) }
    }

    /// Accumulate gradients for one batched step given head gradients.
    fn backward(&mut self, f: &FfForward, g_logits: &Tensor, gv: &Tensor) {
        let ids = self.ids;
        let take = |s: &mut ParamSet, id: ParamId| std::mem::replace(s.grad_mut(id), Tensor::zeros(&[0]));
        let mut gw = take(&mut self.store, ids.pw);
        let mut gb = take(&mut self.store, ids.pb);
        let mut gh2 = linear_backward(&f.caches.4, self.store.value(ids.pw), g_logits, &mut gw, &mut gb);
        *self.store.grad_mut(ids.pw) = gw;
        *self.store.grad_mut(ids.pb) = gb;
        let mut gw = take(&mut self.store, ids.vw);
        let mut gb = take(&mut self.store, ids.vb);
        let gh2v = linear_backward(&f.caches.5, self.store.value(ids.vw), gv, &mut gw, &mut gb);
        *self.store.grad_mut(ids.vw) = gw;
        *self.store.grad_mut(ids.vb) = gb;
        for (a, b) in gh2.data.iter_mut().zip(&gh2v.data) {
            *a += b;
        }
        let ga2 = relu_backward(&f.caches.3, &gh2);
        let mut gw = take(&mut self.store, ids.w2);
        let mut gb = take(&mut self.store, ids.b2);
        let gh1 = linear_backward(&f.caches.2, self.store.value(ids.w2), &ga2, &mut gw, &mut gb);
        *self.store.grad_mut(ids.w2) = gw;
        *self.store.grad_mut(ids.b2) = gb;
        let ga1 = relu_backward(&f.caches.1, &gh1);
        let mut gw = take(&mut self.store, ids.w1);
        let mut gb = take(&mut self.store, ids.b1);
        linear_backward(&f.caches.0, self.store.value(ids.w1), &ga1, &mut gw, &mut gb);
        *self.store.grad_mut(ids.w1) = gw;
        *self.store.grad_mut(ids.b1) = gb;
    }
}

struct RecForward {
    logits: Tensor,
    /// One value per batch row.
    values: Tensor,
    /// Hidden state after each tick.
    hs: Vec<Tensor>,
    enc_cache: (crate::nn::ops::LinearCache, crate::nn::ops::ReluCache),
    gru_caches: Vec<GruCache>,
    head_caches: (crate::nn::ops::LinearCache, crate::nn::ops::LinearCache),
}

impl RecurrentPolicy {
    fn new(in_dim: usize, hidden: usize, ticks: usize, seed: u64) -> RecurrentPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamSet::new();
        let enc_w = store.add_linear_init("rec.enc.w", &[in_dim, hidden], in_dim, &mut rng);
        let enc_b = store.add("rec.enc.b", Tensor::zeros(&[hidden]));
        let gru = GruCell::new("rec.gru", hidden, hidden, &mut store, &mut rng);
        let ids = RecIds {
            enc_w,
            enc_b,
            pw: store.add_linear_init("rec.policy.w", &[hidden, NUM_ACTIONS], hidden, &mut rng),
            pb: store.add("rec.policy.b", Tensor::zeros(&[NUM_ACTIONS])),
            vw: store.add_linear_init("rec.value.w", &[hidden, 1], hidden, &mut rng),
            vb: store.add("rec.value.b", Tensor::zeros(&[1])),
        };
        RecurrentPolicy { store, ids, gru, in_dim, hidden, ticks }
    }

    fn forward(&self, x: &Tensor, h0: &Tensor) -> RecForward {
        let (ea, ec) = linear_forward(x, self.store.value(self.ids.enc_w), self.store.value(self.ids.enc_b));
        let (xe, er) = relu_forward(&ea);
        let mut h = h0.clone();
        let mut hs = Vec::with_capacity(self.ticks);
        let mut gru_caches = Vec::with_capacity(self.ticks);
        for _ in 0..self.ticks {
            let (hn, cache) = self.gru.forward(&self.store, &xe, &h);
            h = hn.clone();
            hs.push(hn);
            gru_caches.push(cache);
        }
        let last = hs.last().unwrap();
        let (logits, cp) = linear_forward(last, self.store.value(self.ids.pw), self.store.value(self.ids.pb));
        let (values, cv) = linear_forward(last, self.store.value(self.ids.vw), self.store.value(self.ids.vb));
        RecForward { logits, values, hs, enc_cache: (ec, er), gru_caches, head_caches: (cp, cv) }
    }

    /// Backward one batched step. `gh_in` is the gradient flowing into the
    /// last tick's hidden state from the future; returns the gradient for
    /// the previous step's hidden state.
    fn backward(&mut self, f: &RecForward, g_logits: &Tensor, gv: &Tensor, gh_in: &Tensor) -> Tensor {
        let ids = self.ids;
        let take = |s: &mut ParamSet, id: ParamId| std::mem::replace(s.grad_mut(id), Tensor::zeros(&[0]));
        let mut gw = take(&mut self.store, ids.pw);
        let mut gb = take(&mut self.store, ids.pb);
        let mut gh = linear_backward(&f.head_caches.0, self.store.value(ids.pw), g_logits, &mut gw, &mut gb);
        *self.store.grad_mut(ids.pw) = gw;
        *self.store.grad_mut(ids.pb) = gb;
        let mut gw = take(&mut self.store, ids.vw);
        let mut gb = take(&mut self.store, ids.vb);
        let ghv = linear_backward(&f.head_caches.1, self.store.value(ids.vw), gv, &mut gw, &mut gb);
        *self.store.grad_mut(ids.vw) = gw;
        *self.store.grad_mut(ids.vb) = gb;
        for ((a, b), c) in gh.data.iter_mut().zip(&ghv.data).zip(&gh_in.data) {
            *a += b + c;
        }
        // Through the ticks in reverse; encoder input gradient accumulates.
        let mut gxe = Tensor::zeros(&[f.logits.shape[0], self.hidden]);
        for cache in f.gru_caches.iter().rev() {
            let (gx, gh_prev) = self.gru.backward(&mut self.store, cache, &gh);
            for (a, b) in gxe.data.iter_mut().zip(&gx.data) {
                *a += b;
            }
            gh = gh_prev;
        }
        let ga = relu_backward(&f.enc_cache.1, &gxe);
        let mut gw = take(&mut self.store, ids.enc_w);
        let mut gb = take(&mut self.store, ids.enc_b);
        linear_backward(&f.enc_cache.0, self.store.value(ids.enc_w), &ga, &mut gw, &mut gb);
        *self.store.grad_mut(ids.enc_w) = gw;
        *self.store.grad_mut(ids.enc_b) = gb;
        gh
    }
}

/// Greedy action plus the inner trace. `state` carries the recurrent hidden
/// vector across steps and is updated in place.
pub fn act_greedy(
    policy: &Policy,
    state: &mut PolicyState,
    obs: &Observation,
    model: Option<&WorldModel>,
    seed: u64,
) -> Result<(Action, InnerTrace), AgentError> {
    match policy {
        Policy::MctsPlanner(cfg) => {
            let model = model.ok_or(AgentError::MissingModel)?;
            let tree = mcts_search(model, obs, cfg, seed);
            let action = tree.best_action();
            Ok((action, InnerTrace::Search(tree)))
        }
        Policy::Feedforward(p) => {
            let x = Tensor::from_vec(&[1, p.in_dim], obs.to_features());
            let f = p.forward(&x);
            let action = argmax_action(&f.logits.data);
            Ok((action, InnerTrace::Feedforward { layers: vec![f.h1.data, f.h2.data] }))
        }
        Policy::Recurrent(p) => {
            let h0 = state.hidden.clone().expect("recurrent policy state");
            let x = Tensor::from_vec(&[1, p.in_dim], obs.to_features());
            let f = p.forward(&x, &h0);
            let action = argmax_action(&f.logits.data);
            state.hidden = Some(f.hs.last().unwrap().clone());
            let ticks = f.hs.into_iter().map(|h| h.data).collect();
            Ok((action, InnerTrace::Recurrent { ticks }))
        }
    }
}

/// Softmax action probabilities of a network policy for one observation,
/// advancing recurrent state. Planner policies have no action distribution.
pub fn action_probabilities(
    policy: &Policy,
    state: &mut PolicyState,
    obs: &Observation,
) -> Result<[f64; NUM_ACTIONS], AgentError> {
    let logits = match policy {
        Policy::MctsPlanner(_) => return Err(AgentError::IncompatibleSelection),
        Policy::Feedforward(p) => {
            let x = Tensor::from_vec(&[1, p.in_dim], obs.to_features());
            p.forward(&x).logits
        }
        Policy::Recurrent(p) => {
            let h0 = state.hidden.clone().expect("recurrent policy state");
            let x = Tensor::from_vec(&[1, p.in_dim], obs.to_features());
            let f = p.forward(&x, &h0);
            state.hidden = Some(f.hs.last().unwrap().clone());
            f.logits
        }
    };
    let p = softmax_rows(&logits);
    let mut out = [0.0; NUM_ACTIONS];
    out.copy_from_slice(&p.data);
    Ok(out)
}

fn argmax_action(logits: &[f64]) -> Action {
    let mut best = 0;
    for i in 1..NUM_ACTIONS {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Action::from_index(best)
}

// ---------------------------------------------------------------------------
// Actor-critic training

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total environment transitions to train on (desk default 300k).
    pub transitions: usize,
    pub n_step: usize,
    /// Parallel environments stepped in lockstep; the update batch is
    /// `num_envs * n_step` transitions.
    pub num_envs: usize,
    pub entropy_weight: f64,
    pub value_weight: f64,
    pub discount: f64,
    pub learning_rate: f64,
    /// Transitions per training-log window.
    pub log_window: usize,
    /// Anneal level difficulty from trivial to the target generator config
    /// over training. Each episode samples a difficulty in [trivial,
    /// frontier] where the frontier grows linearly with progress; solving
    /// sparse-reward levels from scratch fails without this.
    pub curriculum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            transitions: 300_000,
            n_step: 5,
            num_envs: 16,
            entropy_weight: 0.01,
            value_weight: 0.5,
            discount: DISCOUNT,
            learning_rate: 1e-3,
            log_window: 10_000,
            curriculum: true,
        }
    }
}

/// Generator config at curriculum difficulty `q` in [0, 1]: 0 is trivial
/// (one pull, no extra walls, one box), 1 is the target config.
fn curriculum_gen(target: &GenConfig, q: f64) -> GenConfig {
    let lerp = |lo: usize, hi: usize| -> usize {
        if hi <= lo {
            return hi;
        }
        lo + ((hi - lo) as f64 * q).round() as usize
    };
    let min_pulls = lerp(1.min(target.min_pulls), target.min_pulls);
    GenConfig {
        min_pulls,
        max_pulls: lerp(2.min(target.max_pulls), target.max_pulls).max(min_pulls),
        max_walls: lerp(0, target.max_walls),
        boxes: if q < 0.5 { 1.min(target.boxes) } else { target.boxes },
        ..*target
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowStat {
    pub transitions_seen: usize,
    pub episodes: usize,
    pub solve_rate: f64,
    pub mean_return: f64,
}

/// Per-window solve rates over training; the learning-curve record.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub windows: Vec<WindowStat>,
}

struct SegStep {
    ff: Option<FfForward>,
    rec: Option<RecForward>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    /// Episode ended at this step (the env was reset afterwards).
    dones: Vec<bool>,
}

struct EnvSlot {
    state: crate::gridworld::EnvState,
    obs: Observation,
    episode_return: f64,
}

/// Advantage actor-critic with n-step returns over `num_envs` environments
/// stepped in lockstep; each update uses one `num_envs * n_step` segment.
/// Levels are drawn per episode from `seed`-derived generator seeds;
/// training actions are sampled from the policy softmax.
pub fn train_actor_critic(
    env: &EnvConfig,
    gen: &GenConfig,
    kind: PolicyKind,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Policy, TrainingLog), AgentError> {
    if config.transitions == 0 {
        return Err(AgentError::ZeroBudget);
    }
    let in_dim = NUM_PLANES * gen.width * gen.height + 1;
    let ne = config.num_envs.max(1);
    let mut policy = match kind {
        PolicyKind::Feedforward => Policy::Feedforward(FeedforwardPolicy::new(in_dim, FF_HIDDEN, seed)),
        PolicyKind::Recurrent => Policy::Recurrent(RecurrentPolicy::new(in_dim, REC_HIDDEN, REC_TICKS, seed)),
        PolicyKind::MctsPlanner => return Err(AgentError::UntrainableKind(kind)),
    };
    let mut adam = match &policy {
        Policy::Feedforward(p) => Adam::new(&p.store, config.learning_rate),
        Policy::Recurrent(p) => Adam::new(&p.store, config.learning_rate),
        _ => unreachable!(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut level_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(1);
    let fresh_slot =
        |rng: &mut ChaCha8Rng, level_seed: &mut u64, progress: f64| -> Result<EnvSlot, AgentError> {
            // Difficulty: half the episodes at the current frontier, half
            // spread below it to keep earlier skills rewarded.
            let q = if config.curriculum {
                let frontier = (progress * 1.25).min(1.0);
                if rng.gen_bool(0.5) {
                    frontier
                } else {
                    rng.gen::<f64>() * frontier
                }
            } else {
                1.0
            };
            let level = Arc::new(generate_level(*level_seed, &curriculum_gen(gen, q))?);
            *level_seed = level_seed.wrapping_add(1);
            let (state, obs) = reset(&level, env, rng.gen());
            Ok(EnvSlot { state, obs, episode_return: 0.0 })
        };
    let mut slots = Vec::with_capacity(ne);
    for _ in 0..ne {
        slots.push(fresh_slot(&mut rng, &mut level_seed, 0.0)?);
    }
    let mut h = match &policy {
        Policy::Recurrent(p) => Tensor::zeros(&[ne, p.hidden]),
        _ => Tensor::zeros(&[0]),
    };

    let mut log = TrainingLog::default();
    let (mut win_episodes, mut win_solved, mut win_return) = (0usize, 0usize, 0.0f64);
    let mut transitions = 0usize;

    while transitions < config.transitions {
        // Collect one segment.
        let mut seg: Vec<SegStep> = Vec::with_capacity(config.n_step);
        for _ in 0..config.n_step {
            let mut x = Vec::with_capacity(ne * in_dim);
            for s in &slots {
                x.extend_from_slice(&s.obs.to_features());
            }
            let x = Tensor::from_vec(&[ne, in_dim], x);
            let (logits, ff, rec) = match &policy {
                Policy::Feedforward(p) => {
                    let f = p.forward(&x);
                    (f.logits.clone(), Some(f), None)
                }
                Policy::Recurrent(p) => {
                    let f = p.forward(&x, &h);
                    h = f.hs.last().unwrap().clone();
                    (f.logits.clone(), None, Some(f))
                }
                _ => unreachable!(),
            };
            let probs = softmax_rows(&logits);
            let mut actions = Vec::with_capacity(ne);
            let mut rewards = Vec::with_capacity(ne);
            let mut dones = Vec::with_capacity(ne);
            for (e, slot) in slots.iter_mut().enumerate() {
                let row = &probs.data[e * NUM_ACTIONS..(e + 1) * NUM_ACTIONS];
                let dist = WeightedIndex::new(row).expect("valid probabilities");
                let a = dist.sample(&mut rng);
                let res = step(&slot.state, Action::from_index(a), env, &mut rng);
                slot.episode_return += res.reward;
                actions.push(a);
                rewards.push(res.reward);
                dones.push(res.done);
                if res.done {
                    win_episodes += 1;
                    win_solved += res.next.solved as usize;
                    win_return += slot.episode_return;
                    *slot =
                        fresh_slot(&mut rng, &mut level_seed, transitions as f64 / config.transitions as f64)?;
                    if let Policy::Recurrent(p) = &policy {
                        for v in &mut h.data[e * p.hidden..(e + 1) * p.hidden] {
                            *v = 0.0;
                        }
                    }
                } else {
                    slot.obs = observe(&res.next, env, &mut rng);
                    slot.state = res.next;
                }
            }
            transitions += ne;
            seg.push(SegStep { ff, rec, actions, rewards, dones });
        }

        // Bootstrap values for the current (post-segment) observations. Rows
        // whose episode ended at the segment's last step are cut off by the
        // done mask below.
        let mut x = Vec::with_capacity(ne * in_dim);
        for s in &slots {
            x.extend_from_slice(&s.obs.to_features());
        }
        let x = Tensor::from_vec(&[ne, in_dim], x);
        let bootstrap: Vec<f64> = match &policy {
            Policy::Feedforward(p) => p.forward(&x).values.data.clone(),
            Policy::Recurrent(p) => p.forward(&x, &h).values.data.clone(),
            _ => unreachable!(),
        };

        // Per-env n-step returns, cut at episode boundaries.
        let mut returns = vec![vec![0.0; ne]; seg.len()];
        let mut g = bootstrap;
        for k in (0..seg.len()).rev() {
            for e in 0..ne {
                if seg[k].dones[e] {
                    g[e] = 0.0;
                }
                g[e] = seg[k].rewards[e] + config.discount * g[e];
                returns[k][e] = g[e];
            }
        }

        // Advantages, normalized per segment to decouple the policy
        // gradient from the reward scale (the solve bonus dominates raw
        // returns).
        let mut advs = vec![vec![0.0; ne]; seg.len()];
        let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0.0);
        for (k, s) in seg.iter().enumerate() {
            let values = match (&s.ff, &s.rec) {
                (Some(f), _) => &f.values,
                (_, Some(f)) => &f.values,
                _ => unreachable!(),
            };
            for e in 0..ne {
                let a = returns[k][e] - values.data[e];
                advs[k][e] = a;
                sum += a;
                sum_sq += a * a;
                count += 1.0;
            }
        }
        let mean = sum / count;
        let std = (sum_sq / count - mean * mean).max(0.0).sqrt() + 1e-8;
        for row in &mut advs {
            for a in row {
                *a = (*a - mean) / std;
            }
        }

        // Batched gradients, one Adam step per segment.
        let scale = 1.0 / (ne * seg.len()) as f64;
        match &mut policy {
            Policy::Feedforward(p) => {
                p.store.zero_grads();
                for (k, s) in seg.iter().enumerate() {
                    let f = s.ff.as_ref().unwrap();
                    let (g_logits, g_values) =
                        head_grads(f.logits.clone(), &f.values, s, &returns[k], &advs[k], config, scale);
                    p.backward(f, &g_logits, &g_values);
                }
                check_finite(&p.store, transitions)?;
                adam.step(&mut p.store);
            }
            Policy::Recurrent(p) => {
                p.store.zero_grads();
                let mut gh = Tensor::zeros(&[ne, p.hidden]);
                for (k, s) in seg.iter().enumerate().rev() {
                    let f = s.rec.as_ref().unwrap();
                    // The hidden state was reset after a done step, so no
                    // gradient flows back across the boundary.
                    for e in 0..ne {
                        if s.dones[e] {
                            for v in &mut gh.data[e * p.hidden..(e + 1) * p.hidden] {
                                *v = 0.0;
                            }
                        }
                    }
                    let (g_logits, g_values) =
                        head_grads(f.logits.clone(), &f.values, s, &returns[k], &advs[k], config, scale);
                    gh = p.backward(f, &g_logits, &g_values, &gh);
                }
                check_finite(&p.store, transitions)?;
                adam.step(&mut p.store);
            }
            _ => unreachable!(),
        }

        if transitions >= (log.windows.len() + 1) * config.log_window {
            if std::env::var_os("FORESIGHT_DEBUG").is_some() {
                let s = seg.last().unwrap();
                let (logits, values) = match (&s.ff, &s.rec) {
                    (Some(f), _) => (&f.logits, &f.values),
                    (_, Some(f)) => (&f.logits, &f.values),
                    _ => unreachable!(),
                };
                let probs = softmax_rows(logits);
                let mut ent = 0.0;
                for row in 0..ne {
                    for &q in &probs.data[row * NUM_ACTIONS..(row + 1) * NUM_ACTIONS] {
                        if q > 0.0 {
                            ent -= q * q.ln() / ne as f64;
                        }
                    }
                }
                let vbar: f64 = values.data.iter().sum::<f64>() / ne as f64;
                let abar: f64 = advs.iter().flatten().map(|a| a.abs()).sum::<f64>()
                    / (ne * seg.len()) as f64;
                let pw_norm = match &policy {
                    Policy::Feedforward(p) => {
                        p.store.value(p.ids.pw).data.iter().map(|x| x * x).sum::<f64>().sqrt()
                    }
                    Policy::Recurrent(p) => {
                        p.store.value(p.ids.pw).data.iter().map(|x| x * x).sum::<f64>().sqrt()
                    }
                    _ => 0.0,
                };
                eprintln!("debug t={transitions} entropy={ent:.3} v={vbar:.3} |adv|={abar:.3} pw={pw_norm:.4}");
            }
            log.windows.push(WindowStat {
                transitions_seen: transitions,
                episodes: win_episodes,
                solve_rate: win_solved as f64 / win_episodes.max(1) as f64,
                mean_return: win_return / win_episodes.max(1) as f64,
            });
            win_episodes = 0;
            win_solved = 0;
            win_return = 0.0;
        }
    }
    if win_episodes > 0 {
        log.windows.push(WindowStat {
            transitions_seen: transitions,
            episodes: win_episodes,
            solve_rate: win_solved as f64 / win_episodes as f64,
            mean_return: win_return / win_episodes as f64,
        });
    }
    Ok((policy, log))
}

/// Batched gradients of the actor-critic loss with respect to the policy
/// logits and values of one segment step.
fn head_grads(
    logits: Tensor,
    values: &Tensor,
    s: &SegStep,
    returns: &[f64],
    advs: &[f64],
    config: &TrainConfig,
    scale: f64,
) -> (Tensor, Tensor) {
    let ne = returns.len();
    let mut g_logits = Tensor::zeros(&[ne, NUM_ACTIONS]);
    let mut g_values = Tensor::zeros(&[ne, 1]);
    let probs = softmax_rows(&logits);
    for e in 0..ne {
        let v = values.data[e];
        let row = &probs.data[e * NUM_ACTIONS..(e + 1) * NUM_ACTIONS];
        policy_head_grad_row(
            row,
            s.actions[e],
            advs[e],
            config.entropy_weight,
            scale,
            &mut g_logits.data[e * NUM_ACTIONS..(e + 1) * NUM_ACTIONS],
        );
        g_values.data[e] = config.value_weight * 2.0 * (v - returns[e]) * scale;
    }
    (g_logits, g_values)
}

/// Gradient of `-adv*log p(a) - w*H` with respect to one row of logits,
/// with the advantage treated as a constant.
fn policy_head_grad_row(
    probs: &[f64],
    action: usize,
    adv: f64,
    entropy_weight: f64,
    scale: f64,
    out: &mut [f64],
) {
    let mut entropy = 0.0;
    for &q in probs {
        if q > 0.0 {
            entropy -= q * q.ln();
        }
    }
    for i in 0..NUM_ACTIONS {
        let pg = adv * (probs[i] - if i == action { 1.0 } else { 0.0 });
        let ent = entropy_weight * probs[i] * (probs[i].max(1e-12).ln() + entropy);
        out[i] = (pg + ent) * scale;
    }
}

fn check_finite(store: &ParamSet, transitions: usize) -> Result<(), AgentError> {
    if store.grads_finite() {
        Ok(())
    } else {
        Err(AgentError::Divergence { transitions })
    }
}

/// Greedy solve rate on `num_levels` held-out levels (generator seeds are
/// offset by `level_seed_base` to keep them disjoint from training).
pub fn evaluate_solve_rate(
    policy: &Policy,
    model: Option<&WorldModel>,
    env: &EnvConfig,
    gen: &GenConfig,
    num_levels: usize,
    level_seed_base: u64,
    seed: u64,
) -> Result<f64, AgentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut solved = 0usize;
    for i in 0..num_levels {
        let level = Arc::new(generate_level(level_seed_base + i as u64, gen)?);
        let (mut state, mut obs) = reset(&level, env, rng.gen());
        let mut pstate = policy.initial_state();
        while !state.done {
            let (a, _) = act_greedy(policy, &mut pstate, &obs, model, rng.gen())?;
            let res = step(&state, a, env, &mut rng);
            obs = observe(&res.next, env, &mut rng);
            state = res.next;
        }
        solved += state.solved as usize;
    }
    Ok(solved as f64 / num_levels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Cell, Level};
    use crate::world_model::oracle_model;

    fn test_obs() -> Observation {
        let level = Arc::new(generate_level(1, &GenConfig::default()).unwrap());
        let (_, obs) = reset(&level, &EnvConfig::default(), 0);
        obs
    }

    /// Stub model: state never changes, zero reward, never done, uniform
    /// prior, zero value.
    struct SymmetricStub;
    impl SearchModel for SymmetricStub {
        fn predict(&self, obs: &Observation, _action: Action) -> ModelOutput {
            ModelOutput {
                next_obs: obs.clone(),
                player_probs: vec![],
                reward: 0.0,
                done_prob: 0.0,
                done: false,
                prior: [0.25; NUM_ACTIONS],
                value: 0.0,
            }
        }
        fn evaluate(&self, _obs: &Observation) -> ([f64; NUM_ACTIONS], f64) {
            ([0.25; NUM_ACTIONS], 0.0)
        }
    }

    #[test]
    fn budget_one_expands_exactly_one_root_child() {
        let tree = mcts_search(&SymmetricStub, &test_obs(), &PlannerConfig { budget: 1, ..PlannerConfig::default() }, 0);
        let visited: Vec<u32> = tree.root_visits().into_iter().filter(|&v| v > 0).collect();
        assert_eq!(visited, vec![1]);
    }

    #[test]
    fn symmetric_stub_visits_near_uniform() {
        let cfg = PlannerConfig::default();
        let tree = mcts_search(&SymmetricStub, &test_obs(), &cfg, 0);
        let visits = tree.root_visits();
        let total: u32 = visits.iter().sum();
        assert_eq!(total as usize, cfg.budget);
        for v in visits {
            let diff = (v as i64 - (cfg.budget as i64 / 4)).abs();
            assert!(diff <= 2, "visits {visits:?} not near-uniform");
        }
    }

    #[test]
    fn root_visits_sum_to_budget_with_oracle() {
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        let cfg = PlannerConfig::default();
        for seed in 0..5u64 {
            let level = Arc::new(generate_level(seed, &GenConfig::default()).unwrap());
            let (_, obs) = reset(&level, &env, 0);
            let tree = mcts_search(&model, &obs, &cfg, 0);
            let total: u32 = tree.root_visits().iter().sum();
            assert_eq!(total as usize, cfg.budget);
        }
    }

    #[test]
    fn planner_act_greedy_is_argmax_visits_and_deterministic() {
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        let policy = Policy::MctsPlanner(PlannerConfig::default());
        let obs = test_obs();
        let mut st = policy.initial_state();
        let (a1, t1) = act_greedy(&policy, &mut st, &obs, Some(&model), 1).unwrap();
        let (a2, _) = act_greedy(&policy, &mut st, &obs, Some(&model), 2).unwrap();
        assert_eq!(a1, a2);
        match t1 {
            InnerTrace::Search(tree) => assert_eq!(tree.best_action(), a1),
            _ => panic!("planner trace must be a search tree"),
        }
    }

    #[test]
    fn planner_without_model_errors() {
        let policy = Policy::MctsPlanner(PlannerConfig::default());
        let mut st = policy.initial_state();
        assert!(matches!(
            act_greedy(&policy, &mut st, &test_obs(), None, 0),
            Err(AgentError::MissingModel)
        ));
    }

    /// One rewarding push within the horizon; every other push deadlocks the
    /// box against the top or bottom wall.
    fn deadlock_level(shift: usize) -> Level {
        let mut walls = Vec::new();
        for r in 0..6 {
            for c in 0..6 {
                if r == 0 || r == 5 || c == 0 || c == 5 {
                    walls.push(Cell(r, c));
                }
            }
        }
        let row = 2 + shift % 2;
        Level {
            level_id: shift as u64,
            gen_seed: 0,
            width: 6,
            height: 6,
            walls,
            targets: vec![Cell(row, 4)],
            boxes: vec![Cell(row, 3)],
            player: Cell(row, 2),
            blue: Cell(4, 1 + shift % 3),
        }
    }

    #[test]
    fn oracle_search_picks_the_nondeadlocking_push() {
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        let cfg = PlannerConfig::default();
        let mut correct = 0;
        let total = 20;
        for i in 0..total {
            let level = Arc::new(deadlock_level(i));
            let (_, obs) = reset(&level, &env, 0);
            let tree = mcts_search(&model, &obs, &cfg, i as u64);
            if tree.best_action() == Action::Right {
                correct += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.95, "only {correct}/{total} correct");
    }

    #[test]
    fn most_visited_rollout_first_action_matches_best_action() {
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        for seed in 0..5u64 {
            let level = Arc::new(generate_level(seed, &GenConfig::default()).unwrap());
            let (_, obs) = reset(&level, &env, 0);
            let tree = mcts_search(&model, &obs, &PlannerConfig::default(), 0);
            let rollout = most_visited_rollout(&tree, 5);
            assert!(!rollout.steps.is_empty());
            assert!(rollout.steps.len() <= 5);
            assert_eq!(rollout.steps[0].action, tree.best_action());
        }
    }

    /// Independent recursive max-visit descent used as the path oracle.
    fn brute_force_path(tree: &SearchTree, l: usize) -> Vec<(Action, usize)> {
        let mut path = Vec::new();
        let mut cur = 0usize;
        for _ in 0..l {
            let candidates: Vec<(Action, usize, u32)> = ALL_ACTIONS
                .iter()
                .filter_map(|&a| {
                    tree.nodes[cur].children[a.index()]
                        .map(|c| (a, c, tree.nodes[c].visits))
                        .filter(|&(_, _, v)| v > 0)
                })
                .collect();
            let best = candidates.iter().fold(None::<(Action, usize, u32)>, |acc, &x| match acc {
                Some(b) if b.2 >= x.2 => Some(b),
                _ => Some(x),
            });
            match best {
                Some((a, c, _)) => {
                    path.push((a, c));
                    cur = c;
                }
                None => break,
            }
        }
        path
    }

    fn random_tree(rng: &mut ChaCha8Rng, obs: &Observation) -> SearchTree {
        let mut nodes = vec![Node {
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
        }];
        let mut frontier = vec![0usize];
        while let Some(cur) = frontier.pop() {
            if nodes[cur].depth >= 4 || nodes.len() > 60 {
                continue;
            }
            for a in 0..NUM_ACTIONS {
                if rng.gen_bool(0.55) {
                    let idx = nodes.len();
                    let depth = nodes[cur].depth + 1;
                    nodes.push(Node {
                        obs: obs.clone(),
                        visits: rng.gen_range(0..10),
                        total_value: rng.gen_range(-1.0..1.0),
                        prior: 0.25,
                        reward: rng.gen_range(-1.0..1.0),
                        done: false,
                        depth,
                        value_est: 0.0,
                        priors: [0.25; NUM_ACTIONS],
                        children: [None; NUM_ACTIONS],
                    });
                    nodes[cur].children[a] = Some(idx);
                    frontier.push(idx);
                }
            }
        }
        SearchTree { nodes, budget: 100 }
    }

    #[test]
    fn rollout_matches_brute_force_oracle_on_fuzzed_trees() {
        let obs = test_obs();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let tree = random_tree(&mut rng, &obs);
            let rollout = most_visited_rollout(&tree, 5);
            let oracle = brute_force_path(&tree, 5);
            assert_eq!(rollout.steps.len(), oracle.len());
            for (s, (a, c)) in rollout.steps.iter().zip(&oracle) {
                assert_eq!(s.action, *a);
                assert_eq!(s.reward, tree.nodes[*c].reward);
            }
        }
    }

    /// Finite-difference check of the exact gradient path used by the
    /// actor-critic update (policy head + entropy + value head through the
    /// trunk), with the advantage held fixed as in the update rule.
    #[test]
    fn a2c_gradient_matches_finite_differences() {
        let in_dim = 10;
        let mut p = FeedforwardPolicy::new(in_dim, 8, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(&[1, in_dim], (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let action = 2usize;
        let ret = 1.5;
        let (ew, vw) = (0.01, 0.5);

        let f0 = p.forward(&x);
        let v0 = f0.values.data[0];
        let adv = ret - v0;
        p.store.zero_grads();
        let probs0 = softmax_rows(&f0.logits);
        let mut g_logits = Tensor::zeros(&[1, NUM_ACTIONS]);
        policy_head_grad_row(&probs0.data, action, adv, ew, 1.0, &mut g_logits.data);
        let g_values = Tensor::from_vec(&[1, 1], vec![vw * 2.0 * (v0 - ret)]);
        p.backward(&f0, &g_logits, &g_values);

        let loss_at = |p: &FeedforwardPolicy| {
            let f = p.forward(&x);
            let probs = softmax_rows(&f.logits);
            let mut h = 0.0;
            for &q in &probs.data {
                if q > 0.0 {
                    h -= q * q.ln();
                }
            }
            -adv * probs.data[action].ln() + vw * (f.values.data[0] - ret).powi(2) - ew * h
        };

        let eps = 1e-5;
        let mut checked = 0;
        for e in 0..p.store.entries().len() {
            let n = p.store.entries()[e].value.data.len();
            for i in (0..n).step_by((n / 3).max(1)) {
                let analytic = p.store.entries()[e].grad.data[i];
                let orig = p.store.entries()[e].value.data[i];
                p.store.entries_mut()[e].value.data[i] = orig + eps;
                let up = loss_at(&p);
                p.store.entries_mut()[e].value.data[i] = orig - eps;
                let down = loss_at(&p);
                p.store.entries_mut()[e].value.data[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {e} idx {i}: analytic {analytic} vs fd {fd}");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    /// One-state bandit through the exact update path: the rewarded action
    /// must dominate the policy after a few hundred updates.
    #[test]
    fn a2c_update_path_solves_a_bandit() {
        let mut p = FeedforwardPolicy::new(4, 8, 0);
        let mut adam = Adam::new(&p.store, 1e-2);
        let x = Tensor::from_vec(&[1, 4], vec![0.3, -0.2, 0.5, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let f = p.forward(&x);
            let probs = softmax_rows(&f.logits);
            let dist = WeightedIndex::new(&probs.data).unwrap();
            let a = dist.sample(&mut rng);
            let ret = if a == 0 { 1.0 } else { 0.0 };
            let v = f.values.data[0];
            p.store.zero_grads();
            let mut g_logits = Tensor::zeros(&[1, NUM_ACTIONS]);
            policy_head_grad_row(&probs.data, a, ret - v, 0.01, 1.0, &mut g_logits.data);
            let g_values = Tensor::from_vec(&[1, 1], vec![0.5 * 2.0 * (v - ret)]);
            p.backward(&f, &g_logits, &g_values);
            adam.step(&mut p.store);
        }
        let f = p.forward(&x);
        let probs = softmax_rows(&f.logits);
        assert!(probs.data[0] > 0.8, "bandit policy did not converge: {:?}", probs.data);
        assert!((f.values.data[0] - 1.0).abs() < 0.3, "value head off: {}", f.values.data[0]);
    }

    /// Behavior cloning through the same network and backward path: the
    /// policy must fit generator solutions, confirming observations carry
    /// the state and the trunk can represent a level-dependent policy.
    #[test]
    fn feedforward_net_can_clone_solver_actions() {
        use crate::gridworld::generate_level_with_solution;
        let env = EnvConfig::default();
        let gen = GenConfig { min_pulls: 1, max_pulls: 2, max_walls: 0, ..GenConfig::default() };
        let in_dim = NUM_PLANES * gen.width * gen.height + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<usize> = Vec::new();
        for seed in 0..100u64 {
            let (level, solution) = generate_level_with_solution(seed, &gen).unwrap();
            let level = Arc::new(level);
            let (mut state, mut obs) = reset(&level, &env, 0);
            for &a in &solution {
                xs.push(obs.to_features());
                ys.push(a.index());
                let res = step(&state, a, &env, &mut rng);
                obs = observe(&res.next, &env, &mut rng);
                state = res.next;
                if state.done {
                    break;
                }
            }
            assert!(state.solved, "generator solution must solve the level");
        }
        let n = xs.len();
        let mut p = FeedforwardPolicy::new(in_dim, FF_HIDDEN, 0);
        let mut adam = Adam::new(&p.store, 3e-3);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..600 {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            for batch in order.chunks(64) {
                let mut x = Vec::new();
                for &i in batch {
                    x.extend_from_slice(&xs[i]);
                }
                let x = Tensor::from_vec(&[batch.len(), in_dim], x);
                let f = p.forward(&x);
                let probs = softmax_rows(&f.logits);
                let mut g = Tensor::zeros(&[batch.len(), NUM_ACTIONS]);
                for (r, &i) in batch.iter().enumerate() {
                    for k in 0..NUM_ACTIONS {
                        g.data[r * NUM_ACTIONS + k] = (probs.data[r * NUM_ACTIONS + k]
                            - if k == ys[i] { 1.0 } else { 0.0 })
                            / batch.len() as f64;
                    }
                }
                let gv = Tensor::zeros(&[batch.len(), 1]);
                p.store.zero_grads();
                p.backward(&f, &g, &gv);
                adam.step(&mut p.store);
            }
        }
        // Training accuracy: the net must be able to memorize this mapping.
        let mut hits = 0;
        for i in 0..n {
            let x = Tensor::from_vec(&[1, in_dim], xs[i].clone());
            let f = p.forward(&x);
            if argmax_action(&f.logits.data).index() == ys[i] {
                hits += 1;
            }
        }
        let acc = hits as f64 / n as f64;
        assert!(acc > 0.85, "behavior cloning accuracy {acc}");
    }

    #[test]
    fn zero_budget_training_errors() {
        let cfg = TrainConfig { transitions: 0, ..TrainConfig::default() };
        assert!(matches!(
            train_actor_critic(&EnvConfig::default(), &GenConfig::default(), PolicyKind::Feedforward, &cfg, 0),
            Err(AgentError::ZeroBudget)
        ));
    }

    #[test]
    fn planner_kind_is_not_trainable() {
        let cfg = TrainConfig { transitions: 100, ..TrainConfig::default() };
        assert!(matches!(
            train_actor_critic(&EnvConfig::default(), &GenConfig::default(), PolicyKind::MctsPlanner, &cfg, 0),
            Err(AgentError::UntrainableKind(_))
        ));
    }

    #[test]
    fn feedforward_training_smoke_and_trace_shape() {
        let cfg = TrainConfig { transitions: 3000, log_window: 1000, ..TrainConfig::default() };
        let (policy, log) =
            train_actor_critic(&EnvConfig::default(), &GenConfig::default(), PolicyKind::Feedforward, &cfg, 0)
                .unwrap();
        assert!(!log.windows.is_empty());
        let obs = test_obs();
        let mut st = policy.initial_state();
        let (a1, trace) = act_greedy(&policy, &mut st, &obs, None, 0).unwrap();
        let (a2, _) = act_greedy(&policy, &mut st, &obs, None, 1).unwrap();
        assert_eq!(a1, a2, "greedy action must be deterministic");
        match &trace {
            InnerTrace::Feedforward { layers } => {
                assert_eq!(layers.len(), 2);
                assert_eq!(layers[0].len(), FF_HIDDEN);
            }
            _ => panic!("wrong trace kind"),
        }
        let sel = extract_hidden(&trace, HiddenSelection::AllLayers).unwrap();
        assert_eq!(sel.len(), 2);
        let last = extract_hidden(&trace, HiddenSelection::LastLayer).unwrap();
        assert_eq!(last.len(), 1);
        if let InnerTrace::Feedforward { layers } = &trace {
            assert_eq!(&last[0], layers.last().unwrap());
            assert_eq!(sel, *layers);
        }
        assert!(matches!(
            extract_hidden(&trace, HiddenSelection::AllTicks),
            Err(AgentError::IncompatibleSelection)
        ));
    }

    #[test]
    fn recurrent_training_smoke_and_trace_shape() {
        let cfg = TrainConfig { transitions: 2000, log_window: 1000, ..TrainConfig::default() };
        let (policy, _) =
            train_actor_critic(&EnvConfig::default(), &GenConfig::default(), PolicyKind::Recurrent, &cfg, 0)
                .unwrap();
        let obs = test_obs();
        let mut st = policy.initial_state();
        let (_, trace) = act_greedy(&policy, &mut st, &obs, None, 0).unwrap();
        match &trace {
            InnerTrace::Recurrent { ticks } => {
                assert_eq!(ticks.len(), REC_TICKS);
                assert_eq!(ticks[0].len(), REC_HIDDEN);
            }
            _ => panic!("wrong trace kind"),
        }
        assert_eq!(extract_hidden(&trace, HiddenSelection::AllTicks).unwrap().len(), REC_TICKS);
        assert_eq!(extract_hidden(&trace, HiddenSelection::LastTick).unwrap().len(), 1);
        // Hidden state advances across steps.
        let h_before = st.hidden.clone().unwrap();
        let (_, _) = act_greedy(&policy, &mut st, &obs, None, 0).unwrap();
        assert_ne!(h_before.data, st.hidden.unwrap().data);
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let cfg = TrainConfig { transitions: 500, log_window: 500, ..TrainConfig::default() };
        for kind in [PolicyKind::Feedforward, PolicyKind::Recurrent] {
            let (policy, _) =
                train_actor_critic(&EnvConfig::default(), &GenConfig::default(), kind, &cfg, 3).unwrap();
            let mut buf = Vec::new();
            policy.save(&mut buf).unwrap();
            let back = Policy::load(std::io::BufReader::new(&buf[..])).unwrap();
            let obs = test_obs();
            let mut s1 = policy.initial_state();
            let mut s2 = back.initial_state();
            for _ in 0..3 {
                let (a1, _) = act_greedy(&policy, &mut s1, &obs, None, 0).unwrap();
                let (a2, _) = act_greedy(&back, &mut s2, &obs, None, 0).unwrap();
                assert_eq!(a1, a2);
            }
        }
    }
}
