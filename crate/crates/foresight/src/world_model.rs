//! Learned one-step model of the environment: next observation, reward and
//! done, plus policy-prior and value heads. Used by the explicit planner and
//! by the simulation-based predictor. An oracle adapter wrapping the true
//! dynamics provides the perfect-model upper bound.
//!
//! The model consumes single observations (no recurrence). That is exactly
//! what breaks in the POMDP ablation, which is the intended failure mode.
//! Static planes (walls, targets, blue) are passed through unchanged, so
//! non-reward features like the blue tile are preserved by construction.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{
    step_executed, Action, EnvConfig, EnvState, EnvVariant, ExecutedAction, Level,
    Observation, NUM_ACTIONS, PLANE_BLUE, PLANE_BOX, PLANE_PLAYER, PLANE_TARGET, PLANE_WALL,
};
use crate::nn::ops::{linear_backward, linear_forward, relu_backward, relu_forward, sigmoid};
use crate::nn::params::{ParamId, ParamSet};
use crate::nn::tensor::Tensor;
use crate::nn::Adam;

pub const DISCOUNT: f64 = 0.97;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Default,
    Small,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub capacity: Capacity,
    /// Hidden width; 128 for default capacity, 16 for the small ablation.
    pub hidden: usize,
    /// Unroll horizon L. The model is never unrolled deeper than this.
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl ModelConfig {
    pub fn with_capacity(capacity: Capacity) -> ModelConfig {
        let hidden = match capacity {
            Capacity::Default => 128,
            Capacity::Small => 16,
        };
        ModelConfig { capacity, hidden, horizon: 5, epochs: 20, batch_size: 128, learning_rate: 1e-3 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_capacity(Capacity::Default)
    }
}

/// One logged environment transition used for model training.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub next_obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// Discounted return from this state onward; target for the value head.
    pub value_target: f64,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Decoded next observation (argmax player, top-|boxes| box cells,
    /// static planes copied).
    pub next_obs: Observation,
    /// Player-position distribution over all cells (walls masked to 0).
    pub player_probs: Vec<f64>,
    pub reward: f64,
    pub done_prob: f64,
    pub done: bool,
    /// Policy prior (probabilities) at the decoded next observation.
    pub prior: [f64; NUM_ACTIONS],
    /// Value of the decoded next observation.
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct UnrollStep {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("need at least {need} transitions, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("oracle model requires the default (deterministic) variant")]
    OracleVariant,
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Metadata recorded next to every trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCard {
    pub capacity: Capacity,
    pub seed: u64,
    pub training_transitions: usize,
    pub holdout_player_accuracy: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct ModelDims {
    width: usize,
    height: usize,
    step_limit: u32,
    hidden: usize,
}

/// The learned dynamics + prediction networks.
#[derive(Clone, Debug)]
pub struct LearnedModel {
    pub config: ModelConfig,
    dims: ModelDims,
    store: ParamSet,
    ids: ModelIds,
}

#[derive(Clone, Copy, Debug)]
struct ModelIds {
    d_w1: ParamId,
    d_b1: ParamId,
    d_w2: ParamId,
    d_b2: ParamId,
    h_player_w: ParamId,
    h_player_b: ParamId,
    h_box_w: ParamId,
    h_box_b: ParamId,
    h_rew_w: ParamId,
    h_rew_b: ParamId,
    h_done_w: ParamId,
    h_done_b: ParamId,
    p_w1: ParamId,
    p_b1: ParamId,
    p_w2: ParamId,
    p_b2: ParamId,
    h_prior_w: ParamId,
    h_prior_b: ParamId,
    h_value_w: ParamId,
    h_value_b: ParamId,
}

/// World model: learned network or the oracle adapter over true dynamics.
#[derive(Clone, Debug)]
pub enum WorldModel {
    Learned(LearnedModel),
    Oracle { env: EnvConfig },
}

/// Wrap the true environment dynamics as a perfect model. Refuses the
/// stochastic and POMDP variants: a single deterministic sample would
/// misrepresent them.
pub fn oracle_model(env: EnvConfig) -> Result<WorldModel, ModelError> {
    if env.variant != EnvVariant::Default {
        return Err(ModelError::OracleVariant);
    }
    Ok(WorldModel::Oracle { env })
}

/// Rebuild an [`EnvState`] (and an ephemeral level) from a faithful
/// observation. Only valid for non-jittered observations.
pub fn state_from_observation(obs: &Observation, step_limit: u32) -> EnvState {
    let level = Level {
        level_id: 0,
        gen_seed: 0,
        width: obs.width,
        height: obs.height,
        walls: obs.cells_of_plane(PLANE_WALL),
        targets: obs.cells_of_plane(PLANE_TARGET),
        boxes: obs.cells_of_plane(PLANE_BOX),
        player: obs.shown_player(),
        blue: obs.cells_of_plane(PLANE_BLUE)[0],
    };
    let step_count = (obs.step_frac * step_limit as f64).round() as u32;
    let boxes = level.boxes.iter().copied().collect();
    let player = level.player;
    let solved = level.boxes.iter().all(|b| level.is_target(*b)) && !level.boxes.is_empty();
    EnvState {
        level: Arc::new(level),
        player,
        boxes,
        step_count,
        done: solved || step_count >= step_limit,
        solved,
    }
}

impl WorldModel {
    /// One-step prediction: next observation plus reward/done, and the
    /// prior/value heads evaluated at the decoded next observation.
    pub fn predict(&self, obs: &Observation, action: Action) -> ModelOutput {
        match self {
            WorldModel::Oracle { env } => {
                let state = state_from_observation(obs, env.step_limit);
                let res = step_executed(&state, ExecutedAction::Move(action), env);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let next_obs = crate::gridworld::observe(&res.next, env, &mut rng);
                let n = obs.width * obs.height;
                let mut player_probs = vec![0.0; n];
                player_probs[next_obs.cell_index(res.next.player)] = 1.0;
                ModelOutput {
                    next_obs,
                    player_probs,
                    reward: res.reward,
                    done_prob: if res.done { 1.0 } else { 0.0 },
                    done: res.done,
                    prior: [0.25; NUM_ACTIONS],
                    value: 0.0,
                }
            }
            WorldModel::Learned(m) => m.predict(obs, action),
        }
    }

    /// Policy prior and value at an observation (used at the search root).
    pub fn evaluate(&self, obs: &Observation) -> ([f64; NUM_ACTIONS], f64) {
        match self {
            WorldModel::Oracle { .. } => ([0.25; NUM_ACTIONS], 0.0),
            WorldModel::Learned(m) => m.evaluate(obs),
        }
    }

    /// Iterated one-step predictions, feeding decoded observations back in.
    /// Truncates at the first predicted done (that step is included).
    pub fn unroll(&self, obs: &Observation, actions: &[Action]) -> Vec<UnrollStep> {
        assert!(!actions.is_empty(), "unroll needs at least one action");
        let mut out = Vec::with_capacity(actions.len());
        let mut cur = obs.clone();
        for &a in actions {
            let pred = self.predict(&cur, a);
            out.push(UnrollStep { obs: pred.next_obs.clone(), reward: pred.reward, done: pred.done });
            if pred.done {
                break;
            }
            cur = pred.next_obs;
        }
        out
    }

    pub fn capacity(&self) -> Capacity {
        match self {
            WorldModel::Oracle { .. } => Capacity::Default,
            WorldModel::Learned(m) => m.config.capacity,
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        match self {
            WorldModel::Oracle { .. } => panic!("oracle model has no checkpoint"),
            WorldModel::Learned(m) => {
                let header = serde_json::json!({
                    "kind": "learned_world_model",
                    "config": m.config,
                    "dims": m.dims,
                });
                serde_json::to_writer(&mut w, &header)?;
                w.write_all(b"\n")?;
                m.store.save(&mut w)?;
                Ok(())
            }
        }
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<WorldModel, ModelError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: serde_json::Value = serde_json::from_str(&line)?;
        let config: ModelConfig = serde_json::from_value(header["config"].clone())?;
        let dims: ModelDims = serde_json::from_value(header["dims"].clone())?;
        let mut m = LearnedModel::new(config, dims, 0);
        m.store.load(r)?;
        Ok(WorldModel::Learned(m))
    }
}

impl LearnedModel {
    fn new(config: ModelConfig, dims: ModelDims, seed: u64) -> LearnedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamSet::new();
        let n = dims.width * dims.height;
        let obs_len = crate::gridworld::NUM_PLANES * n + 1;
        let dyn_in = obs_len + NUM_ACTIONS;
        let h = dims.hidden;
        let ids = ModelIds {
            d_w1: store.add_linear_init("dyn.w1", &[dyn_in, h], dyn_in, &mut rng),
            d_b1: store.add("dyn.b1", Tensor::zeros(&[h])),
            d_w2: store.add_linear_init("dyn.w2", &[h, h], h, &mut rng),
            d_b2: store.add("dyn.b2", Tensor::zeros(&[h])),
            h_player_w: store.add_linear_init("head.player.w", &[h, n], h, &mut rng),
            h_player_b: store.add("head.player.b", Tensor::zeros(&[n])),
            h_box_w: store.add_linear_init("head.box.w", &[h, n], h, &mut rng),
            h_box_b: store.add("head.box.b", Tensor::zeros(&[n])),
            h_rew_w: store.add_linear_init("head.reward.w", &[h, 1], h, &mut rng),
            h_rew_b: store.add("head.reward.b", Tensor::zeros(&[1])),
            h_done_w: store.add_linear_init("head.done.w", &[h, 1], h, &mut rng),
            h_done_b: store.add("head.done.b", Tensor::zeros(&[1])),
            p_w1: store.add_linear_init("pred.w1", &[obs_len, h], obs_len, &mut rng),
            p_b1: store.add("pred.b1", Tensor::zeros(&[h])),
            p_w2: store.add_linear_init("pred.w2", &[h, h], h, &mut rng),
            p_b2: store.add("pred.b2", Tensor::zeros(&[h])),
            h_prior_w: store.add_linear_init("head.prior.w", &[h, NUM_ACTIONS], h, &mut rng),
            h_prior_b: store.add("head.prior.b", Tensor::zeros(&[NUM_ACTIONS])),
            h_value_w: store.add_linear_init("head.value.w", &[h, 1], h, &mut rng),
            h_value_b: store.add("head.value.b", Tensor::zeros(&[1])),
        };
        LearnedModel { config, dims, store, ids }
    }

    fn dyn_features(&self, obs: &Observation, action: Action) -> Vec<f64> {
        let mut x = obs.to_features();
        let mut onehot = [0.0; NUM_ACTIONS];
        onehot[action.index()] = 1.0;
        x.extend_from_slice(&onehot);
        x
    }

    /// Forward the dynamics trunk for a batch; returns hidden plus caches.
    fn dyn_forward(&self, x: &Tensor) -> (Tensor, DynCache) {
        let (a1, c1) = linear_forward(x, self.store.value(self.ids.d_w1), self.store.value(self.ids.d_b1));
        let (r1, cr1) = relu_forward(&a1);
        let (a2, c2) = linear_forward(&r1, self.store.value(self.ids.d_w2), self.store.value(self.ids.d_b2));
        let (h, cr2) = relu_forward(&a2);
        (h, DynCache { c1, cr1, c2, cr2 })
    }

    fn pred_forward(&self, x: &Tensor) -> (Tensor, DynCache) {
        let (a1, c1) = linear_forward(x, self.store.value(self.ids.p_w1), self.store.value(self.ids.p_b1));
        let (r1, cr1) = relu_forward(&a1);
        let (a2, c2) = linear_forward(&r1, self.store.value(self.ids.p_w2), self.store.value(self.ids.p_b2));
        let (h, cr2) = relu_forward(&a2);
        (h, DynCache { c1, cr1, c2, cr2 })
    }

    pub fn predict(&self, obs: &Observation, action: Action) -> ModelOutput {
        let n = obs.width * obs.height;
        let x = Tensor::from_vec(&[1, obs.feature_len() + NUM_ACTIONS], self.dyn_features(obs, action));
        let (h, _) = self.dyn_forward(&x);
        let (player_logits, _) = linear_forward(&h, self.store.value(self.ids.h_player_w), self.store.value(self.ids.h_player_b));
        let (box_logits, _) = linear_forward(&h, self.store.value(self.ids.h_box_w), self.store.value(self.ids.h_box_b));
        let (rew, _) = linear_forward(&h, self.store.value(self.ids.h_rew_w), self.store.value(self.ids.h_rew_b));
        let (done_logit, _) = linear_forward(&h, self.store.value(self.ids.h_done_w), self.store.value(self.ids.h_done_b));

        // Player distribution: softmax over floor cells only.
        let wall_plane = obs.plane(PLANE_WALL).to_vec();
        let mut masked = player_logits.data.clone();
        for i in 0..n {
            if wall_plane[i] == 1 {
                masked[i] = f64::NEG_INFINITY;
            }
        }
        let mx = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut player_probs = vec![0.0; n];
        let mut z = 0.0;
        for i in 0..n {
            if masked[i].is_finite() {
                player_probs[i] = (masked[i] - mx).exp();
                z += player_probs[i];
            }
        }
        player_probs.iter_mut().for_each(|p| *p /= z);

        let next_obs = self.decode_next(obs, &player_probs, &box_logits.data);
        let reward = rew.data[0];
        let done_prob = sigmoid(done_logit.data[0]);
        let done = done_prob > 0.5;
        let (prior, value) = self.evaluate(&next_obs);
        ModelOutput { next_obs, player_probs, reward, done_prob, done, prior, value }
    }

    pub fn evaluate(&self, obs: &Observation) -> ([f64; NUM_ACTIONS], f64) {
        let x = Tensor::from_vec(&[1, obs.feature_len()], obs.to_features());
        let (h, _) = self.pred_forward(&x);
        let (prior_logits, _) = linear_forward(&h, self.store.value(self.ids.h_prior_w), self.store.value(self.ids.h_prior_b));
        let (value, _) = linear_forward(&h, self.store.value(self.ids.h_value_w), self.store.value(self.ids.h_value_b));
        let p = crate::nn::softmax_rows(&prior_logits);
        let mut prior = [0.0; NUM_ACTIONS];
        prior.copy_from_slice(&p.data);
        (prior, value.data[0])
    }

    /// Decode the next observation: argmax player over floor cells,
    /// top-|boxes| box cells (excluding the player cell), static planes
    /// copied, step fraction advanced by one step.
    fn decode_next(&self, obs: &Observation, player_probs: &[f64], box_logits: &[f64]) -> Observation {
        let n = obs.width * obs.height;
        let wall = obs.plane(PLANE_WALL);
        let player_idx = (0..n)
            .max_by(|&a, &b| player_probs[a].partial_cmp(&player_probs[b]).unwrap())
            .unwrap();
        let num_boxes = obs.plane(PLANE_BOX).iter().filter(|&&b| b == 1).count();
        let mut box_cells: Vec<usize> = (0..n).filter(|&i| wall[i] == 0 && i != player_idx).collect();
        box_cells.sort_by(|&a, &b| box_logits[b].partial_cmp(&box_logits[a]).unwrap().then(a.cmp(&b)));
        box_cells.truncate(num_boxes);

        let mut planes = vec![0u8; crate::gridworld::NUM_PLANES * n];
        let src = &obs.planes;
        planes[PLANE_WALL * n..PLANE_WALL * n + n].copy_from_slice(&src[PLANE_WALL * n..PLANE_WALL * n + n]);
        planes[crate::gridworld::PLANE_FLOOR * n..crate::gridworld::PLANE_FLOOR * n + n]
            .copy_from_slice(&src[crate::gridworld::PLANE_FLOOR * n..crate::gridworld::PLANE_FLOOR * n + n]);
        planes[PLANE_TARGET * n..PLANE_TARGET * n + n].copy_from_slice(&src[PLANE_TARGET * n..PLANE_TARGET * n + n]);
        planes[PLANE_BLUE * n..PLANE_BLUE * n + n].copy_from_slice(&src[PLANE_BLUE * n..PLANE_BLUE * n + n]);
        planes[PLANE_PLAYER * n + player_idx] = 1;
        for i in box_cells {
            planes[PLANE_BOX * n + i] = 1;
        }
        Observation {
            width: obs.width,
            height: obs.height,
            planes,
            step_frac: obs.step_frac + 1.0 / self.dims.step_limit as f64,
        }
    }
}

struct DynCache {
    c1: crate::nn::ops::LinearCache,
    cr1: crate::nn::ops::ReluCache,
    c2: crate::nn::ops::LinearCache,
    cr2: crate::nn::ops::ReluCache,
}

/// Train a world model on logged transitions. The summed loss is
/// cross-entropy on the player position (walls masked), per-cell binary
/// cross-entropy on boxes, squared error on reward and value, and binary
/// cross-entropy on done plus cross-entropy on the behavior policy prior.
pub fn train_model(
    transitions: &[Transition],
    config: &ModelConfig,
    step_limit: u32,
    seed: u64,
) -> Result<WorldModel, ModelError> {
    const MIN_TRANSITIONS: usize = 1000;
    if transitions.len() < MIN_TRANSITIONS {
        return Err(ModelError::InsufficientData { need: MIN_TRANSITIONS, got: transitions.len() });
    }
    let first = &transitions[0].obs;
    let dims = ModelDims { width: first.width, height: first.height, step_limit, hidden: config.hidden };
    let mut model = LearnedModel::new(*config, dims, seed);
    let n = dims.width * dims.height;
    let obs_len = first.feature_len();

    // Pack features/targets once.
    let dyn_feats: Vec<Vec<f64>> = transitions.iter().map(|t| model.dyn_features(&t.obs, t.action)).collect();
    let pred_feats: Vec<Vec<f64>> = transitions.iter().map(|t| t.obs.to_features()).collect();
    let player_targets: Vec<usize> = transitions.iter().map(|t| t.next_obs.cell_index(t.next_obs.shown_player())).collect();
    let wall_masks: Vec<Vec<u8>> = transitions.iter().map(|t| t.obs.plane(PLANE_WALL).to_vec()).collect();
    let box_targets: Vec<Vec<u8>> = transitions.iter().map(|t| t.next_obs.plane(PLANE_BOX).to_vec()).collect();

    let mut adam = Adam::new(&model.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..transitions.len()).collect();
    let ids = model.ids;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let bsz = batch.len();
            // Assemble batch tensors.
            let mut xd = Vec::with_capacity(bsz * (obs_len + NUM_ACTIONS));
            let mut xp = Vec::with_capacity(bsz * obs_len);
            for &i in batch {
                xd.extend_from_slice(&dyn_feats[i]);
                xp.extend_from_slice(&pred_feats[i]);
            }
            let xd = Tensor::from_vec(&[bsz, obs_len + NUM_ACTIONS], xd);
            let xp = Tensor::from_vec(&[bsz, obs_len], xp);

            model.store.zero_grads();
            let (h, dc) = model.dyn_forward(&xd);
            let (hp, pc) = model.pred_forward(&xp);

            let (player_logits, c_pl) = linear_forward(&h, model.store.value(ids.h_player_w), model.store.value(ids.h_player_b));
            let (box_logits, c_bx) = linear_forward(&h, model.store.value(ids.h_box_w), model.store.value(ids.h_box_b));
            let (rew, c_rw) = linear_forward(&h, model.store.value(ids.h_rew_w), model.store.value(ids.h_rew_b));
            let (done_logit, c_dn) = linear_forward(&h, model.store.value(ids.h_done_w), model.store.value(ids.h_done_b));
            let (prior_logits, c_pr) = linear_forward(&hp, model.store.value(ids.h_prior_w), model.store.value(ids.h_prior_b));
            let (value, c_vl) = linear_forward(&hp, model.store.value(ids.h_value_w), model.store.value(ids.h_value_b));

            let mut loss = 0.0;
            // Player CE with wall mask.
            let mut g_player = Tensor::zeros(&[bsz, n]);
            for (r, &i) in batch.iter().enumerate() {
                let row = &player_logits.data[r * n..(r + 1) * n];
                let mask = &wall_masks[i];
                let mx = (0..n).filter(|&j| mask[j] == 0).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    if mask[j] == 0 {
                        z += (row[j] - mx).exp();
                    }
                }
                let log_z = mx + z.ln();
                let label = player_targets[i];
                loss += (log_z - row[label]) / bsz as f64;
                for j in 0..n {
                    if mask[j] == 0 {
                        let p = (row[j] - log_z).exp();
                        g_player.data[r * n + j] = (p - if j == label { 1.0 } else { 0.0 }) / bsz as f64;
                    }
                }
            }
            // Box BCE over floor cells.
            let mut g_box = Tensor::zeros(&[bsz, n]);
            for (r, &i) in batch.iter().enumerate() {
                let mask = &wall_masks[i];
                let tgt = &box_targets[i];
                let floor_count = mask.iter().filter(|&&m| m == 0).count().max(1);
                let denom = (bsz * floor_count) as f64;
                for j in 0..n {
                    if mask[j] == 0 {
                        let x = box_logits.data[r * n + j];
                        let zt = tgt[j] as f64;
                        loss += (x.max(0.0) - x * zt + (-x.abs()).exp().ln_1p()) / denom;
                        g_box.data[r * n + j] = (sigmoid(x) - zt) / denom;
                    }
                }
            }
            // Reward MSE.
            let mut g_rew = Tensor::zeros(&[bsz, 1]);
            for (r, &i) in batch.iter().enumerate() {
                let d = rew.data[r] - transitions[i].reward;
                loss += d * d / bsz as f64;
                g_rew.data[r] = 2.0 * d / bsz as f64;
            }
            // Done BCE.
            let mut g_done = Tensor::zeros(&[bsz, 1]);
            for (r, &i) in batch.iter().enumerate() {
                let x = done_logit.data[r];
                let zt = transitions[i].done as u8 as f64;
                loss += (x.max(0.0) - x * zt + (-x.abs()).exp().ln_1p()) / bsz as f64;
                g_done.data[r] = (sigmoid(x) - zt) / bsz as f64;
            }
            // Prior CE (behavior action) on the prediction net.
            let labels: Vec<usize> = batch.iter().map(|&i| transitions[i].action.index()).collect();
            let (prior_loss, g_prior) = crate::nn::cross_entropy_loss(&prior_logits, &labels).expect("prior labels");
            loss += prior_loss;
            // Value MSE (weight 0.25 to keep the solve bonus from dominating).
            let mut g_val = Tensor::zeros(&[bsz, 1]);
            for (r, &i) in batch.iter().enumerate() {
                let d = value.data[r] - transitions[i].value_target;
                loss += 0.25 * d * d / bsz as f64;
                g_val.data[r] = 0.5 * d / bsz as f64;
            }

            if !loss.is_finite() {
                return Err(ModelError::Divergence { epoch });
            }
            epoch_loss += loss;

            // Backward through heads into the trunks.
            let take = |store: &mut ParamSet, id: ParamId| std::mem::replace(store.grad_mut(id), Tensor::zeros(&[0]));
            let mut gh = Tensor::zeros(&h.shape);
            let mut ghp = Tensor::zeros(&hp.shape);
            for (cache, wid, bid, g, into_pred) in [
                (&c_pl, ids.h_player_w, ids.h_player_b, &g_player, false),
                (&c_bx, ids.h_box_w, ids.h_box_b, &g_box, false),
                (&c_rw, ids.h_rew_w, ids.h_rew_b, &g_rew, false),
                (&c_dn, ids.h_done_w, ids.h_done_b, &g_done, false),
                (&c_pr, ids.h_prior_w, ids.h_prior_b, &g_prior, true),
                (&c_vl, ids.h_value_w, ids.h_value_b, &g_val, true),
            ] {
                let mut gw = take(&mut model.store, wid);
                let mut gb = take(&mut model.store, bid);
                let gx = linear_backward(cache, model.store.value(wid), g, &mut gw, &mut gb);
                *model.store.grad_mut(wid) = gw;
                *model.store.grad_mut(bid) = gb;
                let dst = if into_pred { &mut ghp } else { &mut gh };
                for (a, b) in dst.data.iter_mut().zip(&gx.data) {
                    *a += b;
                }
            }
            // Dyn trunk backward.
            let g2 = relu_backward(&dc.cr2, &gh);
            let mut gw = take(&mut model.store, ids.d_w2);
            let mut gb = take(&mut model.store, ids.d_b2);
            let g1 = linear_backward(&dc.c2, model.store.value(ids.d_w2), &g2, &mut gw, &mut gb);
            *model.store.grad_mut(ids.d_w2) = gw;
            *model.store.grad_mut(ids.d_b2) = gb;
            let g0 = relu_backward(&dc.cr1, &g1);
            let mut gw = take(&mut model.store, ids.d_w1);
            let mut gb = take(&mut model.store, ids.d_b1);
            linear_backward(&dc.c1, model.store.value(ids.d_w1), &g0, &mut gw, &mut gb);
            *model.store.grad_mut(ids.d_w1) = gw;
            *model.store.grad_mut(ids.d_b1) = gb;
            // Pred trunk backward.
            let g2 = relu_backward(&pc.cr2, &ghp);
            let mut gw = take(&mut model.store, ids.p_w2);
            let mut gb = take(&mut model.store, ids.p_b2);
            let g1 = linear_backward(&pc.c2, model.store.value(ids.p_w2), &g2, &mut gw, &mut gb);
            *model.store.grad_mut(ids.p_w2) = gw;
            *model.store.grad_mut(ids.p_b2) = gb;
            let g0 = relu_backward(&pc.cr1, &g1);
            let mut gw = take(&mut model.store, ids.p_w1);
            let mut gb = take(&mut model.store, ids.p_b1);
            linear_backward(&pc.c1, model.store.value(ids.p_w1), &g0, &mut gw, &mut gb);
            *model.store.grad_mut(ids.p_w1) = gw;
            *model.store.grad_mut(ids.p_b1) = gb;

            adam.step(&mut model.store);
        }
        let _ = epoch_loss;
    }
    Ok(WorldModel::Learned(model))
}

/// Fraction of held-out transitions whose decoded next player cell matches
/// the true one.
pub fn one_step_player_accuracy(model: &WorldModel, holdout: &[Transition]) -> f64 {
    if holdout.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for t in holdout {
        let pred = model.predict(&t.obs, t.action);
        if pred.next_obs.shown_player() == t.next_obs.shown_player() {
            hits += 1;
        }
    }
    hits as f64 / holdout.len() as f64
}

/// Mean summed per-transition loss proxy on held-out data: player NLL plus
/// box/done BCE and reward squared error. Used for the capacity comparison.
pub fn holdout_loss(model: &WorldModel, holdout: &[Transition]) -> f64 {
    let mut total = 0.0;
    for t in holdout {
        let pred = model.predict(&t.obs, t.action);
        let n = t.obs.width * t.obs.height;
        let label = t.next_obs.cell_index(t.next_obs.shown_player());
        total += -(pred.player_probs[label].max(1e-12)).ln();
        let d = pred.reward - t.reward;
        total += d * d;
        let zt = t.done as u8 as f64;
        let p = pred.done_prob.clamp(1e-12, 1.0 - 1e-12);
        total += -(zt * p.ln() + (1.0 - zt) * (1.0 - p).ln());
        // Box planes via decoded observation (0/1 mismatch count as a proxy).
        let pb = pred.next_obs.plane(PLANE_BOX);
        let tb = t.next_obs.plane(PLANE_BOX);
        let mism = (0..n).filter(|&i| pb[i] != tb[i]).count();
        total += mism as f64;
    }
    total / holdout.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_level, observe, reset, step, GenConfig, ALL_ACTIONS};

    fn default_env() -> EnvConfig {
        EnvConfig::default()
    }

    /// Random-walk transitions for cheap model-training tests.
    pub fn random_walk_transitions(n: usize, seed: u64, env: &EnvConfig) -> Vec<Transition> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = GenConfig::default();
        let mut out = Vec::with_capacity(n);
        let mut level_seed = seed.wrapping_mul(31).wrapping_add(1);
        while out.len() < n {
            let level = Arc::new(generate_level(level_seed, &gen).unwrap());
            level_seed = level_seed.wrapping_add(1);
            let (mut state, mut obs) = reset(&level, env, level_seed);
            let mut episode: Vec<Transition> = Vec::new();
            while !state.done {
                let a = ALL_ACTIONS[rng.gen_range(0..4)];
                let res = step(&state, a, env, &mut rng);
                let next_obs = observe(&res.next, env, &mut rng);
                episode.push(Transition {
                    obs: obs.clone(),
                    action: a,
                    next_obs: next_obs.clone(),
                    reward: res.reward,
                    done: res.done,
                    value_target: 0.0,
                });
                state = res.next;
                obs = next_obs;
            }
            // Discounted returns backwards.
            let mut g = 0.0;
            for t in episode.iter_mut().rev() {
                g = t.reward + DISCOUNT * g;
                t.value_target = g;
            }
            out.extend(episode);
        }
        out.truncate(n);
        out
    }

    #[test]
    fn oracle_refuses_stochastic_variants() {
        assert!(oracle_model(EnvConfig::with_variant(EnvVariant::StochasticNoop)).is_err());
        assert!(oracle_model(EnvConfig::with_variant(EnvVariant::PomdpJitter)).is_err());
        assert!(oracle_model(default_env()).is_ok());
    }

    #[test]
    fn oracle_predict_matches_true_env() {
        let env = default_env();
        let model = oracle_model(env).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10u64 {
            let level = Arc::new(generate_level(seed, &GenConfig::default()).unwrap());
            let (state, obs) = reset(&level, &env, 0);
            for a in ALL_ACTIONS {
                let pred = model.predict(&obs, a);
                let res = step(&state, a, &env, &mut rng);
                let true_next = observe(&res.next, &env, &mut rng);
                assert_eq!(pred.next_obs, true_next);
                assert_eq!(pred.reward, res.reward);
                assert_eq!(pred.done, res.done);
            }
        }
    }

    #[test]
    fn oracle_unroll_matches_true_rollout() {
        use rand::Rng;
        let env = default_env();
        let model = oracle_model(env).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10u64 {
            let level = Arc::new(generate_level(seed, &GenConfig::default()).unwrap());
            let (mut state, obs) = reset(&level, &env, 0);
            let actions: Vec<Action> = (0..5).map(|_| ALL_ACTIONS[rng.gen_range(0..4)]).collect();
            let unrolled = model.unroll(&obs, &actions);
            let mut truth = Vec::new();
            for &a in &actions {
                let res = step(&state, a, &env, &mut rng);
                truth.push((observe(&res.next, &env, &mut rng), res.reward, res.done));
                state = res.next;
                if res.done {
                    break;
                }
            }
            assert_eq!(unrolled.len(), truth.len());
            for (u, (o, r, d)) in unrolled.iter().zip(&truth) {
                assert_eq!(&u.obs, o);
                assert_eq!(u.reward, *r);
                assert_eq!(u.done, *d);
            }
        }
    }

    #[test]
    fn unroll_k1_equals_predict() {
        let env = default_env();
        let model = oracle_model(env).unwrap();
        let level = Arc::new(generate_level(2, &GenConfig::default()).unwrap());
        let (_, obs) = reset(&level, &env, 0);
        let u = model.unroll(&obs, &[Action::Left]);
        let p = model.predict(&obs, Action::Left);
        assert_eq!(u.len(), 1);
        assert_eq!(u[0].obs, p.next_obs);
        assert_eq!(u[0].reward, p.reward);
    }

    #[test]
    fn insufficient_data_is_an_error() {
        let env = default_env();
        let transitions = random_walk_transitions(50, 0, &env);
        let cfg = ModelConfig::default();
        assert!(matches!(
            train_model(&transitions, &cfg, env.step_limit, 0),
            Err(ModelError::InsufficientData { .. })
        ));
    }

    #[test]
    fn learned_model_static_passthrough_and_determinism() {
        let env = default_env();
        let transitions = random_walk_transitions(1200, 3, &env);
        let cfg = ModelConfig { epochs: 2, ..ModelConfig::default() };
        let model = train_model(&transitions, &cfg, env.step_limit, 7).unwrap();
        let level = Arc::new(generate_level(40, &GenConfig::default()).unwrap());
        let (_, obs) = reset(&level, &env, 0);
        for a in ALL_ACTIONS {
            let p1 = model.predict(&obs, a);
            let p2 = model.predict(&obs, a);
            assert_eq!(p1.next_obs, p2.next_obs);
            assert_eq!(p1.reward, p2.reward);
            // Static planes pass through unchanged.
            for plane in [PLANE_WALL, crate::gridworld::PLANE_FLOOR, PLANE_TARGET, PLANE_BLUE] {
                assert_eq!(p1.next_obs.plane(plane), obs.plane(plane), "plane {plane} changed");
            }
            // Player distribution sums to 1 and avoids walls.
            let s: f64 = p1.player_probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let n = obs.width * obs.height;
            for i in 0..n {
                if obs.plane(PLANE_WALL)[i] == 1 {
                    assert_eq!(p1.player_probs[i], 0.0);
                }
            }
            // Box count conserved by decoding.
            assert_eq!(
                p1.next_obs.plane(PLANE_BOX).iter().filter(|&&b| b == 1).count(),
                obs.plane(PLANE_BOX).iter().filter(|&&b| b == 1).count()
            );
        }
    }

    #[test]
    fn learned_model_learns_one_step_dynamics() {
        let env = default_env();
        let transitions = random_walk_transitions(12000, 11, &env);
        let (train, holdout) = transitions.split_at(10000);
        let cfg = ModelConfig::default();
        let model = train_model(train, &cfg, env.step_limit, 1).unwrap();
        let acc = one_step_player_accuracy(&model, holdout);
        assert!(acc >= 0.93, "one-step player accuracy too low: {acc}");
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let env = default_env();
        let transitions = random_walk_transitions(1200, 3, &env);
        let cfg = ModelConfig { epochs: 1, hidden: 32, ..ModelConfig::default() };
        let model = train_model(&transitions, &cfg, env.step_limit, 7).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = WorldModel::load(std::io::BufReader::new(&buf[..])).unwrap();
        let level = Arc::new(generate_level(8, &GenConfig::default()).unwrap());
        let (_, obs) = reset(&level, &env, 0);
        for a in ALL_ACTIONS {
            let p1 = model.predict(&obs, a);
            let p2 = back.predict(&obs, a);
            assert_eq!(p1.next_obs, p2.next_obs);
            assert_eq!(p1.reward, p2.reward);
            assert_eq!(p1.value, p2.value);
        }
    }
}
