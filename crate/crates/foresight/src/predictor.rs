//! Supervised predictors of agent behavior: an action predictor producing
//! the next-L action distributions and an event predictor producing the
//! probability that the blue-tile event fires within L steps. Both consume
//! a token sequence — the current (observation, committed action) plus the
//! configured auxiliary information — through a small attention encoder.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{act_greedy, AgentError, Policy};
use crate::auxinfo::{enumerate_future, AuxError, AuxInfo};
use crate::datagen::{compute_aux, AuxMode, DataError, Dataset, Record, HORIZON};
use crate::gridworld::{
    generate_level, observe, reset, step, EnvConfig, GenConfig, GridError, NUM_ACTIONS,
};
use crate::nn::ops::{linear_backward, linear_forward, LinearCache};
use crate::nn::params::{ParamId, ParamSet};
use crate::nn::tensor::Tensor;
use crate::nn::{bce_loss, cross_entropy_loss, sigmoid, Adam, EncoderBlock, LossError};
use crate::world_model::WorldModel;

#[derive(Debug, Error)]
pub enum PredError {
    #[error("dataset has no labeled records")]
    EmptyDataset,
    #[error("record aux {record:?} does not match predictor aux {config:?}")]
    AuxMismatch { record: &'static str, config: AuxMode },
    #[error("non-finite loss during training")]
    Divergence,
    #[error("sequence of {got} tokens exceeds the predictor's maximum {max}")]
    TooManyTokens { got: usize, max: usize },
    #[error("hidden vector width {got} does not match the predictor's {expected}")]
    HiddenWidth { got: usize, expected: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Aux(#[from] AuxError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("level generation: {0}")]
    Grid(#[from] GridError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Checkpoint(#[from] crate::nn::CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Predict the next L actions.
    Action,
    /// Predict whether the event fires within L steps.
    Event,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub task: Task,
    pub aux: AuxMode,
    pub l: usize,
    /// Encoder blocks.
    pub depth: usize,
    /// Token embedding width.
    pub width: usize,
    /// Encoder MLP hidden width.
    pub mlp_hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Consecutive non-improving validation evals before halting.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl PredictorConfig {
    pub fn new(task: Task, aux: AuxMode, seed: u64) -> PredictorConfig {
        PredictorConfig {
            task,
            aux,
            l: HORIZON,
            depth: 2,
            width: 64,
            mlp_hidden: 256,
            batch_size: 128,
            learning_rate: 1e-4,
            patience: 10,
            max_epochs: 100,
            seed,
        }
    }
}

/// Raw input widths for the token kinds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TokenDims {
    /// Observation features + committed-action one-hot.
    pub state: usize,
    /// Observation features + action one-hot + reward.
    pub rollout: usize,
    /// Action one-hot + reward + depth fraction, when rollouts are present.
    /// Kept separate from the observation-heavy rollout token so the action
    /// identity stays salient instead of being 4 of ~220 input dims.
    pub action: Option<usize>,
    /// Hidden-vector width, when the aux mode carries hidden vectors.
    pub hidden: Option<usize>,
}

/// Width of an action token: one-hot + reward + depth fraction.
pub const ACTION_TOKEN_DIM: usize = NUM_ACTIONS + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    State,
    Rollout,
    Action,
    Hidden,
}

/// One record turned into predictor input: per-token raw features. The
/// boolean mask is implied by the length (all listed tokens are valid).
pub struct TokenSeq {
    pub tokens: Vec<(TokenKind, Vec<f64>)>,
}

fn state_features(r: &Record) -> Vec<f64> {
    let mut v = r.observation.to_features();
    let mut onehot = [0.0; NUM_ACTIONS];
    onehot[r.action.index()] = 1.0;
    v.extend_from_slice(&onehot);
    v
}

fn push_rollout_step(
    tokens: &mut Vec<(TokenKind, Vec<f64>)>,
    s: &crate::agents::RolloutStep,
    depth: usize,
    l: usize,
) {
    let mut onehot = [0.0; NUM_ACTIONS];
    onehot[s.action.index()] = 1.0;
    let mut v = s.obs.to_features();
    v.extend_from_slice(&onehot);
    v.push(s.reward);
    tokens.push((TokenKind::Rollout, v));
    let mut a = onehot.to_vec();
    a.push(s.reward);
    a.push(depth as f64 / l.max(1) as f64);
    tokens.push((TokenKind::Action, a));
}

/// Token 0 is always the encoded (observation, committed action); the
/// remaining tokens depend on the aux mode: none for the baseline, an
/// observation token plus a compact action token per rollout step for
/// plan/simulation aux, one token per hidden vector otherwise.
pub fn build_inputs(record: &Record, config: &PredictorConfig) -> Result<TokenSeq, PredError> {
    let mut tokens = vec![(TokenKind::State, state_features(record))];
    let mismatch = |record: &'static str| PredError::AuxMismatch { record, config: config.aux };
    match (&record.aux, config.aux) {
        (AuxInfo::None, AuxMode::Baseline) => {}
        (AuxInfo::InnerPlan { rollouts, .. }, AuxMode::InnerPlan { .. }) => {
            for r in rollouts {
                for (j, s) in r.steps.iter().enumerate() {
                    push_rollout_step(&mut tokens, s, j, config.l);
                }
            }
        }
        (AuxInfo::InnerHidden { vectors, .. }, AuxMode::InnerHidden { .. }) => {
            for v in vectors {
                tokens.push((TokenKind::Hidden, v.clone()));
            }
        }
        (AuxInfo::SimRollout(r), AuxMode::Simulation) => {
            for (j, s) in r.steps.iter().enumerate() {
                push_rollout_step(&mut tokens, s, j, config.l);
            }
        }
        (AuxInfo::None, _) => return Err(mismatch("none")),
        (AuxInfo::InnerPlan { .. }, _) => return Err(mismatch("inner_plan")),
        (AuxInfo::InnerHidden { .. }, _) => return Err(mismatch("inner_hidden")),
        (AuxInfo::SimRollout(_), _) => return Err(mismatch("sim_rollout")),
    }
    Ok(TokenSeq { tokens })
}

/// Model outputs for one record.
#[derive(Clone, Debug)]
pub enum PredictionOutput {
    /// L probability vectors over the four actions; each sums to 1.
    Actions(Vec<[f64; NUM_ACTIONS]>),
    /// Probability in (0, 1) that the event fires within L steps.
    Event(f64),
}

pub struct Predictor {
    pub config: PredictorConfig,
    pub dims: TokenDims,
    pub max_tokens: usize,
    store: ParamSet,
    blocks: Vec<EncoderBlock>,
    proj_state: (ParamId, ParamId),
    proj_roll: (ParamId, ParamId),
    proj_action: Option<(ParamId, ParamId)>,
    proj_hidden: Option<(ParamId, ParamId)>,
    pos: ParamId,
    /// Per-head learned query vectors: each head attention-pools the final
    /// token embeddings with its own query, so a head can read a specific
    /// rollout/hidden token directly instead of routing everything through
    /// the state token. With a single token this reduces to reading it.
    queries: Vec<ParamId>,
    /// L action heads, or a single entry for the event task.
    heads: Vec<(ParamId, ParamId)>,
}

impl Predictor {
    pub fn new(config: PredictorConfig, dims: TokenDims, max_tokens: usize) -> Predictor {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamSet::new();
        let w = config.width;
        let proj_state = (
            store.add_linear_init("pred.proj_state.w", &[dims.state, w], dims.state, &mut rng),
            store.add("pred.proj_state.b", Tensor::zeros(&[w])),
        );
        let proj_roll = (
            store.add_linear_init("pred.proj_roll.w", &[dims.rollout, w], dims.rollout, &mut rng),
            store.add("pred.proj_roll.b", Tensor::zeros(&[w])),
        );
        let proj_action = dims.action.map(|d| {
            (
                store.add_linear_init("pred.proj_action.w", &[d, w], d, &mut rng),
                store.add("pred.proj_action.b", Tensor::zeros(&[w])),
            )
        });
        let proj_hidden = dims.hidden.map(|d| {
            (
                store.add_linear_init("pred.proj_hidden.w", &[d, w], d, &mut rng),
                store.add("pred.proj_hidden.b", Tensor::zeros(&[w])),
            )
        });
        let pos = store.add("pred.pos", Tensor::zeros(&[max_tokens, w]));
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(&format!("pred.enc{i}"), w, config.mlp_hidden, &mut store, &mut rng))
            .collect();
        let head_count = match config.task {
            Task::Action => config.l,
            Task::Event => 1,
        };
        let head_width = match config.task {
            Task::Action => NUM_ACTIONS,
            Task::Event => 1,
        };
        let queries = (0..head_count)
            .map(|i| store.add_linear_init(&format!("pred.head{i}.q"), &[w], w, &mut rng))
            .collect();
        let heads = (0..head_count)
            .map(|i| {
                (
                    store.add_linear_init(&format!("pred.head{i}.w"), &[w, head_width], w, &mut rng),
                    store.add(&format!("pred.head{i}.b"), Tensor::zeros(&[head_width])),
                )
            })
            .collect();
        Predictor {
            config,
            dims,
            max_tokens,
            store,
            blocks,
            proj_state,
            proj_roll,
            proj_action,
            proj_hidden,
            pos,
            queries,
            heads,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn forward_batch(&self, seqs: &[TokenSeq]) -> Result<BatchForward, PredError> {
        let b = seqs.len();
        let (t_max, w) = (self.max_tokens, self.config.width);
        // Gather raw features per token kind.
        let mut rows: [Vec<(usize, usize)>; 4] = Default::default();
        let mut raw: [Vec<f64>; 4] = Default::default();
        let mut mask = Tensor::zeros(&[b, t_max]);
        for (bi, seq) in seqs.iter().enumerate() {
            if seq.tokens.len() > t_max {
                return Err(PredError::TooManyTokens { got: seq.tokens.len(), max: t_max });
            }
            for (ti, (kind, feats)) in seq.tokens.iter().enumerate() {
                let (slot, want) = match kind {
                    TokenKind::State => (0, self.dims.state),
                    TokenKind::Rollout => (1, self.dims.rollout),
                    TokenKind::Action => (2, self.dims.action.unwrap_or(0)),
                    TokenKind::Hidden => (3, self.dims.hidden.unwrap_or(0)),
                };
                if feats.len() != want {
                    return Err(PredError::HiddenWidth { got: feats.len(), expected: want });
                }
                rows[slot].push((bi, ti));
                raw[slot].extend_from_slice(feats);
                mask.data[bi * t_max + ti] = 1.0;
            }
        }
        // Project each kind and scatter into the embedding tensor.
        let mut emb = Tensor::zeros(&[b, t_max, w]);
        let mut proj_caches: [Option<LinearCache>; 4] = Default::default();
        for slot in 0..4 {
            if rows[slot].is_empty() {
                continue;
            }
            let (wid, bid) = match slot {
                0 => self.proj_state,
                1 => self.proj_roll,
                2 => self.proj_action.expect("action tokens without action projection"),
                _ => self.proj_hidden.expect("hidden tokens without hidden projection"),
            };
            let din = self.store.value(wid).shape[0];
            let x = Tensor::from_vec(&[rows[slot].len(), din], raw[slot].clone());
            let (y, cache) = linear_forward(&x, self.store.value(wid), self.store.value(bid));
            for (r, &(bi, ti)) in rows[slot].iter().enumerate() {
                let dst = (bi * t_max + ti) * w;
                emb.data[dst..dst + w].copy_from_slice(&y.data[r * w..(r + 1) * w]);
            }
            proj_caches[slot] = Some(cache);
        }
        // Learned positional embeddings on valid tokens.
        let pos = self.store.value(self.pos);
        for bi in 0..b {
            for ti in 0..t_max {
                if mask.data[bi * t_max + ti] == 1.0 {
                    let dst = (bi * t_max + ti) * w;
                    for j in 0..w {
                        emb.data[dst + j] += pos.data[ti * w + j];
                    }
                }
            }
        }
        // Encoder stack.
        let mut x = emb;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, cache) = blk.forward(&self.store, &x, Some(&mask));
            block_caches.push(cache);
            x = y;
        }
        // Per-head attention pooling over valid tokens, then the head linear.
        let scale = 1.0 / (w as f64).sqrt();
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut head_caches = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for (&qid, &(wid, bid)) in self.queries.iter().zip(&self.heads) {
            let q = self.store.value(qid);
            let mut alpha = Tensor::zeros(&[b, t_max]);
            let mut pooled = Tensor::zeros(&[b, w]);
            for bi in 0..b {
                let mut max_s = f64::NEG_INFINITY;
                let mut scores = vec![f64::NEG_INFINITY; t_max];
                for ti in 0..t_max {
                    if mask.data[bi * t_max + ti] == 1.0 {
                        let row = &x.data[(bi * t_max + ti) * w..(bi * t_max + ti + 1) * w];
                        let s: f64 = row.iter().zip(&q.data).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[ti] = s;
                        max_s = max_s.max(s);
                    }
                }
                let mut z = 0.0;
                for ti in 0..t_max {
                    if scores[ti] > f64::NEG_INFINITY {
                        let e = (scores[ti] - max_s).exp();
                        alpha.data[bi * t_max + ti] = e;
                        z += e;
                    }
                }
                for ti in 0..t_max {
                    let a = alpha.data[bi * t_max + ti] / z;
                    alpha.data[bi * t_max + ti] = a;
                    if a > 0.0 {
                        let row = &x.data[(bi * t_max + ti) * w..(bi * t_max + ti + 1) * w];
                        for (p, v) in pooled.data[bi * w..(bi + 1) * w].iter_mut().zip(row) {
                            *p += a * v;
                        }
                    }
                }
            }
            let (z, c) = linear_forward(&pooled, self.store.value(wid), self.store.value(bid));
            logits.push(z);
            head_caches.push(c);
            alphas.push(alpha);
        }
        Ok(BatchForward { rows, proj_caches, mask, block_caches, x_final: x, alphas, logits, head_caches, b })
    }

    /// Accumulate gradients for one batch given per-head logit gradients.
    fn backward_batch(&mut self, f: &BatchForward, g_logits: &[Tensor]) {
        let (t_max, w) = (self.max_tokens, self.config.width);
        let take = |s: &mut ParamSet, id: ParamId| std::mem::replace(s.grad_mut(id), Tensor::zeros(&[0]));
        let scale = 1.0 / (w as f64).sqrt();
        let mut g_out = Tensor::zeros(&[f.b, t_max, w]);
        for (i, (&qid, &(wid, bid))) in self.queries.iter().zip(&self.heads).enumerate() {
            let mut gw = take(&mut self.store, wid);
            let mut gb = take(&mut self.store, bid);
            let g_pooled =
                linear_backward(&f.head_caches[i], self.store.value(wid), &g_logits[i], &mut gw, &mut gb);
            *self.store.grad_mut(wid) = gw;
            *self.store.grad_mut(bid) = gb;
            let alpha = &f.alphas[i];
            let mut gq = take(&mut self.store, qid);
            for bi in 0..f.b {
                let gp = &g_pooled.data[bi * w..(bi + 1) * w];
                // Pooling: p = sum_t alpha_t x_t with alpha = softmax(x q / sqrt(w)).
                let mut g_alpha = vec![0.0; t_max];
                let mut dot = 0.0;
                for ti in 0..t_max {
                    let a = alpha.data[bi * t_max + ti];
                    if a > 0.0 {
                        let row = &f.x_final.data[(bi * t_max + ti) * w..(bi * t_max + ti + 1) * w];
                        g_alpha[ti] = gp.iter().zip(row).map(|(g, v)| g * v).sum();
                        dot += a * g_alpha[ti];
                    }
                }
                let q = self.store.value(qid).data.clone();
                for ti in 0..t_max {
                    let a = alpha.data[bi * t_max + ti];
                    if a == 0.0 {
                        continue;
                    }
                    let g_s = a * (g_alpha[ti] - dot) * scale;
                    let row = &f.x_final.data[(bi * t_max + ti) * w..(bi * t_max + ti + 1) * w];
                    let gx = &mut g_out.data[(bi * t_max + ti) * w..(bi * t_max + ti + 1) * w];
                    for j in 0..w {
                        gq.data[j] += g_s * row[j];
                        gx[j] += a * gp[j] + g_s * q[j];
                    }
                }
            }
            *self.store.grad_mut(qid) = gq;
        }
        for (blk, cache) in self.blocks.iter().zip(&f.block_caches).rev() {
            g_out = blk.backward(&mut self.store, cache, &g_out);
        }
        // Positional gradients over valid tokens.
        {
            let mut g_pos = take(&mut self.store, self.pos);
            for bi in 0..f.b {
                for ti in 0..t_max {
                    if f.mask.data[bi * t_max + ti] == 1.0 {
                        let src = (bi * t_max + ti) * w;
                        for j in 0..w {
                            g_pos.data[ti * w + j] += g_out.data[src + j];
                        }
                    }
                }
            }
            *self.store.grad_mut(self.pos) = g_pos;
        }
        // Back through the per-kind projections.
        for slot in 0..4 {
            let Some(cache) = &f.proj_caches[slot] else { continue };
            let (wid, bid) = match slot {
                0 => self.proj_state,
                1 => self.proj_roll,
                2 => self.proj_action.unwrap(),
                _ => self.proj_hidden.unwrap(),
            };
            let mut gy = Tensor::zeros(&[f.rows[slot].len(), w]);
            for (r, &(bi, ti)) in f.rows[slot].iter().enumerate() {
                let src = (bi * t_max + ti) * w;
                gy.data[r * w..(r + 1) * w].copy_from_slice(&g_out.data[src..src + w]);
            }
            let mut gw = take(&mut self.store, wid);
            let mut gb = take(&mut self.store, bid);
            linear_backward(cache, self.store.value(wid), &gy, &mut gw, &mut gb);
            *self.store.grad_mut(wid) = gw;
            *self.store.grad_mut(bid) = gb;
        }
    }

    /// Loss and per-head logit gradients for a labeled batch.
    fn loss_and_grads(
        &self,
        f: &BatchForward,
        batch: &[&Record],
    ) -> Result<(f64, Vec<Tensor>), PredError> {
        match self.config.task {
            Task::Action => {
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(self.config.l);
                for (i, z) in f.logits.iter().enumerate() {
                    let labels: Vec<usize> = batch
                        .iter()
                        .map(|r| r.labels.as_ref().expect("labeled record").next_actions[i].index())
                        .collect();
                    let (loss, g) = cross_entropy_loss(z, &labels)?;
                    total += loss;
                    grads.push(g);
                }
                Ok((total, grads))
            }
            Task::Event => {
                let flags: Vec<f64> = batch
                    .iter()
                    .map(|r| r.labels.as_ref().expect("labeled record").event_within_l as f64)
                    .collect();
                let (loss, g) = bce_loss(&f.logits[0].data, &flags)?;
                Ok((loss, vec![Tensor::from_vec(&[f.b, 1], g)]))
            }
        }
    }

    pub fn predict(&self, record: &Record) -> Result<PredictionOutput, PredError> {
        let seq = build_inputs(record, &self.config)?;
        let f = self.forward_batch(std::slice::from_ref(&seq))?;
        Ok(match self.config.task {
            Task::Action => PredictionOutput::Actions(
                f.logits
                    .iter()
                    .map(|z| {
                        let p = crate::nn::softmax_rows(z);
                        let mut row = [0.0; NUM_ACTIONS];
                        row.copy_from_slice(&p.data[..NUM_ACTIONS]);
                        row
                    })
                    .collect(),
            ),
            Task::Event => PredictionOutput::Event(sigmoid(f.logits[0].data[0])),
        })
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), PredError> {
        let header = serde_json::json!({
            "config": self.config,
            "dims": self.dims,
            "max_tokens": self.max_tokens,
        });
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        self.store.save(&mut w)?;
        Ok(())
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<Predictor, PredError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: serde_json::Value = serde_json::from_str(&line)?;
        let config: PredictorConfig = serde_json::from_value(header["config"].clone())?;
        let dims: TokenDims = serde_json::from_value(header["dims"].clone())?;
        let max_tokens = header["max_tokens"].as_u64().unwrap_or(0) as usize;
        let mut p = Predictor::new(config, dims, max_tokens);
        p.store.load(r)?;
        Ok(p)
    }
}

struct BatchForward {
    rows: [Vec<(usize, usize)>; 4],
    proj_caches: [Option<LinearCache>; 4],
    mask: Tensor,
    block_caches: Vec<crate::nn::ops::EncoderBlockCache>,
    /// Final encoder output, kept for the pooling backward pass.
    x_final: Tensor,
    /// Per-head pooling weights over tokens.
    alphas: Vec<Tensor>,
    logits: Vec<Tensor>,
    head_caches: Vec<LinearCache>,
    b: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PredictorLog {
    pub epochs: Vec<EpochStat>,
}

fn token_dims_for(dataset: &Dataset, config: &PredictorConfig) -> Result<(TokenDims, usize), PredError> {
    let first = dataset.labeled().next().ok_or(PredError::EmptyDataset)?;
    let state = first.observation.feature_len() + NUM_ACTIONS;
    let rollout = state + 1;
    let mut action = None;
    let mut hidden = None;
    let mut max_tokens = 1;
    match config.aux {
        AuxMode::Baseline => {}
        AuxMode::Simulation => {
            action = Some(ACTION_TOKEN_DIM);
            max_tokens = 1 + 2 * config.l;
        }
        AuxMode::InnerPlan { top_k } => {
            action = Some(ACTION_TOKEN_DIM);
            max_tokens = 1 + top_k * 2 * config.l;
        }
        AuxMode::InnerHidden { .. } => {
            for r in dataset.labeled() {
                if let AuxInfo::InnerHidden { vectors, .. } = &r.aux {
                    if let Some(v) = vectors.first() {
                        hidden = Some(v.len());
                    }
                    max_tokens = max_tokens.max(1 + vectors.len());
                }
            }
            if hidden.is_none() {
                return Err(PredError::AuxMismatch { record: "missing hidden aux", config: config.aux });
            }
        }
    }
    Ok((TokenDims { state, rollout, action, hidden }, max_tokens))
}

fn dataset_loss(p: &Predictor, records: &[&Record], batch: usize) -> Result<f64, PredError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in records.chunks(batch) {
        let seqs: Vec<TokenSeq> =
            chunk.iter().map(|r| build_inputs(r, &p.config)).collect::<Result<_, _>>()?;
        let f = p.forward_batch(&seqs)?;
        let (loss, _) = p.loss_and_grads(&f, chunk)?;
        total += loss * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Train a predictor with Adam and per-epoch validation; training halts
/// after `patience` consecutive evals without val-loss improvement and the
/// best-validation parameters are returned.
pub fn train_predictor(
    train: &Dataset,
    val: &Dataset,
    config: &PredictorConfig,
) -> Result<(Predictor, PredictorLog), PredError> {
    let train_records: Vec<&Record> = train.labeled().collect();
    let val_records: Vec<&Record> = val.labeled().collect();
    if train_records.is_empty() || val_records.is_empty() {
        return Err(PredError::EmptyDataset);
    }
    let (dims, max_tokens) = token_dims_for(train, config)?;
    let mut p = Predictor::new(*config, dims, max_tokens);
    let mut adam = Adam::new(&p.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7e57));
    let mut order: Vec<usize> = (0..train_records.len()).collect();

    let mut log = PredictorLog::default();
    let mut best_loss = f64::INFINITY;
    let mut best_store = p.store.clone();
    let mut bad = 0usize;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| train_records[i]).collect();
            let seqs: Vec<TokenSeq> =
                batch.iter().map(|r| build_inputs(r, &p.config)).collect::<Result<_, _>>()?;
            let f = p.forward_batch(&seqs)?;
            let (loss, grads) = p.loss_and_grads(&f, &batch)?;
            if !loss.is_finite() {
                return Err(PredError::Divergence);
            }
            train_loss += loss * batch.len() as f64;
            seen += batch.len();
            p.store.zero_grads();
            p.backward_batch(&f, &grads);
            adam.step(&mut p.store);
        }
        let val_loss = dataset_loss(&p, &val_records, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(PredError::Divergence);
        }
        let improved = val_loss < best_loss - 1e-12;
        if improved {
            best_loss = val_loss;
            best_store = p.store.clone();
            bad = 0;
        } else {
            bad += 1;
        }
        log.epochs.push(EpochStat { epoch, train_loss: train_loss / seen as f64, val_loss, improved });
        if bad >= config.patience {
            break;
        }
    }
    p.store = best_store;
    Ok((p, log))
}

/// Evaluation metrics. Action-task predictors fill `exact_match` and
/// `per_step`; event-task predictors fill `precision`/`recall`/`f1` (at
/// threshold 0.5) and `brier`. The other task's fields are zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub exact_match: f64,
    pub per_step: Vec<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub brier: f64,
    pub n: usize,
}

/// Precision/recall/F1 from binary predictions at a fixed threshold.
pub fn classification_metrics(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    assert_eq!(pred.len(), truth.len());
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (precision, recall, f1)
}

pub fn evaluate(p: &Predictor, test: &Dataset) -> Result<Metrics, PredError> {
    let records: Vec<&Record> = test.labeled().collect();
    if records.is_empty() {
        return Err(PredError::EmptyDataset);
    }
    let l = p.config.l;
    let mut per_step_hits = vec![0usize; l];
    let mut exact_hits = 0usize;
    let mut probs = Vec::new();
    let mut truths = Vec::new();
    for chunk in records.chunks(p.config.batch_size) {
        let seqs: Vec<TokenSeq> =
            chunk.iter().map(|r| build_inputs(r, &p.config)).collect::<Result<_, _>>()?;
        let f = p.forward_batch(&seqs)?;
        match p.config.task {
            Task::Action => {
                for (bi, r) in chunk.iter().enumerate() {
                    let labels = &r.labels.as_ref().unwrap().next_actions;
                    let mut all = true;
                    for (i, z) in f.logits.iter().enumerate() {
                        let row = &z.data[bi * NUM_ACTIONS..(bi + 1) * NUM_ACTIONS];
                        let pred = (0..NUM_ACTIONS).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                        if pred == labels[i].index() {
                            per_step_hits[i] += 1;
                        } else {
                            all = false;
                        }
                    }
                    exact_hits += all as usize;
                }
            }
            Task::Event => {
                for (bi, r) in chunk.iter().enumerate() {
                    probs.push(sigmoid(f.logits[0].data[bi]));
                    truths.push(r.labels.as_ref().unwrap().event_within_l == 1);
                }
            }
        }
    }
    let n = records.len();
    Ok(match p.config.task {
        Task::Action => Metrics {
            exact_match: exact_hits as f64 / n as f64,
            per_step: per_step_hits.iter().map(|&h| h as f64 / n as f64).collect(),
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            brier: 0.0,
            n,
        },
        Task::Event => {
            let pred: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
            let (precision, recall, f1) = classification_metrics(&pred, &truths);
            let brier = probs
                .iter()
                .zip(&truths)
                .map(|(&p, &t)| (p - t as u8 as f64).powi(2))
                .sum::<f64>()
                / n as f64;
            Metrics { exact_match: 0.0, per_step: Vec::new(), precision, recall, f1, brier, n }
        }
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    pub n: usize,
}

/// Compare the event predictor's probabilities against the exact
/// enumeration oracle on freshly sampled prediction points. Requires an
/// enumerable setting (stochastic-noop variant, feedforward/recurrent
/// agent); oracle refusals propagate.
pub fn calibration_report(
    p: &Predictor,
    policy: &Policy,
    model: Option<&WorldModel>,
    env: &EnvConfig,
    gen: &GenConfig,
    n_points: usize,
    seed: u64,
) -> Result<CalibrationReport, PredError> {
    assert!(matches!(p.config.task, Task::Event), "calibration is defined for event predictors");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(n_points);
    let mut level_seed = seed.wrapping_mul(7_368_787);
    while errors.len() < n_points {
        let level = std::sync::Arc::new(generate_level(level_seed, gen)?);
        let (mut state, mut obs) = reset(&level, env, level_seed);
        let mut pstate = policy.initial_state();
        let mut t = 0usize;
        while !state.done && errors.len() < n_points {
            let (action, trace) = act_greedy(policy, &mut pstate, &obs, model, level_seed)?;
            let aux = compute_aux(&trace, p.config.aux, policy, model, &pstate, &obs, action, p.config.l, level_seed)?;
            let record = Record {
                level_id: level_seed,
                episode_id: 0,
                t,
                observation: obs.clone(),
                action,
                reward: 0.0,
                done: false,
                event_flag: 0,
                aux,
                labels: None,
                agent: policy.kind(),
            };
            let predicted = match p.predict(&record)? {
                PredictionOutput::Event(prob) => prob,
                PredictionOutput::Actions(_) => unreachable!(),
            };
            let exact = enumerate_future(env, policy, &pstate, &state, action, p.config.l)?.event_probability;
            errors.push((predicted - exact).abs());
            let res = step(&state, action, env, &mut rng);
            obs = observe(&res.next, env, &mut rng);
            state = res.next;
            t += 1;
        }
        level_seed = level_seed.wrapping_add(1);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let max = errors.iter().cloned().fold(0.0, f64::max);
    Ok(CalibrationReport { mean_abs_error: mean, max_abs_error: max, n: errors.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{train_actor_critic, PolicyKind, TrainConfig};
    use crate::datagen::{collect, split, SplitSizes};
    use crate::gridworld::{Action, EnvVariant};
    use crate::world_model::oracle_model;

    fn quick_policy(kind: PolicyKind, seed: u64) -> Policy {
        let cfg = TrainConfig { transitions: 500, log_window: 500, ..TrainConfig::default() };
        train_actor_critic(&EnvConfig::default(), &GenConfig::default(), kind, &cfg, seed)
            .unwrap()
            .0
    }

    fn baseline_dataset(n: usize, seed: u64) -> Dataset {
        let policy = quick_policy(PolicyKind::Feedforward, seed);
        collect(&policy, None, &EnvConfig::default(), &GenConfig::default(), n, AuxMode::Baseline, seed)
            .unwrap()
    }

    #[test]
    fn baseline_input_is_a_single_token() {
        let ds = baseline_dataset(60, 0);
        let cfg = PredictorConfig::new(Task::Action, AuxMode::Baseline, 0);
        let r = ds.labeled().next().unwrap();
        let seq = build_inputs(r, &cfg).unwrap();
        assert_eq!(seq.tokens.len(), 1);
        assert_eq!(seq.tokens[0].1.len(), r.observation.feature_len() + NUM_ACTIONS);
    }

    #[test]
    fn simulation_input_has_two_tokens_per_rollout_step() {
        let policy = quick_policy(PolicyKind::Feedforward, 1);
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        let ds = collect(&policy, Some(&model), &env, &GenConfig::default(), 60, AuxMode::Simulation, 1)
            .unwrap();
        let cfg = PredictorConfig::new(Task::Action, AuxMode::Simulation, 0);
        for r in ds.labeled() {
            let seq = build_inputs(r, &cfg).unwrap();
            let steps = match &r.aux {
                AuxInfo::SimRollout(ro) => ro.steps.len(),
                _ => unreachable!(),
            };
            assert_eq!(seq.tokens.len(), 1 + 2 * steps);
            assert!(seq.tokens.len() <= 1 + 2 * HORIZON);
            let kinds: Vec<_> = seq.tokens.iter().map(|(k, _)| *k).collect();
            assert_eq!(kinds[1], TokenKind::Rollout);
            assert_eq!(kinds[2], TokenKind::Action);
            assert_eq!(seq.tokens[2].1.len(), ACTION_TOKEN_DIM);
        }
    }

    #[test]
    fn planner_inner_input_is_at_most_one_plus_topk_l_tokens() {
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        let planner = Policy::MctsPlanner(crate::agents::PlannerConfig::default());
        let ds = collect(
            &planner,
            Some(&model),
            &env,
            &GenConfig::default(),
            40,
            AuxMode::InnerPlan { top_k: 3 },
            0,
        )
        .unwrap();
        let cfg = PredictorConfig::new(Task::Action, AuxMode::InnerPlan { top_k: 3 }, 0);
        let mut saw_max = 0;
        for r in ds.labeled() {
            let seq = build_inputs(r, &cfg).unwrap();
            assert!(seq.tokens.len() <= 1 + 3 * HORIZON);
            saw_max = saw_max.max(seq.tokens.len());
        }
        assert!(saw_max > 1, "planner aux should contribute tokens");
    }

    #[test]
    fn aux_mismatch_is_rejected() {
        let ds = baseline_dataset(40, 2);
        let cfg = PredictorConfig::new(Task::Action, AuxMode::Simulation, 0);
        let r = ds.labeled().next().unwrap();
        assert!(matches!(build_inputs(r, &cfg), Err(PredError::AuxMismatch { .. })));
    }

    #[test]
    fn action_probabilities_sum_to_one_and_event_is_a_probability() {
        // Episodes can run to the 60-step limit and splits take whole
        // episodes, so collect enough for at least three of them.
        let ds = baseline_dataset(300, 3);
        let sizes = SplitSizes { train_sizes: vec![20], val: 10, test: 10 };
        let sp = split(&ds, &sizes, 0).unwrap();
        let mut cfg = PredictorConfig::new(Task::Action, AuxMode::Baseline, 0);
        cfg.max_epochs = 2;
        let (p, _) = train_predictor(&sp.train[0], &sp.val, &cfg).unwrap();
        let r = sp.test.labeled().next().unwrap();
        match p.predict(r).unwrap() {
            PredictionOutput::Actions(rows) => {
                assert_eq!(rows.len(), HORIZON);
                for row in rows {
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
            _ => panic!("wrong output kind"),
        }
        let mut cfg = PredictorConfig::new(Task::Event, AuxMode::Baseline, 0);
        cfg.max_epochs = 2;
        let (p, _) = train_predictor(&sp.train[0], &sp.val, &cfg).unwrap();
        match p.predict(r).unwrap() {
            PredictionOutput::Event(prob) => assert!(prob > 0.0 && prob < 1.0),
            _ => panic!("wrong output kind"),
        }
    }

    #[test]
    fn gradients_match_finite_differences_through_the_full_predictor() {
        // Small widths keep the finite-difference sweep fast while touching
        // every parameter kind: projections, positions, blocks, heads.
        let policy = quick_policy(PolicyKind::Feedforward, 1);
        let env = EnvConfig::default();
        let model = oracle_model(env).unwrap();
        let ds = collect(&policy, Some(&model), &env, &GenConfig::default(), 30, AuxMode::Simulation, 5)
            .unwrap();
        let records: Vec<&Record> = ds.labeled().take(3).collect();
        let mut cfg = PredictorConfig::new(Task::Action, AuxMode::Simulation, 7);
        cfg.width = 6;
        cfg.mlp_hidden = 8;
        cfg.depth = 2;
        let (dims, max_tokens) = token_dims_for(&ds, &cfg).unwrap();
        let mut p = Predictor::new(cfg, dims, max_tokens);

        let seqs: Vec<TokenSeq> = records.iter().map(|r| build_inputs(r, &p.config).unwrap()).collect();
        let f = p.forward_batch(&seqs).unwrap();
        let (_, grads) = p.loss_and_grads(&f, &records).unwrap();
        p.store.zero_grads();
        p.backward_batch(&f, &grads);

        let loss_of = |p: &Predictor| -> f64 {
            let f = p.forward_batch(&seqs).unwrap();
            p.loss_and_grads(&f, &records).unwrap().0
        };
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut checked = 0usize;
        for e in 0..p.store.entries().len() {
            let len = p.store.entries()[e].value.len();
            if len == 0 {
                continue;
            }
            for _ in 0..2 {
                use rand::Rng;
                let j = rng.gen_range(0..len);
                let orig = p.store.entries()[e].value.data[j];
                p.store.entries_mut()[e].value.data[j] = orig + h;
                let lp = loss_of(&p);
                p.store.entries_mut()[e].value.data[j] = orig - h;
                let lm = loss_of(&p);
                p.store.entries_mut()[e].value.data[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = p.store.entries()[e].grad.data[j];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "param {} idx {j}: fd {fd} vs analytic {an}",
                    p.store.entries()[e].name
                );
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn training_is_deterministic_and_early_stops() {
        let ds = baseline_dataset(400, 4);
        let sizes = SplitSizes { train_sizes: vec![100], val: 50, test: 50 };
        let sp = split(&ds, &sizes, 0).unwrap();
        let mut cfg = PredictorConfig::new(Task::Event, AuxMode::Baseline, 3);
        cfg.max_epochs = 60;
        cfg.patience = 3;
        let (_, log_a) = train_predictor(&sp.train[0], &sp.val, &cfg).unwrap();
        let (_, log_b) = train_predictor(&sp.train[0], &sp.val, &cfg).unwrap();
        let curve_a: Vec<f64> = log_a.epochs.iter().map(|e| e.val_loss).collect();
        let curve_b: Vec<f64> = log_b.epochs.iter().map(|e| e.val_loss).collect();
        assert_eq!(curve_a, curve_b);
        // No more than `patience` consecutive non-improving evals.
        let mut streak = 0;
        for e in &log_a.epochs {
            if e.improved {
                streak = 0;
            } else {
                streak += 1;
            }
            assert!(streak <= cfg.patience);
        }
    }

    #[test]
    fn degenerate_labels_are_memorized_quickly() {
        // All labels forced identical: loss must collapse within 8 epochs.
        let mut ds = baseline_dataset(300, 5);
        for r in &mut ds.records {
            if let Some(l) = &mut r.labels {
                l.next_actions = vec![Action::Up; HORIZON];
                l.event_within_l = 1;
            }
        }
        let sizes = SplitSizes { train_sizes: vec![80], val: 40, test: 40 };
        let sp = split(&ds, &sizes, 0).unwrap();
        for task in [Task::Action, Task::Event] {
            let mut cfg = PredictorConfig::new(task, AuxMode::Baseline, 0);
            cfg.max_epochs = 8;
            cfg.learning_rate = 3e-3;
            let (_, log) = train_predictor(&sp.train[0], &sp.val, &cfg).unwrap();
            let last = log.epochs.last().unwrap();
            assert!(last.val_loss < 0.01, "task {task:?} val loss {}", last.val_loss);
        }
    }

    #[test]
    fn hand_built_confusion_matrix_metrics() {
        // TP=1, FP=1, FN=0, TN=2 -> precision .5, recall 1, F1 2/3.
        let pred = [true, true, false, false];
        let truth = [true, false, false, false];
        let (p, r, f1) = classification_metrics(&pred, &truth);
        assert_eq!(p, 0.5);
        assert_eq!(r, 1.0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_match_never_exceeds_per_step_accuracy() {
        let ds = baseline_dataset(500, 6);
        let sizes = SplitSizes { train_sizes: vec![150], val: 60, test: 100 };
        let sp = split(&ds, &sizes, 0).unwrap();
        let mut cfg = PredictorConfig::new(Task::Action, AuxMode::Baseline, 0);
        cfg.max_epochs = 3;
        let (p, _) = train_predictor(&sp.train[0], &sp.val, &cfg).unwrap();
        let m = evaluate(&p, &sp.test).unwrap();
        for (i, &acc) in m.per_step.iter().enumerate() {
            assert!(m.exact_match <= acc + 1e-12, "step {i}");
        }
    }

    #[test]
    fn predictor_round_trips_through_save_and_load() {
        let ds = baseline_dataset(200, 7);
        let sizes = SplitSizes { train_sizes: vec![60], val: 30, test: 30 };
        let sp = split(&ds, &sizes, 0).unwrap();
        let mut cfg = PredictorConfig::new(Task::Action, AuxMode::Baseline, 1);
        cfg.max_epochs = 2;
        let (p, _) = train_predictor(&sp.train[0], &sp.val, &cfg).unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        let q = Predictor::load(std::io::BufReader::new(&buf[..])).unwrap();
        let r = sp.test.labeled().next().unwrap();
        match (p.predict(r).unwrap(), q.predict(r).unwrap()) {
            (PredictionOutput::Actions(a), PredictionOutput::Actions(b)) => assert_eq!(a, b),
            _ => panic!("wrong output kind"),
        }
        let ma = evaluate(&p, &sp.test).unwrap();
        let mb = evaluate(&q, &sp.test).unwrap();
        assert_eq!(ma.exact_match, mb.exact_match);
    }

    #[test]
    fn calibration_report_runs_on_the_stochastic_variant() {
        let env = EnvConfig::with_variant(EnvVariant::StochasticNoop);
        let policy = quick_policy(PolicyKind::Feedforward, 8);
        let ds = collect(&policy, None, &env, &GenConfig::default(), 300, AuxMode::Baseline, 8).unwrap();
        let sizes = SplitSizes { train_sizes: vec![80], val: 40, test: 40 };
        let sp = split(&ds, &sizes, 0).unwrap();
        let mut cfg = PredictorConfig::new(Task::Event, AuxMode::Baseline, 0);
        cfg.max_epochs = 3;
        let (p, _) = train_predictor(&sp.train[0], &sp.val, &cfg).unwrap();
        let report =
            calibration_report(&p, &policy, None, &env, &GenConfig::default(), 30, 11).unwrap();
        assert_eq!(report.n, 30);
        assert!(report.mean_abs_error >= 0.0 && report.mean_abs_error <= 1.0);
        assert!(report.max_abs_error <= 1.0 + 1e-12);
    }
}
