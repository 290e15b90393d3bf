//! Dataset generation: runs trained agents on freshly generated levels,
//! logs each transition with its auxiliary information, labels prediction
//! points with the realized next-L actions and the event-within-L flag,
//! and builds episode-level splits with nested training subsets.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    act_greedy, AgentError, HiddenSelection, PlanRollout, Policy, PolicyKind, RolloutOrigin,
    RolloutStep,
};
use crate::auxinfo::{extract_inner, simulate_rollout, AuxError, AuxInfo, InnerConfig};
use crate::gridworld::{
    event_flag, generate_level, observe, reset, step, Action, EnvConfig, EnvVariant, GenConfig,
    Observation, NUM_PLANES,
};
use crate::world_model::WorldModel;

/// Prediction horizon L: how many future actions are predicted and how far
/// ahead the event window reaches.
pub const HORIZON: usize = 5;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("n_transitions must be at least 1")]
    EmptyRequest,
    #[error("aux mode {0:?} is incompatible with agent kind {1:?}")]
    AuxAgentMismatch(AuxMode, PolicyKind),
    #[error("aux mode requires a world model")]
    MissingModel,
    #[error("infeasible split sizes: need {needed} labeled records, have {available}")]
    InfeasibleSplit { needed: usize, available: usize },
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("malformed dataset file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Aux(#[from] AuxError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which auxiliary information is attached to each record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxMode {
    /// State and committed action only.
    Baseline,
    /// Top-k visit-ranked search rollouts (explicit planner only).
    InnerPlan { top_k: usize },
    /// Hidden activation vectors (feedforward/recurrent only).
    InnerHidden { selection: HiddenSelection },
    /// Agent unrolled inside a world model (not defined for planners).
    Simulation,
}

/// Supervised targets for one prediction point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    /// The realized actions A_{t+1..t+L}; length exactly L.
    pub next_actions: Vec<Action>,
    /// 1 iff the player stands on the blue tile in any of S_{t+1..t+L}.
    pub event_within_l: u8,
}

/// One logged transition. `event_flag` is the event indicator of the
/// *current* state S_t; labels summarize the following L steps and are
/// present only when the episode ran at least L steps past t.
#[derive(Clone, Debug)]
pub struct Record {
    /// Seed the level was generated from.
    pub level_id: u64,
    pub episode_id: u64,
    pub t: usize,
    pub observation: Observation,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub event_flag: u8,
    pub aux: AuxInfo,
    pub labels: Option<Labels>,
    pub agent: PolicyKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Counts {
    pub records: usize,
    pub labeled: usize,
    pub episodes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub agent: PolicyKind,
    pub variant: EnvVariant,
    pub aux_mode: AuxMode,
    pub l: usize,
    pub seed: u64,
    pub gen: GenConfig,
    pub env: EnvConfig,
    pub counts: Counts,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn labeled(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.labels.is_some())
    }

    fn recount(&mut self) {
        let mut episodes = std::collections::HashSet::new();
        for r in &self.records {
            episodes.insert(r.episode_id);
        }
        self.manifest.counts = Counts {
            records: self.records.len(),
            labeled: self.records.iter().filter(|r| r.labels.is_some()).count(),
            episodes: episodes.len(),
        };
    }
}

fn check_compatible(aux: AuxMode, kind: PolicyKind, has_model: bool) -> Result<(), DataError> {
    match aux {
        AuxMode::Baseline => Ok(()),
        AuxMode::InnerPlan { .. } if kind == PolicyKind::MctsPlanner => Ok(()),
        AuxMode::InnerHidden { .. } if kind != PolicyKind::MctsPlanner => Ok(()),
        AuxMode::Simulation if kind == PolicyKind::MctsPlanner => {
            Err(DataError::AuxAgentMismatch(aux, kind))
        }
        AuxMode::Simulation if !has_model => Err(DataError::MissingModel),
        AuxMode::Simulation => Ok(()),
        _ => Err(DataError::AuxAgentMismatch(aux, kind)),
    }
}

/// Auxiliary information for one prediction point, shared by dataset
/// collection and calibration sampling. `pstate` must be the policy state
/// after acting (the trace's step).
#[allow(clippy::too_many_arguments)]
pub fn compute_aux(
    trace: &crate::agents::InnerTrace,
    aux_mode: AuxMode,
    policy: &Policy,
    model: Option<&WorldModel>,
    pstate: &crate::agents::PolicyState,
    obs: &Observation,
    action: Action,
    l: usize,
    seed: u64,
) -> Result<AuxInfo, DataError> {
    Ok(match aux_mode {
        AuxMode::Baseline => AuxInfo::None,
        AuxMode::InnerPlan { top_k } => extract_inner(trace, InnerConfig::TopKRollouts(top_k), l)?,
        AuxMode::InnerHidden { selection } => extract_inner(trace, InnerConfig::Hidden(selection), l)?,
        AuxMode::Simulation => {
            let model = model.ok_or(DataError::MissingModel)?;
            simulate_rollout(model, policy, pstate, obs, action, l, seed)?
        }
    })
}

/// Run the agent greedily on freshly generated levels, completing episodes
/// until at least `n_transitions` records exist. Levels are generated from
/// seeds counting up from `seed * 1_000_003`; per-episode environment
/// randomness derives from the same counter. Labels are attached post-hoc.
///
/// `model` is consulted by planner policies for search and by the
/// simulation aux mode for rollouts.
pub fn collect(
    policy: &Policy,
    model: Option<&WorldModel>,
    env: &EnvConfig,
    gen: &GenConfig,
    n_transitions: usize,
    aux_mode: AuxMode,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_transitions == 0 {
        return Err(DataError::EmptyRequest);
    }
    check_compatible(aux_mode, policy.kind(), model.is_some())?;
    let l = HORIZON;
    let mut records: Vec<Record> = Vec::with_capacity(n_transitions + 64);
    let mut episode_id = 0u64;
    let base = seed.wrapping_mul(1_000_003);
    while records.len() < n_transitions {
        let level_seed = base.wrapping_add(episode_id);
        let level = Arc::new(
            generate_level(level_seed, gen).map_err(|e| DataError::Malformed(e.to_string()))?,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(level_seed ^ 0x5eed_5eed);
        let (mut state, mut obs) = reset(&level, env, level_seed);
        let mut pstate = policy.initial_state();
        let mut episode: Vec<Record> = Vec::new();
        while !state.done {
            let t = episode.len();
            let cur_flag = event_flag(&state);
            let (action, trace) = act_greedy(policy, &mut pstate, &obs, model, level_seed)?;
            let aux =
                compute_aux(&trace, aux_mode, policy, model, &pstate, &obs, action, l, level_seed)?;
            let res = step(&state, action, env, &mut rng);
            episode.push(Record {
                level_id: level_seed,
                episode_id,
                t,
                observation: obs.clone(),
                action,
                reward: res.reward,
                done: res.done,
                event_flag: cur_flag,
                aux,
                labels: None,
                agent: policy.kind(),
            });
            obs = observe(&res.next, env, &mut rng);
            state = res.next;
        }
        label_episode(&mut episode, l);
        records.extend(episode);
        episode_id += 1;
    }
    let mut ds = Dataset {
        manifest: Manifest {
            version: DATASET_VERSION,
            agent: policy.kind(),
            variant: env.variant,
            aux_mode,
            l,
            seed,
            gen: *gen,
            env: *env,
            counts: Counts { records: 0, labeled: 0, episodes: 0 },
        },
        records,
    };
    ds.recount();
    Ok(ds)
}

/// Attach labels to every record of one episode that has a full L-step
/// future. Record i's window covers states S_{i+1..i+L}, whose event
/// indicators are the `event_flag` fields of records i+1..=i+L.
fn label_episode(episode: &mut [Record], l: usize) {
    let t_len = episode.len();
    for i in 0..t_len {
        if i + l > t_len - 1 {
            continue;
        }
        let next_actions: Vec<Action> = (1..=l).map(|k| episode[i + k].action).collect();
        let event = (1..=l).any(|k| episode[i + k].event_flag == 1);
        episode[i].labels = Some(Labels { next_actions, event_within_l: event as u8 });
    }
}

/// Replay transitions for world-model training: the agent acts by sampling
/// its softmax (broader state coverage than greedy play), and each
/// transition carries the discounted return-to-go as the value target.
pub fn collect_transitions(
    policy: &Policy,
    model: Option<&WorldModel>,
    env: &EnvConfig,
    gen: &GenConfig,
    n_transitions: usize,
    seed: u64,
) -> Result<Vec<crate::world_model::Transition>, DataError> {
    use crate::world_model::{Transition, DISCOUNT};
    use rand::distributions::{Distribution, WeightedIndex};
    if n_transitions == 0 {
        return Err(DataError::EmptyRequest);
    }
    let mut out: Vec<Transition> = Vec::with_capacity(n_transitions + 64);
    let mut episode = 0u64;
    let base = seed.wrapping_mul(2_000_003);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    while out.len() < n_transitions {
        let level_seed = base.wrapping_add(episode);
        let level = Arc::new(
            generate_level(level_seed, gen).map_err(|e| DataError::Malformed(e.to_string()))?,
        );
        let (mut state, mut obs) = reset(&level, env, level_seed);
        let mut pstate = policy.initial_state();
        let mut steps: Vec<Transition> = Vec::new();
        while !state.done {
            let action = match policy {
                Policy::MctsPlanner(_) => act_greedy(policy, &mut pstate, &obs, model, level_seed)?.0,
                _ => {
                    let probs = crate::agents::action_probabilities(policy, &mut pstate, &obs)?;
                    let dist = WeightedIndex::new(probs).expect("valid probabilities");
                    Action::from_index(dist.sample(&mut rng))
                }
            };
            let res = step(&state, action, env, &mut rng);
            let next_obs = observe(&res.next, env, &mut rng);
            steps.push(Transition {
                obs: obs.clone(),
                action,
                next_obs: next_obs.clone(),
                reward: res.reward,
                done: res.done,
                value_target: 0.0,
            });
            obs = next_obs;
            state = res.next;
        }
        // Discounted Monte-Carlo return-to-go as the value target.
        let mut g = 0.0;
        for t in steps.iter_mut().rev() {
            g = t.reward + DISCOUNT * g;
            t.value_target = g;
        }
        out.extend(steps);
        episode += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SplitSizes {
    /// Labeled-record targets for the nested training subsets, ascending.
    pub train_sizes: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug)]
pub struct Splits {
    /// One dataset per requested train size, smallest first; nested by
    /// construction (each is an episode-prefix of the next).
    pub train: Vec<Dataset>,
    pub val: Dataset,
    pub test: Dataset,
}

/// Episode-level split: episodes are shuffled deterministically by `seed`,
/// then assigned whole to test, val, and train in that order until each
/// part holds at least its requested number of labeled records. Training
/// subsets are episode-prefixes of the train pool, so smaller subsets are
/// contained in larger ones.
pub fn split(dataset: &Dataset, sizes: &SplitSizes, seed: u64) -> Result<Splits, DataError> {
    let mut train_sizes = sizes.train_sizes.clone();
    train_sizes.sort_unstable();
    let largest_train = *train_sizes.last().unwrap_or(&0);
    let needed = largest_train + sizes.val + sizes.test;
    let available = dataset.manifest.counts.labeled;
    if needed > available || train_sizes.is_empty() {
        return Err(DataError::InfeasibleSplit { needed, available });
    }

    // Group records by episode, preserving within-episode order.
    let mut by_episode: BTreeMap<u64, Vec<Record>> = BTreeMap::new();
    for r in &dataset.records {
        by_episode.entry(r.episode_id).or_default().push(r.clone());
    }
    let mut episode_ids: Vec<u64> = by_episode.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    episode_ids.shuffle(&mut rng);

    let labeled_in = |eps: &[u64]| -> usize {
        eps.iter().map(|e| by_episode[e].iter().filter(|r| r.labels.is_some()).count()).sum()
    };
    let take_until = |ids: &mut std::vec::IntoIter<u64>, target: usize| -> Vec<u64> {
        let mut taken = Vec::new();
        let mut have = 0usize;
        while have < target {
            match ids.next() {
                Some(e) => {
                    have += by_episode[&e].iter().filter(|r| r.labels.is_some()).count();
                    taken.push(e);
                }
                None => break,
            }
        }
        taken
    };

    let mut ids = episode_ids.into_iter();
    let test_eps = take_until(&mut ids, sizes.test);
    let val_eps = take_until(&mut ids, sizes.val);
    let train_pool: Vec<u64> = ids.collect();
    if labeled_in(&test_eps) < sizes.test
        || labeled_in(&val_eps) < sizes.val
        || labeled_in(&train_pool) < largest_train
    {
        return Err(DataError::InfeasibleSplit { needed, available });
    }

    let build = |eps: &[u64]| -> Dataset {
        let mut ds = Dataset {
            manifest: dataset.manifest.clone(),
            records: eps.iter().flat_map(|e| by_episode[e].iter().cloned()).collect(),
        };
        ds.recount();
        ds
    };

    let mut train = Vec::with_capacity(train_sizes.len());
    for &size in &train_sizes {
        let mut prefix = Vec::new();
        let mut have = 0usize;
        for &e in &train_pool {
            if have >= size {
                break;
            }
            have += by_episode[&e].iter().filter(|r| r.labels.is_some()).count();
            prefix.push(e);
        }
        train.push(build(&prefix));
    }
    Ok(Splits { train, val: build(&val_eps), test: build(&test_eps) })
}

// ---------------------------------------------------------------------------
// Wire format: one manifest JSON line, then one JSON record per line.
// Observations are stored as base64-packed plane bitsets.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireObs {
    w: usize,
    h: usize,
    /// All planes bit-packed little-endian, base64.
    planes: String,
    step_frac: f64,
}

impl From<&Observation> for WireObs {
    fn from(o: &Observation) -> WireObs {
        let mut bytes = vec![0u8; o.planes.len().div_ceil(8)];
        for (i, &b) in o.planes.iter().enumerate() {
            if b != 0 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        WireObs { w: o.width, h: o.height, planes: B64.encode(bytes), step_frac: o.step_frac }
    }
}

impl WireObs {
    fn decode(&self) -> Result<Observation, DataError> {
        let bytes = B64
            .decode(&self.planes)
            .map_err(|e| DataError::Malformed(format!("bad plane base64: {e}")))?;
        let n = NUM_PLANES * self.w * self.h;
        if bytes.len() != n.div_ceil(8) {
            return Err(DataError::Malformed("plane bitset length mismatch".into()));
        }
        let planes: Vec<u8> = (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect();
        Ok(Observation { width: self.w, height: self.h, planes, step_frac: self.step_frac })
    }
}

#[derive(Serialize, Deserialize)]
struct WireStep {
    obs: WireObs,
    action: Action,
    reward: f64,
}

#[derive(Serialize, Deserialize)]
struct WireRollout {
    steps: Vec<WireStep>,
    origin: RolloutOrigin,
}

impl From<&PlanRollout> for WireRollout {
    fn from(r: &PlanRollout) -> WireRollout {
        WireRollout {
            steps: r
                .steps
                .iter()
                .map(|s| WireStep { obs: (&s.obs).into(), action: s.action, reward: s.reward })
                .collect(),
            origin: r.origin,
        }
    }
}

impl WireRollout {
    fn decode(&self) -> Result<PlanRollout, DataError> {
        Ok(PlanRollout {
            steps: self
                .steps
                .iter()
                .map(|s| {
                    Ok(RolloutStep { obs: s.obs.decode()?, action: s.action, reward: s.reward })
                })
                .collect::<Result<_, DataError>>()?,
            origin: self.origin,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
enum WireAux {
    None,
    InnerPlan { rollouts: Vec<WireRollout>, top_k: usize },
    InnerHidden { vectors: Vec<Vec<f64>>, selection: HiddenSelection },
    SimRollout { rollout: WireRollout },
}

impl From<&AuxInfo> for WireAux {
    fn from(a: &AuxInfo) -> WireAux {
        match a {
            AuxInfo::None => WireAux::None,
            AuxInfo::InnerPlan { rollouts, top_k } => WireAux::InnerPlan {
                rollouts: rollouts.iter().map(WireRollout::from).collect(),
                top_k: *top_k,
            },
            AuxInfo::InnerHidden { vectors, selection } => {
                WireAux::InnerHidden { vectors: vectors.clone(), selection: *selection }
            }
            AuxInfo::SimRollout(r) => WireAux::SimRollout { rollout: r.into() },
        }
    }
}

impl WireAux {
    fn decode(&self) -> Result<AuxInfo, DataError> {
        Ok(match self {
            WireAux::None => AuxInfo::None,
            WireAux::InnerPlan { rollouts, top_k } => AuxInfo::InnerPlan {
                rollouts: rollouts.iter().map(|r| r.decode()).collect::<Result<_, _>>()?,
                top_k: *top_k,
            },
            WireAux::InnerHidden { vectors, selection } => {
                AuxInfo::InnerHidden { vectors: vectors.clone(), selection: *selection }
            }
            WireAux::SimRollout { rollout } => AuxInfo::SimRollout(rollout.decode()?),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    level_id: u64,
    episode_id: u64,
    t: usize,
    obs: WireObs,
    action: Action,
    reward: f64,
    done: bool,
    event_flag: u8,
    aux: WireAux,
    labels: Option<Labels>,
    agent: PolicyKind,
}

pub fn save_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<(), DataError> {
    serde_json::to_writer(&mut w, &dataset.manifest)?;
    w.write_all(b"\n")?;
    for r in &dataset.records {
        let wire = WireRecord {
            level_id: r.level_id,
            episode_id: r.episode_id,
            t: r.t,
            obs: (&r.observation).into(),
            action: r.action,
            reward: r.reward,
            done: r.done,
            event_flag: r.event_flag,
            aux: (&r.aux).into(),
            labels: r.labels.clone(),
            agent: r.agent,
        };
        serde_json::to_writer(&mut w, &wire)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset<R: BufRead>(r: R) -> Result<Dataset, DataError> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| DataError::Malformed("empty file".into()))??;
    let manifest: Manifest = serde_json::from_str(&first)?;
    if manifest.version != DATASET_VERSION {
        return Err(DataError::Version(manifest.version));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord = serde_json::from_str(&line)?;
        records.push(Record {
            level_id: wire.level_id,
            episode_id: wire.episode_id,
            t: wire.t,
            observation: wire.obs.decode()?,
            action: wire.action,
            reward: wire.reward,
            done: wire.done,
            event_flag: wire.event_flag,
            aux: wire.aux.decode()?,
            labels: wire.labels,
            agent: wire.agent,
        });
    }
    let mut ds = Dataset { manifest, records };
    ds.recount();
    if ds.manifest.counts.records != ds.records.len() {
        return Err(DataError::Malformed("manifest counts disagree with records".into()));
    }
    Ok(ds)
}

pub fn save_dataset_file(dataset: &Dataset, path: &std::path::Path) -> Result<(), DataError> {
    let f = std::fs::File::create(path)?;
    save_dataset(dataset, std::io::BufWriter::new(f))
}

pub fn load_dataset_file(path: &std::path::Path) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path)?;
    load_dataset(std::io::BufReader::new(f))
}
