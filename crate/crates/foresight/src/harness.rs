//! Experiment orchestration: trains agents, world models, and predictors
//! for every cell of a declarative experiment spec, caches finished cells
//! by config hash, and renders comparison tables (prediction-accuracy
//! sweeps, ablation deltas, agent learning curves).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    evaluate_solve_rate, train_actor_critic, AgentError, HiddenSelection, PlannerConfig, Policy,
    PolicyKind, TrainConfig, TrainingLog,
};
use crate::datagen::{
    collect, collect_transitions, split, AuxMode, DataError, SplitSizes, Splits,
};
use crate::gridworld::{EnvConfig, EnvVariant, GenConfig};
use crate::predictor::{
    evaluate, train_predictor, Metrics, PredError, PredictorConfig, Task,
};
use crate::world_model::{train_model, Capacity, ModelConfig, ModelError, WorldModel};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("experiment spec is invalid: {0}")]
    InvalidSpec(String),
    #[error("report is missing cells: {0}")]
    MissingCells(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Predictor(#[from] PredError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The three auxiliary-information settings compared in experiments.
/// `Inner` resolves per agent kind: search rollouts for the planner,
/// hidden activations for the network agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    Baseline,
    Inner,
    Simulation,
}

/// Concrete aux mode for an (agent, aux) pair; `None` when the pair is
/// undefined (simulation aux for the explicit planner, whose plan already
/// is a model rollout).
pub fn aux_mode_for(agent: PolicyKind, aux: AuxKind) -> Option<AuxMode> {
    match (aux, agent) {
        (AuxKind::Baseline, _) => Some(AuxMode::Baseline),
        (AuxKind::Inner, PolicyKind::MctsPlanner) => Some(AuxMode::InnerPlan { top_k: 3 }),
        (AuxKind::Inner, PolicyKind::Feedforward) => {
            Some(AuxMode::InnerHidden { selection: HiddenSelection::AllLayers })
        }
        (AuxKind::Inner, PolicyKind::Recurrent) => {
            Some(AuxMode::InnerHidden { selection: HiddenSelection::AllTicks })
        }
        (AuxKind::Simulation, PolicyKind::MctsPlanner) => None,
        (AuxKind::Simulation, _) => Some(AuxMode::Simulation),
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Budgets {
    /// Environment transitions for actor-critic training.
    pub agent_transitions: usize,
    /// Replay transitions for world-model training.
    pub model_transitions: usize,
    pub model_epochs: usize,
    pub predictor_max_epochs: usize,
    /// Held-out levels for agent solve-rate evaluation.
    pub eval_levels: usize,
}

impl Default for Budgets {
    fn default() -> Budgets {
        Budgets {
            agent_transitions: 10_000_000,
            model_transitions: 20_000,
            model_epochs: 20,
            predictor_max_epochs: 40,
            eval_levels: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub agents: Vec<PolicyKind>,
    pub variants: Vec<EnvVariant>,
    /// Model capacities exercised; `Small` cells exist only where a model
    /// is in play (planner agent or simulation aux).
    pub capacities: Vec<Capacity>,
    pub aux: Vec<AuxKind>,
    pub tasks: Vec<Task>,
    pub train_sizes: Vec<usize>,
    pub val_size: usize,
    pub test_size: usize,
    /// Predictor seeds per cell.
    pub seeds: Vec<u64>,
    pub budgets: Budgets,
    pub gen: GenConfig,
    /// Master seed for agent/model/data stages.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// The full desk-scale experiment grid.
    pub fn desk_default(out_dir: PathBuf) -> ExperimentSpec {
        ExperimentSpec {
            agents: vec![PolicyKind::MctsPlanner, PolicyKind::Recurrent, PolicyKind::Feedforward],
            variants: vec![EnvVariant::Default],
            capacities: vec![Capacity::Default],
            aux: vec![AuxKind::Baseline, AuxKind::Inner, AuxKind::Simulation],
            tasks: vec![Task::Action, Task::Event],
            train_sizes: vec![500, 1_000, 2_000, 5_000, 10_000, 20_000],
            val_size: 4_000,
            test_size: 4_000,
            seeds: vec![0, 1, 2],
            budgets: Budgets::default(),
            gen: GenConfig::default(),
            seed: 0,
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.agents.is_empty() || self.aux.is_empty() || self.tasks.is_empty() {
            return bad("agents, aux, and tasks must be non-empty");
        }
        if self.train_sizes.is_empty() || self.seeds.is_empty() {
            return bad("train_sizes and seeds must be non-empty");
        }
        if self.variants.is_empty() || self.capacities.is_empty() {
            return bad("variants and capacities must be non-empty");
        }
        Ok(())
    }
}

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub agent: PolicyKind,
    pub variant: EnvVariant,
    pub capacity: Capacity,
    pub aux: AuxKind,
    pub task: Task,
    pub train_size: usize,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "{:?}/{:?}/{:?}/{:?}/{:?}/{}/s{}",
            self.agent, self.variant, self.capacity, self.aux, self.task, self.train_size, self.seed
        )
    }
}

/// Every valid cell of the spec, in deterministic order. Simulation aux is
/// never paired with the planner, and the small-model ablation only exists
/// where a model participates.
pub fn cells_of(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut out = Vec::new();
    for &variant in &spec.variants {
        for &capacity in &spec.capacities {
            for &agent in &spec.agents {
                for &aux in &spec.aux {
                    if aux_mode_for(agent, aux).is_none() {
                        continue;
                    }
                    let model_involved =
                        agent == PolicyKind::MctsPlanner || aux == AuxKind::Simulation;
                    if capacity == Capacity::Small && !model_involved {
                        continue;
                    }
                    for &task in &spec.tasks {
                        for &train_size in &spec.train_sizes {
                            for &seed in &spec.seeds {
                                out.push(Cell { agent, variant, capacity, aux, task, train_size, seed });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Row {
    pub cell: Cell,
    pub metrics: Metrics,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<Row>,
    pub failures: Vec<CellFailure>,
}

impl ResultTable {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ResultTable, HarnessError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// FNV-1a over the canonical JSON of a config plus the code version; the
/// cache key for finished work.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("serializable config");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes().chain(CODE_VERSION.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{h:016x}")
}

/// Median plus a two-standard-error band.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub median: f64,
    pub two_se: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Aggregate { median, two_se: 2.0 * (var / n as f64).sqrt(), n }
}

/// The headline comparison metric: exact-match for the action task, F1 for
/// the event task.
pub fn headline(task: Task, m: &Metrics) -> f64 {
    match task {
        Task::Action => m.exact_match,
        Task::Event => m.f1,
    }
}

// ---------------------------------------------------------------------------
// Artifact construction (agents, models, datasets) shared across cells
// ---------------------------------------------------------------------------

/// Heavy intermediate artifacts for one environment variant, built once and
/// shared by every cell of that variant.
pub struct VariantArtifacts {
    pub env: EnvConfig,
    pub policies: HashMap<PolicyKind, Policy>,
    pub logs: HashMap<PolicyKind, TrainingLog>,
    pub solve_rates: HashMap<PolicyKind, f64>,
    pub models: HashMap<Capacity, WorldModel>,
    /// Splits per (agent, capacity, aux mode).
    pub splits: HashMap<(PolicyKind, Capacity, AuxKind), Splits>,
}

fn agent_cache_path(spec: &ExperimentSpec, variant: EnvVariant, kind: PolicyKind) -> PathBuf {
    let key = config_hash(&(
        "agent",
        variant,
        kind,
        spec.budgets.agent_transitions,
        spec.gen,
        spec.seed,
    ));
    spec.out_dir.join("agents").join(format!("{kind:?}-{variant:?}-{key}.json"))
}

fn model_cache_path(spec: &ExperimentSpec, variant: EnvVariant, capacity: Capacity) -> PathBuf {
    let key = config_hash(&(
        "model",
        variant,
        capacity,
        spec.budgets.model_transitions,
        spec.budgets.model_epochs,
        spec.budgets.agent_transitions,
        spec.gen,
        spec.seed,
    ));
    spec.out_dir.join("models").join(format!("{capacity:?}-{variant:?}-{key}.json"))
}

/// Train (or load cached) policies and world models and collect datasets
/// for one variant. Progress lines go to stderr.
pub fn build_variant_artifacts(
    spec: &ExperimentSpec,
    variant: EnvVariant,
) -> Result<VariantArtifacts, HarnessError> {
    let env = EnvConfig::with_variant(variant);
    std::fs::create_dir_all(spec.out_dir.join("agents"))?;
    std::fs::create_dir_all(spec.out_dir.join("models"))?;

    let mut policies = HashMap::new();
    let mut logs = HashMap::new();
    let mut solve_rates = HashMap::new();

    // Network agents first: the planner's world model trains on replay from
    // the feedforward agent.
    let mut needed: Vec<PolicyKind> = spec.agents.clone();
    let needs_model = spec.agents.contains(&PolicyKind::MctsPlanner)
        || spec.aux.contains(&AuxKind::Simulation);
    if needs_model && !needed.contains(&PolicyKind::Feedforward) {
        needed.push(PolicyKind::Feedforward);
    }
    for &kind in &needed {
        if kind == PolicyKind::MctsPlanner {
            policies.insert(kind, Policy::MctsPlanner(PlannerConfig::default()));
            continue;
        }
        let path = agent_cache_path(spec, variant, kind);
        let policy = if path.exists() {
            eprintln!("[harness] cached agent {kind:?} ({variant:?})");
            Policy::load(std::io::BufReader::new(std::fs::File::open(&path)?))?
        } else {
            eprintln!("[harness] training agent {kind:?} ({variant:?})");
            let cfg = TrainConfig {
                transitions: spec.budgets.agent_transitions,
                ..TrainConfig::default()
            };
            let (policy, log) = train_actor_critic(&env, &spec.gen, kind, &cfg, spec.seed)?;
            policy.save(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
            std::fs::write(
                path.with_extension("log.json"),
                serde_json::to_string(&log)?,
            )?;
            logs.insert(kind, log);
            policy
        };
        if let Ok(text) = std::fs::read_to_string(path.with_extension("log.json")) {
            if let Ok(log) = serde_json::from_str::<TrainingLog>(&text) {
                logs.insert(kind, log);
            }
        }
        policies.insert(kind, policy);
    }

    // World models per capacity, trained on sampled-action replay from the
    // feedforward agent.
    let mut models = HashMap::new();
    if needs_model {
        let behavior = &policies[&PolicyKind::Feedforward];
        for &capacity in &spec.capacities {
            let path = model_cache_path(spec, variant, capacity);
            let model = if path.exists() {
                eprintln!("[harness] cached model {capacity:?} ({variant:?})");
                WorldModel::load(std::io::BufReader::new(std::fs::File::open(&path)?))?
            } else {
                eprintln!("[harness] training model {capacity:?} ({variant:?})");
                let transitions = collect_transitions(
                    behavior,
                    None,
                    &env,
                    &spec.gen,
                    spec.budgets.model_transitions,
                    spec.seed.wrapping_add(101),
                )?;
                let cfg = ModelConfig {
                    epochs: spec.budgets.model_epochs,
                    ..ModelConfig::with_capacity(capacity)
                };
                let model = train_model(&transitions, &cfg, env.step_limit, spec.seed)?;
                model.save(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
                model
            };
            models.insert(capacity, model);
        }
    }

    // Agent quality on held-out levels, for the run summary.
    for (&kind, policy) in &policies {
        let model = models.get(&Capacity::Default);
        let sr = evaluate_solve_rate(
            policy,
            model,
            &env,
            &spec.gen,
            spec.budgets.eval_levels,
            1_000_000,
            7,
        )?;
        solve_rates.insert(kind, sr);
        eprintln!("[harness] solve rate {kind:?} ({variant:?}): {sr:.3}");
    }

    // Datasets: one collection per (agent, capacity, aux kind) that any
    // cell needs, split into nested train subsets plus val/test.
    let mut splits_map = HashMap::new();
    let largest = *spec.train_sizes.iter().max().unwrap();
    let sizes = SplitSizes {
        train_sizes: spec.train_sizes.clone(),
        val: spec.val_size,
        test: spec.test_size,
    };
    // Collect enough transitions that labeled records cover all parts:
    // episodes lose their last L records to labeling, and splitting rounds
    // up to whole episodes.
    let collect_n = ((largest + spec.val_size + spec.test_size) as f64 * 1.35) as usize + 200;
    for &agent in &spec.agents {
        for &capacity in &spec.capacities {
            let model_involved = agent == PolicyKind::MctsPlanner;
            for &aux in &spec.aux {
                let Some(aux_mode) = aux_mode_for(agent, aux) else { continue };
                let sim = aux == AuxKind::Simulation;
                if capacity == Capacity::Small && !(model_involved || sim) {
                    continue;
                }
                let model = if model_involved || sim { models.get(&capacity) } else { None };
                eprintln!(
                    "[harness] collecting {collect_n} transitions: {agent:?}/{aux:?}/{capacity:?} ({variant:?})"
                );
                let ds = collect(
                    &policies[&agent],
                    model,
                    &env,
                    &spec.gen,
                    collect_n,
                    aux_mode,
                    spec.seed.wrapping_add(7),
                )?;
                let sp = split(&ds, &sizes, spec.seed.wrapping_add(13))?;
                splits_map.insert((agent, capacity, aux), sp);
            }
        }
    }

    Ok(VariantArtifacts { env, policies, logs, solve_rates, models, splits: splits_map })
}

// ---------------------------------------------------------------------------
// Running the grid
// ---------------------------------------------------------------------------

fn cell_result_path(spec: &ExperimentSpec, cell: &Cell) -> (String, PathBuf) {
    let hash = config_hash(&("cell", cell, &spec.budgets, spec.gen, spec.seed));
    let path = spec.out_dir.join("results").join(format!("{hash}.json"));
    (hash, path)
}

/// Execute every cell of the spec, skipping cells whose config hash already
/// has a stored result. Failures are recorded and the run continues.
/// `jobs` > 1 trains independent predictor cells on worker threads.
pub fn run(spec: &ExperimentSpec, jobs: usize) -> Result<ResultTable, HarnessError> {
    spec.validate()?;
    std::fs::create_dir_all(spec.out_dir.join("results"))?;
    let all_cells = cells_of(spec);
    let mut table = ResultTable::default();

    // Partition into cached and pending.
    let mut pending: Vec<(Cell, String, PathBuf)> = Vec::new();
    for cell in all_cells {
        let (hash, path) = cell_result_path(spec, &cell);
        if path.exists() {
            let row: Row = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            table.rows.push(row);
        } else {
            pending.push((cell, hash, path));
        }
    }
    eprintln!("[harness] {} cells cached, {} to run", table.rows.len(), pending.len());
    if pending.is_empty() {
        table.save(&spec.out_dir.join("table.json"))?;
        return Ok(table);
    }

    // Build artifacts only for variants that still have pending cells.
    let mut variants: Vec<EnvVariant> = Vec::new();
    for (c, _, _) in &pending {
        if !variants.contains(&c.variant) {
            variants.push(c.variant);
        }
    }
    let mut artifacts: HashMap<EnvVariant, Arc<VariantArtifacts>> = HashMap::new();
    for v in variants {
        artifacts.insert(v, Arc::new(build_variant_artifacts(spec, v)?));
    }

    let run_cell = |cell: &Cell| -> Result<Metrics, HarnessError> {
        let art = &artifacts[&cell.variant];
        let sp = art
            .splits
            .get(&(cell.agent, cell.capacity, cell.aux))
            .ok_or_else(|| HarnessError::InvalidSpec(format!("no dataset for {}", cell.label())))?;
        let size_idx = spec
            .train_sizes
            .iter()
            .position(|&s| s == cell.train_size)
            .ok_or_else(|| HarnessError::InvalidSpec("unknown train size".into()))?;
        let aux_mode = aux_mode_for(cell.agent, cell.aux).expect("valid cell");
        let mut cfg = PredictorConfig::new(cell.task, aux_mode, cell.seed);
        cfg.max_epochs = spec.budgets.predictor_max_epochs;
        let (p, _) = train_predictor(&sp.train[size_idx], &sp.val, &cfg)?;
        Ok(evaluate(&p, &sp.test)?)
    };

    let outcomes: Vec<(Cell, String, PathBuf, Result<Metrics, String>)> = if jobs <= 1 {
        pending
            .into_iter()
            .map(|(cell, hash, path)| {
                eprintln!("[harness] cell {}", cell.label());
                let r = run_cell(&cell).map_err(|e| e.to_string());
                (cell, hash, path, r)
            })
            .collect()
    } else {
        let pending = std::sync::Mutex::new(pending.into_iter());
        let results = std::sync::Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let next = pending.lock().unwrap().next();
                    let Some((cell, hash, path)) = next else { break };
                    eprintln!("[harness] cell {}", cell.label());
                    let r = run_cell(&cell).map_err(|e| e.to_string());
                    results.lock().unwrap().push((cell, hash, path, r));
                });
            }
        });
        let mut v = results.into_inner().unwrap();
        v.sort_by_key(|(c, ..)| c.label());
        v
    };

    for (cell, hash, path, outcome) in outcomes {
        match outcome {
            Ok(metrics) => {
                let row = Row { cell, metrics, config_hash: hash };
                std::fs::write(&path, serde_json::to_string(&row)?)?;
                table.rows.push(row);
            }
            Err(error) => {
                eprintln!("[harness] FAILED {}: {error}", cell.label());
                table.failures.push(CellFailure { cell, error });
            }
        }
    }
    table.save(&spec.out_dir.join("table.json"))?;
    if !table.failures.is_empty() {
        eprintln!("[harness] {} cell(s) failed", table.failures.len());
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Sweep,
    AblationDelta,
    LearningCurve,
}

/// Grouping key for aggregation: a cell minus its seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct GroupKey {
    agent_ix: u8,
    variant_ix: u8,
    capacity_ix: u8,
    aux_ix: u8,
    task_ix: u8,
    train_size: usize,
}

impl GroupKey {
    fn of(c: &Cell) -> GroupKey {
        GroupKey {
            agent_ix: match c.agent {
                PolicyKind::MctsPlanner => 0,
                PolicyKind::Recurrent => 1,
                PolicyKind::Feedforward => 2,
            },
            variant_ix: match c.variant {
                EnvVariant::Default => 0,
                EnvVariant::StochasticNoop => 1,
                EnvVariant::PomdpJitter => 2,
            },
            capacity_ix: match c.capacity {
                Capacity::Default => 0,
                Capacity::Small => 1,
            },
            aux_ix: match c.aux {
                AuxKind::Baseline => 0,
                AuxKind::Inner => 1,
                AuxKind::Simulation => 2,
            },
            task_ix: match c.task {
                Task::Action => 0,
                Task::Event => 1,
            },
            train_size: c.train_size,
        }
    }
}

fn group_rows(table: &ResultTable) -> std::collections::BTreeMap<GroupKey, Vec<&Row>> {
    let mut groups: std::collections::BTreeMap<GroupKey, Vec<&Row>> = Default::default();
    for row in &table.rows {
        groups.entry(GroupKey::of(&row.cell)).or_default().push(row);
    }
    groups
}

fn describe(c: &Cell) -> (String, String, String, String, String) {
    (
        format!("{:?}", c.agent),
        format!("{:?}", c.variant),
        format!("{:?}", c.capacity),
        format!("{:?}", c.aux),
        format!("{:?}", c.task),
    )
}

/// Sweep report: headline metric vs training-set size per
/// (agent, variant, capacity, aux, task), aggregated over seeds.
pub fn report_sweep(table: &ResultTable) -> (String, String) {
    let mut csv = String::from("agent,variant,capacity,aux,task,train_size,median,two_se,n\n");
    let mut md = String::from(
        "| agent | variant | capacity | aux | task | size | median | ±2SE | n |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for (_, rows) in group_rows(table) {
        let c = &rows[0].cell;
        let vals: Vec<f64> = rows.iter().map(|r| headline(c.task, &r.metrics)).collect();
        let agg = aggregate(&vals);
        let (a, v, cap, x, t) = describe(c);
        let _ = writeln!(
            csv,
            "{a},{v},{cap},{x},{t},{},{:.6},{:.6},{}",
            c.train_size, agg.median, agg.two_se, agg.n
        );
        let _ = writeln!(
            md,
            "| {a} | {v} | {cap} | {x} | {t} | {} | {:.4} | {:.4} | {} |",
            c.train_size, agg.median, agg.two_se, agg.n
        );
    }
    (csv, md)
}

/// Ablation report: per matched (agent, aux, task, size, seed), the change
/// in the headline metric from the default setting (default variant,
/// default capacity) to each ablated setting, aggregated over seeds.
pub fn report_ablation_delta(table: &ResultTable) -> Result<(String, String), HarnessError> {
    let is_default = |c: &Cell| c.variant == EnvVariant::Default && c.capacity == Capacity::Default;
    let mut base: HashMap<(PolicyKind, AuxKind, Task, usize, u64), f64> = HashMap::new();
    for row in &table.rows {
        if is_default(&row.cell) {
            let c = &row.cell;
            base.insert(
                (c.agent, c.aux, c.task, c.train_size, c.seed),
                headline(c.task, &row.metrics),
            );
        }
    }
    if base.is_empty() {
        return Err(HarnessError::MissingCells("no default-setting rows to compare against".into()));
    }
    let mut groups: std::collections::BTreeMap<GroupKey, Vec<f64>> = Default::default();
    let mut reps: HashMap<GroupKey, Cell> = HashMap::new();
    let mut missing = Vec::new();
    for row in &table.rows {
        if is_default(&row.cell) {
            continue;
        }
        let c = &row.cell;
        match base.get(&(c.agent, c.aux, c.task, c.train_size, c.seed)) {
            Some(&b) => {
                let key = GroupKey::of(c);
                groups.entry(key).or_default().push(b - headline(c.task, &row.metrics));
                reps.insert(key, *c);
            }
            None => missing.push(c.label()),
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingCells(missing.join(", ")));
    }
    let mut csv =
        String::from("agent,variant,capacity,aux,task,train_size,delta_median,two_se,n\n");
    let mut md = String::from(
        "| agent | variant | capacity | aux | task | size | Δ (default − ablated) | ±2SE | n |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for (key, deltas) in groups {
        let c = &reps[&key];
        let agg = aggregate(&deltas);
        let (a, v, cap, x, t) = describe(c);
        let _ = writeln!(
            csv,
            "{a},{v},{cap},{x},{t},{},{:.6},{:.6},{}",
            c.train_size, agg.median, agg.two_se, agg.n
        );
        let _ = writeln!(
            md,
            "| {a} | {v} | {cap} | {x} | {t} | {} | {:.4} | {:.4} | {} |",
            c.train_size, agg.median, agg.two_se, agg.n
        );
    }
    Ok((csv, md))
}

/// Learning-curve report from the agent training logs saved during a run.
pub fn report_learning_curves(out_dir: &Path) -> Result<(String, String), HarnessError> {
    let mut csv = String::from("agent_file,transitions,episodes,solve_rate,mean_return\n");
    let mut md =
        String::from("| agent | transitions | solve rate |\n|---|---|---|\n");
    let dir = out_dir.join("agents");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|_| HarnessError::MissingCells(format!("no agent logs under {}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".log.json"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(HarnessError::MissingCells("no agent training logs found".into()));
    }
    for path in entries {
        let log: TrainingLog = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let name = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        for w in &log.windows {
            let _ = writeln!(
                csv,
                "{name},{},{},{:.6},{:.6}",
                w.transitions_seen, w.episodes, w.solve_rate, w.mean_return
            );
        }
        if let Some(last) = log.windows.last() {
            let _ = writeln!(md, "| {name} | {} | {:.3} |", last.transitions_seen, last.solve_rate);
        }
    }
    Ok((csv, md))
}

pub fn report(
    table: &ResultTable,
    kind: ReportKind,
    out_dir: &Path,
) -> Result<(String, String), HarnessError> {
    let (csv, md) = match kind {
        ReportKind::Sweep => report_sweep(table),
        ReportKind::AblationDelta => report_ablation_delta(table)?,
        ReportKind::LearningCurve => report_learning_curves(out_dir)?,
    };
    let stem = match kind {
        ReportKind::Sweep => "sweep",
        ReportKind::AblationDelta => "ablation_delta",
        ReportKind::LearningCurve => "learning_curve",
    };
    std::fs::create_dir_all(out_dir.join("reports"))?;
    std::fs::write(out_dir.join("reports").join(format!("{stem}.csv")), &csv)?;
    std::fs::write(out_dir.join("reports").join(format!("{stem}.md")), &md)?;
    Ok((csv, md))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(dir: PathBuf) -> ExperimentSpec {
        ExperimentSpec {
            agents: vec![PolicyKind::Feedforward],
            variants: vec![EnvVariant::Default],
            capacities: vec![Capacity::Default],
            aux: vec![AuxKind::Baseline],
            tasks: vec![Task::Action],
            train_sizes: vec![60],
            val_size: 30,
            test_size: 30,
            seeds: vec![0],
            budgets: Budgets {
                agent_transitions: 500,
                model_transitions: 1_000,
                model_epochs: 1,
                predictor_max_epochs: 2,
                eval_levels: 10,
            },
            gen: GenConfig::default(),
            seed: 0,
            out_dir: dir,
        }
    }

    #[test]
    fn cell_grid_never_pairs_planner_with_simulation() {
        let mut spec = tiny_spec(PathBuf::from("/tmp/unused"));
        spec.agents =
            vec![PolicyKind::MctsPlanner, PolicyKind::Recurrent, PolicyKind::Feedforward];
        spec.aux = vec![AuxKind::Baseline, AuxKind::Inner, AuxKind::Simulation];
        spec.tasks = vec![Task::Action, Task::Event];
        spec.seeds = vec![0, 1, 2];
        let cells = cells_of(&spec);
        assert!(!cells
            .iter()
            .any(|c| c.agent == PolicyKind::MctsPlanner && c.aux == AuxKind::Simulation));
        // {3 agents} x {baseline, inner} + {2 agents} x {simulation} combos,
        // times tasks x sizes x seeds.
        assert_eq!(cells.len(), 8 * 2 * 1 * 3);
    }

    #[test]
    fn small_capacity_cells_exist_only_where_a_model_participates() {
        let mut spec = tiny_spec(PathBuf::from("/tmp/unused"));
        spec.agents = vec![PolicyKind::MctsPlanner, PolicyKind::Feedforward];
        spec.capacities = vec![Capacity::Default, Capacity::Small];
        spec.aux = vec![AuxKind::Baseline, AuxKind::Inner, AuxKind::Simulation];
        for c in cells_of(&spec) {
            if c.capacity == Capacity::Small {
                assert!(
                    c.agent == PolicyKind::MctsPlanner || c.aux == AuxKind::Simulation,
                    "unexpected small-capacity cell {}",
                    c.label()
                );
            }
        }
    }

    #[test]
    fn aggregate_matches_hand_computation() {
        // Values 0.2, 0.4, 0.9: median 0.4; mean 0.5; sample var 0.13;
        // SE = sqrt(0.13/3); band = 2 SE.
        let a = aggregate(&[0.9, 0.2, 0.4]);
        assert_eq!(a.median, 0.4);
        assert!((a.two_se - 2.0 * (0.13f64 / 3.0).sqrt()).abs() < 1e-12);
        let b = aggregate(&[0.3, 0.1]);
        assert!((b.median - 0.2).abs() < 1e-12);
    }

    #[test]
    fn config_hash_is_stable_and_distinguishes_configs() {
        let spec_a = tiny_spec(PathBuf::from("/tmp/a"));
        let h1 = config_hash(&spec_a.budgets);
        let h2 = config_hash(&spec_a.budgets);
        assert_eq!(h1, h2);
        let mut other = spec_a.budgets;
        other.predictor_max_epochs += 1;
        assert_ne!(h1, config_hash(&other));
    }

    #[test]
    fn run_executes_caches_and_reruns_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path().to_path_buf());
        let table = run(&spec, 1).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.failures.is_empty());
        // Rerun: everything cached, zero trainings -> identical table.
        let again = run(&spec, 1).unwrap();
        assert_eq!(again.rows.len(), 1);
        assert_eq!(again.rows[0].config_hash, table.rows[0].config_hash);
        assert_eq!(again.rows[0].metrics.exact_match, table.rows[0].metrics.exact_match);
        // Sweep report renders both formats.
        let (csv, md) = report(&table, ReportKind::Sweep, dir.path()).unwrap();
        assert!(csv.lines().count() >= 2);
        assert!(md.contains("Feedforward"));
        // Learning-curve report sees the saved agent log.
        let (csv, _) = report(&table, ReportKind::LearningCurve, dir.path()).unwrap();
        assert!(csv.lines().count() >= 2);
    }

    #[test]
    fn identical_runs_give_identical_deltas_of_zero() {
        // Hand-built table: same metric in default and ablated settings.
        let cell = |variant, seed| Cell {
            agent: PolicyKind::Feedforward,
            variant,
            capacity: Capacity::Default,
            aux: AuxKind::Baseline,
            task: Task::Action,
            train_size: 100,
            seed,
        };
        let m = |v: f64| Metrics {
            exact_match: v,
            per_step: vec![],
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            brier: 0.0,
            n: 10,
        };
        let mut table = ResultTable::default();
        for seed in 0..3 {
            table.rows.push(Row {
                cell: cell(EnvVariant::Default, seed),
                metrics: m(0.5),
                config_hash: "x".into(),
            });
            table.rows.push(Row {
                cell: cell(EnvVariant::StochasticNoop, seed),
                metrics: m(0.5),
                config_hash: "y".into(),
            });
        }
        let (csv, _) = report_ablation_delta(&table).unwrap();
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[6], "0.000000");
    }

    #[test]
    fn ablation_report_lists_missing_default_cells() {
        let mut table = ResultTable::default();
        table.rows.push(Row {
            cell: Cell {
                agent: PolicyKind::Feedforward,
                variant: EnvVariant::StochasticNoop,
                capacity: Capacity::Default,
                aux: AuxKind::Baseline,
                task: Task::Action,
                train_size: 100,
                seed: 0,
            },
            metrics: Metrics {
                exact_match: 0.5,
                per_step: vec![],
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                brier: 0.0,
                n: 10,
            },
            config_hash: "z".into(),
        });
        assert!(matches!(
            report_ablation_delta(&table),
            Err(HarnessError::MissingCells(_))
        ));
    }
}
