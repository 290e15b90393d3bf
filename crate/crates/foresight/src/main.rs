//! Command-line entry point: generate levels, train agents/models/predictors,
//! collect datasets, and run full experiment grids with reports.

use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use foresight::agents::{
    evaluate_solve_rate, train_actor_critic, Policy, PolicyKind, TrainConfig,
};
use foresight::datagen::{collect, collect_transitions, load_dataset_file, save_dataset_file, AuxMode};
use foresight::gridworld::{generate_level, EnvConfig, EnvVariant, GenConfig};
use foresight::harness::{
    aux_mode_for, report, run, AuxKind, ExperimentSpec, ReportKind, ResultTable,
};
use foresight::predictor::{evaluate, train_predictor, Predictor, PredictorConfig, Task};
use foresight::world_model::{train_model, Capacity, ModelConfig, WorldModel};

#[derive(Parser)]
#[command(
    name = "foresight",
    about = "Gridworld testbed measuring how predictable trained RL agents' future actions and events are",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Default,
    StochasticNoop,
    PomdpJitter,
}

impl From<VariantArg> for EnvVariant {
    fn from(v: VariantArg) -> EnvVariant {
        match v {
            VariantArg::Default => EnvVariant::Default,
            VariantArg::StochasticNoop => EnvVariant::StochasticNoop,
            VariantArg::PomdpJitter => EnvVariant::PomdpJitter,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    MctsPlanner,
    Recurrent,
    Feedforward,
}

impl From<AgentArg> for PolicyKind {
    fn from(a: AgentArg) -> PolicyKind {
        match a {
            AgentArg::MctsPlanner => PolicyKind::MctsPlanner,
            AgentArg::Recurrent => PolicyKind::Recurrent,
            AgentArg::Feedforward => PolicyKind::Feedforward,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AuxArg {
    Baseline,
    Inner,
    Simulation,
}

impl From<AuxArg> for AuxKind {
    fn from(a: AuxArg) -> AuxKind {
        match a {
            AuxArg::Baseline => AuxKind::Baseline,
            AuxArg::Inner => AuxKind::Inner,
            AuxArg::Simulation => AuxKind::Simulation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Action,
    Event,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Action => Task::Action,
            TaskArg::Event => Task::Event,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CapacityArg {
    Default,
    Small,
}

impl From<CapacityArg> for Capacity {
    fn from(c: CapacityArg) -> Capacity {
        match c {
            CapacityArg::Default => Capacity::Default,
            CapacityArg::Small => Capacity::Small,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Sweep,
    AblationDelta,
    LearningCurve,
}

impl From<ReportArg> for ReportKind {
    fn from(r: ReportArg) -> ReportKind {
        match r {
            ReportArg::Sweep => ReportKind::Sweep,
            ReportArg::AblationDelta => ReportKind::AblationDelta,
            ReportArg::LearningCurve => ReportKind::LearningCurve,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate levels and write them as JSON lines (with an ASCII preview
    /// on stderr unless --quiet).
    GenLevels {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Train an actor-critic policy and save the checkpoint.
    TrainAgent {
        #[arg(long, value_enum)]
        kind: AgentArg,
        #[arg(long, value_enum, default_value = "default")]
        variant: VariantArg,
        #[arg(long, default_value_t = 10_000_000)]
        transitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Held-out levels for the final solve-rate report.
        #[arg(long, default_value_t = 200)]
        eval_levels: usize,
    },
    /// Train a one-step world model on replay from a saved policy.
    TrainModel {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        variant: VariantArg,
        #[arg(long, value_enum, default_value = "default")]
        capacity: CapacityArg,
        #[arg(long, default_value_t = 20_000)]
        transitions: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect a labeled dataset of agent transitions with auxiliary info.
    Collect {
        #[arg(long)]
        policy: PathBuf,
        /// World model checkpoint; required for --aux simulation and for
        /// the planner agent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "default")]
        variant: VariantArg,
        #[arg(long, value_enum, default_value = "baseline")]
        aux: AuxArg,
        #[arg(long, default_value_t = 10_000)]
        transitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor on a collected dataset and save the checkpoint.
    TrainPredictor {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        max_epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved predictor on a test dataset; prints metrics JSON.
    Evaluate {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Run a full experiment grid. Reads a JSON spec file or uses the
    /// desk-scale default grid; caches finished cells under --out.
    Run {
        /// JSON experiment spec; omit for the default grid.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Master seed (ignored when --spec is given).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a report from a finished run directory.
    Report {
        /// Run directory containing table.json.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum)]
        kind: ReportArg,
    },
}

fn load_policy(path: &PathBuf) -> Result<Policy> {
    let f = std::fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    Ok(Policy::load(BufReader::new(f))?)
}

fn load_model(path: &PathBuf) -> Result<WorldModel> {
    let f = std::fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    Ok(WorldModel::load(BufReader::new(f))?)
}

fn render_level(level: &foresight::gridworld::Level) -> String {
    let mut out = String::new();
    for r in 0..level.height {
        for c in 0..level.width {
            let cell = foresight::gridworld::Cell(r, c);
            let ch = if level.is_wall(cell) {
                '#'
            } else if cell == level.player {
                '@'
            } else if level.boxes.contains(&cell) {
                if level.is_target(cell) { '*' } else { '$' }
            } else if level.is_target(cell) {
                '.'
            } else if cell == level.blue {
                'b'
            } else {
                ' '
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let gen = GenConfig::default();
    match cli.command {
        Command::GenLevels { count, seed, out, quiet } => {
            let mut lines = String::new();
            for i in 0..count {
                let level = generate_level(seed + i as u64, &gen)?;
                lines.push_str(&serde_json::to_string(&level)?);
                lines.push('\n');
                if !quiet {
                    eprintln!("# level seed {}\n{}", seed + i as u64, render_level(&level));
                }
            }
            match out {
                Some(path) => std::fs::write(path, lines)?,
                None => print!("{lines}"),
            }
        }
        Command::TrainAgent { kind, variant, transitions, seed, out, eval_levels } => {
            let kind: PolicyKind = kind.into();
            if kind == PolicyKind::MctsPlanner {
                bail!("the planner is search, not learned weights; train a world model instead");
            }
            let env = EnvConfig::with_variant(variant.into());
            let cfg = TrainConfig { transitions, ..TrainConfig::default() };
            let (policy, log) = train_actor_critic(&env, &gen, kind, &cfg, seed)?;
            policy.save(BufWriter::new(std::fs::File::create(&out)?))?;
            std::fs::write(out.with_extension("log.json"), serde_json::to_string(&log)?)?;
            let sr = evaluate_solve_rate(&policy, None, &env, &gen, eval_levels, 1_000_000, 7)?;
            println!("saved {} (held-out solve rate {sr:.3})", out.display());
        }
        Command::TrainModel { policy, variant, capacity, transitions, epochs, seed, out } => {
            let policy = load_policy(&policy)?;
            let env = EnvConfig::with_variant(variant.into());
            let replay = collect_transitions(&policy, None, &env, &gen, transitions, seed)?;
            let cfg = ModelConfig { epochs, ..ModelConfig::with_capacity(capacity.into()) };
            let model = train_model(&replay, &cfg, env.step_limit, seed)?;
            model.save(BufWriter::new(std::fs::File::create(&out)?))?;
            println!("saved {}", out.display());
        }
        Command::Collect { policy, model, variant, aux, transitions, seed, out } => {
            let policy = load_policy(&policy)?;
            let model = model.as_ref().map(load_model).transpose()?;
            let env = EnvConfig::with_variant(variant.into());
            let aux_mode: AuxMode = aux_mode_for(policy.kind(), aux.into())
                .context("this aux setting is undefined for the chosen agent")?;
            let ds = collect(&policy, model.as_ref(), &env, &gen, transitions, aux_mode, seed)?;
            save_dataset_file(&ds, &out)?;
            println!("saved {} ({} records, {} labeled)", out.display(), ds.records.len(), ds.labeled().count());
        }
        Command::TrainPredictor { train, val, task, seed, max_epochs, out } => {
            let train_ds = load_dataset_file(&train)?;
            let val_ds = load_dataset_file(&val)?;
            let mut cfg = PredictorConfig::new(task.into(), train_ds.manifest.aux_mode, seed);
            cfg.max_epochs = max_epochs;
            let (p, log) = train_predictor(&train_ds, &val_ds, &cfg)?;
            p.save(BufWriter::new(std::fs::File::create(&out)?))?;
            let best = log
                .epochs
                .iter()
                .filter(|e| e.improved)
                .last()
                .map(|e| e.val_loss)
                .unwrap_or(f64::NAN);
            println!("saved {} (best val loss {best:.4} after {} epochs)", out.display(), log.epochs.len());
        }
        Command::Evaluate { predictor, test } => {
            let f = std::fs::File::open(&predictor)?;
            let p = Predictor::load(BufReader::new(f))?;
            let test_ds = load_dataset_file(&test)?;
            let metrics = evaluate(&p, &test_ds)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Run { spec, out, jobs, seed } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("read {}", path.display()))?;
                    let mut s: ExperimentSpec = serde_json::from_str(&text)?;
                    s.out_dir = out;
                    s
                }
                None => {
                    let mut s = ExperimentSpec::desk_default(out);
                    s.seed = seed;
                    s
                }
            };
            std::fs::create_dir_all(&spec.out_dir)?;
            std::fs::write(
                spec.out_dir.join("spec.json"),
                serde_json::to_string_pretty(&spec)?,
            )?;
            let table = run(&spec, jobs.max(1))?;
            let (_, md) = report(&table, ReportKind::Sweep, &spec.out_dir)?;
            println!("{md}");
            if !table.failures.is_empty() {
                for f in &table.failures {
                    eprintln!("failed cell {}: {}", f.cell.label(), f.error);
                }
                bail!("{} experiment cell(s) failed", table.failures.len());
            }
            println!("all {} cells finished; results in {}", table.rows.len(), spec.out_dir.display());
        }
        Command::Report { dir, kind } => {
            let table = ResultTable::load(&dir.join("table.json"))?;
            let (_, md) = report(&table, kind.into(), &dir)?;
            println!("{md}");
        }
    }
    Ok(())
}
