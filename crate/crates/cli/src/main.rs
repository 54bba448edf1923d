use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use toolevo_core::environment::{bootstrap_demos, generate_tasks, Split, SuiteConfig, TaskSuite, Trajectory};
use toolevo_core::io;
use toolevo_core::miner::{mine_and_register, FrequencyTable, MinerConfig};
use toolevo_core::orchestrator::{
    evaluate, parse_metrics_csv, replay, train, EvalMode, EvalPolicy, LoadedRun, RunConfig,
};
use toolevo_core::tooling::{ActionSpace, Registry, ToolSpec};
use toolevo_core::{Error, Result};

#[derive(Parser)]
#[command(name = "toolevo", version, about = "Self-evolving tool-use agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task suite.
    GenTasks {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        families: usize,
        #[arg(long, default_value_t = 500)]
        cases: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the teacher on every training case and write its trajectories.
    Bootstrap {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and persist a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation condition A, B, C or D.
        #[arg(long)]
        condition: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        tau: Option<u64>,
    },
    /// Evaluate a persisted run without modifying it.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "heldout")]
        split: Split,
        /// sample or argmax; defaults to the run's configured mode.
        #[arg(long)]
        mode: Option<EvalMode>,
        /// Query an external policy at this URL instead of the trained one.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Mine composites from a trajectory log in one pass.
    Mine {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long, default_value_t = 3)]
        tau: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run directory.
    Inspect {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Re-execute the logged trajectories of one case and verify them.
    Replay {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        case: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Protocol(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenTasks {
            seed,
            families,
            cases,
            out,
        } => {
            let suite = generate_tasks(&SuiteConfig {
                seed,
                families,
                cases,
                ..SuiteConfig::default()
            })?;
            io::write_json(&out, &suite)?;
            println!("{} cases, {} families, {} tools", suite.cases.len(), suite.families.len(), suite.tools.len());
            Ok(())
        }
        Command::Bootstrap { tasks, out } => {
            let suite: TaskSuite = io::read_json(&tasks)?;
            let space = suite.action_space(MinerConfig::default().max_len)?;
            let cases = suite.split(Split::Train);
            let demos = bootstrap_demos(&suite, &cases, &space, Default::default())?;
            io::write_jsonl(&out, &demos)?;
            let ok = demos.iter().filter(|d| d.success).count();
            println!("{} demonstrations, {ok} successful", demos.len());
            Ok(())
        }
        Command::Train {
            config,
            out_dir,
            seed,
            condition,
            iterations,
            epochs,
            tau,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::from_toml(&io::read_to_string(&p)?)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(c) = condition {
                cfg = cfg.with_condition(&c)?;
            }
            if let Some(i) = iterations {
                cfg.grpo.iterations = i;
            }
            if let Some(e) = epochs {
                cfg.sft.epochs = e;
            }
            if let Some(t) = tau {
                cfg.miner.tau = t;
            }
            let (trainer, eval) = train(cfg, true)?;
            trainer.persist(&out_dir, &eval)?;
            print_json(&eval)
        }
        Command::Eval {
            run_dir,
            split,
            mode,
            endpoint,
            timeout_ms,
        } => {
            let run = LoadedRun::load(&run_dir)?;
            let cases = run.suite.split(split);
            let mut policy_cfg = run.cfg.policy.clone();
            if let Some(url) = endpoint {
                policy_cfg.kind = toolevo_core::orchestrator::PolicyKind::Http;
                policy_cfg.endpoint = Some(url);
                policy_cfg.timeout_ms = timeout_ms;
            }
            let http = policy_cfg.http_policy()?;
            let policy = match &http {
                Some(h) => EvalPolicy::Http(h),
                None => EvalPolicy::Params(&run.params, mode.unwrap_or(run.cfg.eval_mode)),
            };
            let (metrics, trajs) = evaluate(&run.eval_inputs(), &cases, policy)?;
            if metrics.errors > 0 {
                let first = trajs.len();
                return Err(Error::Protocol(format!(
                    "{} of {first} episodes aborted by the policy endpoint",
                    metrics.errors
                )));
            }
            print_json(&metrics)
        }
        Command::Mine {
            trajectories,
            tau,
            out,
        } => mine(&trajectories, tau, &out),
        Command::Inspect { run_dir } => inspect(&run_dir),
        Command::Replay { run_dir, case } => {
            let report = replay(&run_dir, case)?;
            print_json(&report)
        }
    }
}

fn mine(path: &Path, tau: u64, out: &Path) -> Result<()> {
    let trajs: Vec<Trajectory> = io::read_jsonl(path)?;
    let cfg = MinerConfig {
        tau,
        ..MinerConfig::default()
    };
    cfg.validate()?;
    let mut space = ActionSpace::new(cfg.max_len);
    for t in trajs.iter().filter(|t| t.success) {
        for s in &t.steps {
            for tool in &s.expanded {
                if space.atomic_index(tool).is_none() {
                    space.register_atomic(ToolSpec::new(tool.as_str(), 1, ""))?;
                }
            }
        }
    }
    let mut table = FrequencyTable::default();
    let report = mine_and_register(&trajs, &cfg, &mut space, &mut table, trajs.len() as u64)?;
    let registry: Registry = space.registry();
    io::write_json(out, &registry)?;
    print_json(&report)
}

fn inspect(dir: &Path) -> Result<()> {
    let run = LoadedRun::load(dir)?;
    let metrics = parse_metrics_csv(&io::read_to_string(&dir.join(io::METRICS_FILE))?)?;
    let last_train = metrics.iter().rev().find(|r| r.stage != "eval");
    let eval = metrics.iter().rev().find(|r| r.stage == "eval");
    let composites: Vec<serde_json::Value> = run
        .space
        .composites()
        .iter()
        .map(|c| {
            serde_json::json!({
                "id": c.id,
                "frequency": c.frequency,
                "registered_at": c.registered_at,
            })
        })
        .collect();
    print_json(&serde_json::json!({
        "seed": run.cfg.seed,
        "ablation": run.cfg.ablation,
        "families": run.suite.families.len(),
        "cases": run.suite.cases.len(),
        "atomic_tools": run.space.atomic().len(),
        "actions": run.space.len(),
        "memory_size": run.memory.len(),
        "policy_version": run.params.version,
        "composites": composites,
        "metrics_rows": metrics.len(),
        "last_training_row": last_train,
        "eval_row": eval,
    }))
}
