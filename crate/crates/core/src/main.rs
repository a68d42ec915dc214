//! `agora` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use agora::audit::{read_jsonl, verify_log, verify_log_with_head, EventLog, LogVerdict};
use agora::cooperation::{load_roster, AgentHandle, run_debate, run_role_workflow, run_vote, VoteMethod};
use agora::evaluator::{evaluate, load_suite, render_summary};
use agora::gateway::{Gateway, ScriptedBackend};
use agora::goal::GoalCreator;
use agora::memory::KnowledgeBase;
use agora::orchestrator::runtime::{DEFAULT_RULES, ROLE_DEBATER, ROLE_VOTER};
use agora::orchestrator::{assemble, decide_patterns, AgentRuntime, PatternConfig, RunStatus, RunStore};
use agora::server::{serve, AppState};

#[derive(Parser)]
#[command(name = "agora", version, about = "Foundation-model agent orchestration over a scripted model backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RuntimeArgs {
    /// Pattern config (JSON). Defaults to the baseline.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Knowledge corpus (JSON lines), overriding the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Detector events (JSON lines), overriding the config.
    #[arg(long)]
    detectors: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RosterArgs {
    /// Roster file (JSON list of agents).
    #[arg(long)]
    roster: PathBuf,
    /// Rule file for agents without their own `rules_path`.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Write the event log here (JSON lines).
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one goal to completion or suspension.
    Run {
        #[command(flatten)]
        runtime: RuntimeArgs,
        #[arg(long)]
        goal: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Persist the run under this state directory.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Write the event log here (JSON lines).
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Map quality requirements to a pattern config.
    Decide {
        /// Comma-separated requirement tags.
        #[arg(long, value_delimiter = ',')]
        require: Vec<String>,
        /// Also write the config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a config against a test suite.
    Eval {
        #[arg(long)]
        suite: PathBuf,
        #[command(flatten)]
        runtime: RuntimeArgs,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check an event log's hash chain. Exits 1 when it is broken.
    VerifyLog {
        log: PathBuf,
        /// Expected head digest, or a file holding it.
        #[arg(long)]
        head: Option<String>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// State directory for durable runs.
        #[arg(long)]
        state: Option<PathBuf>,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Run one vote over a roster.
    Vote {
        #[command(flatten)]
        roster: RosterArgs,
        #[arg(long)]
        question: String,
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        /// head_count or weighted
        #[arg(long, default_value = "head_count")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plan a goal and run it through the roster's roles.
    Workflow {
        #[command(flatten)]
        roster: RosterArgs,
        #[arg(long)]
        goal: String,
    },
    /// Run a debate over a roster.
    Debate {
        #[command(flatten)]
        roster: RosterArgs,
        #[arg(long)]
        question: String,
        #[arg(long, default_value_t = 3)]
        max_rounds: usize,
    },
}

type CliResult = Result<ExitCode, String>;

fn load_runtime(args: &RuntimeArgs) -> Result<AgentRuntime, String> {
    let (mut config, base) = match &args.config {
        Some(p) => {
            let config = PatternConfig::load(p).map_err(|e| e.to_string())?;
            (config, p.parent().unwrap_or(Path::new(".")).to_path_buf())
        }
        None => (PatternConfig::baseline(), PathBuf::from(".")),
    };
    let cwd = std::env::current_dir().map_err(|e| e.to_string())?;
    if let Some(c) = &args.corpus {
        config.memory.corpus_path = Some(cwd.join(c).display().to_string());
    }
    if let Some(d) = &args.detectors {
        config.detectors.path = Some(cwd.join(d).display().to_string());
    }
    assemble(config, &base).map_err(|e| e.to_string())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialize"));
}

fn write_events(log: &EventLog, path: Option<&PathBuf>) -> Result<(), String> {
    match path {
        Some(p) => log.write_jsonl(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(()),
    }
}

fn roster_gateway(args: &RosterArgs) -> Result<Gateway, String> {
    let source = match &args.rules {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => DEFAULT_RULES.to_string(),
    };
    let backend = ScriptedBackend::from_rule_file(&source).map_err(|e| e.to_string())?;
    Ok(Gateway::scripted(backend))
}

/// Members holding `role`, or the whole roster when nobody does.
fn with_role(agents: Vec<AgentHandle>, role: &str) -> Vec<AgentHandle> {
    if agents.iter().any(|a| a.has_role(role)) {
        agents.into_iter().filter(|a| a.has_role(role)).collect()
    } else {
        agents
    }
}

fn cmd_run(runtime: &RuntimeArgs, goal: &str, seed: u64, state: Option<&PathBuf>, events: Option<&PathBuf>) -> CliResult {
    let rt = load_runtime(runtime)?;
    let handle = match state {
        Some(dir) => {
            let store = RunStore::open(dir).map_err(|e| e.to_string())?;
            let handle = rt.start(&store.next_run_id(), goal, seed);
            store.save(&handle).map_err(|e| e.to_string())?;
            handle
        }
        None => rt.run(goal, seed),
    };
    write_events(&handle.log, events)?;
    let result = handle.result();
    print_json(&json!(result));
    Ok(if result.status == RunStatus::Failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_verify(log: &Path, head: Option<&String>) -> CliResult {
    let records = read_jsonl(log).map_err(|e| format!("{}: {e}", log.display()))?;
    let verdict = match head {
        Some(h) => {
            let digest = match std::fs::read_to_string(h) {
                Ok(contents) => contents.trim().to_string(),
                Err(_) => h.trim().to_string(),
            };
            verify_log_with_head(&records, &digest)
        }
        None => verify_log(&records),
    };
    print_json(&json!(verdict));
    Ok(match verdict {
        LogVerdict::Intact => ExitCode::SUCCESS,
        LogVerdict::Broken { .. } => ExitCode::FAILURE,
    })
}

fn execute(cli: Cli) -> CliResult {
    match cli.command {
        Command::Run {
            runtime,
            goal,
            seed,
            state,
            events,
        } => cmd_run(&runtime, &goal, seed, state.as_ref(), events.as_ref()),
        Command::Decide { require, out } => {
            let tags: Vec<String> = require.into_iter().filter(|t| !t.trim().is_empty()).collect();
            let (config, report) = decide_patterns(&tags).map_err(|e| e.to_string())?;
            if let Some(p) = out {
                std::fs::write(&p, config.to_json()).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            print_json(&json!({"config": config, "report": report}));
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { suite, runtime, report } => {
            let suite = load_suite(&suite).map_err(|e| e.to_string())?;
            let rt = load_runtime(&runtime).map_err(|e| format!("agent assembly failed: {e}"))?;
            let result = evaluate(&rt, &suite);
            let text = serde_json::to_string_pretty(&result).expect("reports serialize");
            match report {
                Some(p) => std::fs::write(&p, text).map_err(|e| format!("{}: {e}", p.display()))?,
                None => println!("{text}"),
            }
            print!("{}", render_summary(&result));
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyLog { log, head } => cmd_verify(&log, head.as_ref()),
        Command::Serve {
            port,
            host,
            state,
            runtime,
        } => {
            let rt = load_runtime(&runtime)?;
            let store = state.map(RunStore::open).transpose().map_err(|e| e.to_string())?;
            let addr: std::net::SocketAddr = format!("{host}:{port}").parse().map_err(|e| format!("address: {e}"))?;
            let tokio_rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            eprintln!("agora listening on http://{addr}");
            tokio_rt
                .block_on(serve(addr, AppState::new(rt, store)))
                .map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Vote {
            roster,
            question,
            candidates,
            method,
            seed,
        } => {
            let method: VoteMethod = serde_json::from_value(json!(method)).map_err(|_| format!("unknown method {method:?}"))?;
            let agents = load_roster(&roster.roster, Some(&roster_gateway(&roster)?)).map_err(|e| e.to_string())?;
            let agents = with_role(agents, ROLE_VOTER);
            let log = EventLog::new();
            let outcome = run_vote(&question, &candidates, &agents, method, seed, &log).map_err(|e| e.to_string())?;
            write_events(&log, roster.events.as_ref())?;
            print_json(&json!(outcome));
            Ok(ExitCode::SUCCESS)
        }
        Command::Workflow { roster, goal } => {
            let agents = load_roster(&roster.roster, Some(&roster_gateway(&roster)?)).map_err(|e| e.to_string())?;
            let goal = GoalCreator::new()
                .create_goal_passive(&goal, &KnowledgeBase::new(), 0)
                .map_err(|e| e.to_string())?;
            let log = EventLog::new();
            let (result, plan) = run_role_workflow(&goal, &agents, &log).map_err(|e| e.to_string())?;
            write_events(&log, roster.events.as_ref())?;
            print_json(&json!({"workflow": result, "plan": plan}));
            Ok(ExitCode::SUCCESS)
        }
        Command::Debate {
            roster,
            question,
            max_rounds,
        } => {
            let agents = load_roster(&roster.roster, Some(&roster_gateway(&roster)?)).map_err(|e| e.to_string())?;
            let agents = with_role(agents, ROLE_DEBATER);
            let log = EventLog::new();
            let transcript = run_debate(&question, &agents, max_rounds, &log).map_err(|e| e.to_string())?;
            write_events(&log, roster.events.as_ref())?;
            print_json(&json!(transcript));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
