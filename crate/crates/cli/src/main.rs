use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use appforge_core::backends::{FaultInjectingBackend, FaultSchedule, FixtureEntry, RemoteBackend, RemoteConfig, ScriptedBackend};
use appforge_core::model::{parse_json, CaseStatus, TestCase, TestReport, TraceabilityMatrix};
use appforge_core::orchestrator::{
    self, Agents, AuditStatus, Budgets, DirectiveInput, PipelineState, RunOptions, RunOutcome, RunState, RunSummary,
};
use appforge_core::scenario::{self, Scenario, SweepGrid};
use appforge_core::toolchain::{CommandConfig, CommandToolchain, StubToolchain};
use appforge_core::{GeneratorBackend, KnowledgeBase, Toolchain, Workspace};

#[derive(Parser)]
#[command(name = "appforge", version, about = "Plan, generate, build and test an application from SRS and ADD documents")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Workspace directory.
    #[arg(long, global = true, env = "APPFORGE_WORKSPACE", default_value = ".")]
    workspace: PathBuf,
    /// Generator backend.
    #[arg(long, global = true, env = "APPFORGE_BACKEND", value_enum, default_value_t = BackendKind::Scripted)]
    backend: BackendKind,
    /// Fixture directory for the scripted backend.
    #[arg(long, global = true, env = "APPFORGE_FIXTURES")]
    fixtures: Option<PathBuf>,
    /// `stub` or `command:<config.json>`.
    #[arg(long, global = true, env = "APPFORGE_TOOLCHAIN", default_value = "stub")]
    toolchain: String,
    /// Self-debug, plan-revision and rectification budgets as D,P,R.
    #[arg(long, global = true, env = "APPFORGE_BUDGETS")]
    budgets: Option<Budgets>,
    /// Knowledge pack directory.
    #[arg(long, global = true, env = "APPFORGE_KNOWLEDGE")]
    knowledge: Option<PathBuf>,
    /// Seed for fault sampling in sweeps.
    #[arg(long, global = true, env = "APPFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Treat unmappable functional requirements as errors.
    #[arg(long, global = true, env = "APPFORGE_STRICT")]
    strict: bool,
    /// Fault schedule applied on top of the backend.
    #[arg(long, global = true, env = "APPFORGE_FAULT_SCHEDULE")]
    fault_schedule: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Scripted,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Create a workspace from an SRS and an ADD document.
    Init {
        #[arg(long)]
        srs: PathBuf,
        #[arg(long)]
        add: PathBuf,
        /// Archive existing contents instead of refusing.
        #[arg(long)]
        force: bool,
    },
    /// Run the pipeline. Exit 0 on Done, 2 on Escalated.
    Run,
    /// Continue an escalated run after its audit items are resolved.
    Resume {
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Print the last pipeline state.
    Status,
    /// Print the traceability matrix with case results.
    Trace,
    /// Inspect and resolve escalated audit items.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Summarize the latest test report.
    Report,
    /// Run bundled scenarios and budget sweeps.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
}

#[derive(Subcommand)]
enum AuditCommand {
    /// List audit items.
    List,
    /// Print one audit item as JSON.
    Show { id: String },
    /// Record a directive: exactly one of --amend, --skip, --abort.
    Resolve {
        id: String,
        /// Fixture file, or inline fixture JSON.
        #[arg(long, conflicts_with_all = ["skip", "abort"])]
        amend: Option<String>,
        #[arg(long, conflicts_with = "abort")]
        skip: bool,
        #[arg(long)]
        abort: bool,
        #[arg(long)]
        note: Option<String>,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Run a scenario file and check its expectations.
    Run {
        file: PathBuf,
        /// Keep the workspace at this path instead of a temporary one.
        #[arg(long)]
        keep: Option<PathBuf>,
    },
    /// Run a scenario over a parameter grid and write a CSV table.
    Sweep {
        file: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        self_debug: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        plan_revision: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        rectification: Vec<u32>,
        /// Per-module fault probabilities; omitted keeps the scenario's schedule.
        #[arg(long, value_delimiter = ',')]
        fault_rates: Vec<f64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Init { srs, add, force } => {
            let srs_text = read(srs)?;
            let add_text = read(add)?;
            Workspace::init(&g.workspace, &srs_text, &add_text, *force)?;
            println!("initialized workspace {}", g.workspace.display());
            Ok(0)
        }
        Command::Run => {
            let ws = Workspace::open(&g.workspace)?;
            let (kb, backend, toolchain) = agents(g, &ws)?;
            let agents = Agents {
                kb: &kb,
                backend: backend.as_ref(),
                toolchain: toolchain.as_ref(),
            };
            let outcome = orchestrator::run(&ws, &agents, g.budgets.unwrap_or_default(), RunOptions { strict: g.strict })?;
            Ok(print_outcome(&ws, &outcome))
        }
        Command::Resume { run_id } => {
            let ws = Workspace::open(&g.workspace)?;
            let run_id = match run_id {
                Some(id) => id.clone(),
                None => ws.read_json::<RunState>(orchestrator::RUN_STATE)?.run_id,
            };
            let (kb, backend, toolchain) = agents(g, &ws)?;
            let agents = Agents {
                kb: &kb,
                backend: backend.as_ref(),
                toolchain: toolchain.as_ref(),
            };
            let outcome = orchestrator::resume(&ws, &run_id, &agents)?;
            Ok(print_outcome(&ws, &outcome))
        }
        Command::Status => {
            let ws = Workspace::open_read_only(&g.workspace)?;
            let trace: Vec<PipelineState> = ws.read_json(orchestrator::STATE_TRACE).unwrap_or_default();
            match trace.last() {
                None => println!("not started"),
                Some(state) => {
                    let rs: RunState = ws.read_json(orchestrator::RUN_STATE)?;
                    println!("{state}");
                    println!("run {} plan v{} after {} states", rs.run_id, rs.plan_version, trace.len());
                }
            }
            Ok(0)
        }
        Command::Trace => {
            let ws = Workspace::open_read_only(&g.workspace)?;
            print_trace(&ws)?;
            Ok(0)
        }
        Command::Audit(cmd) => audit(g, cmd),
        Command::Report => {
            let ws = Workspace::open_read_only(&g.workspace)?;
            let Some(n) = ws.ordinals("report").last().copied() else {
                bail!("no test report yet");
            };
            let report: TestReport = ws.load_ordinal("report", n)?;
            print_report(&report);
            Ok(0)
        }
        Command::Scenario(cmd) => scenario_command(g, cmd),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

type AgentSet = (KnowledgeBase, Box<dyn GeneratorBackend>, Box<dyn Toolchain>);

fn agents(g: &Global, ws: &Workspace) -> Result<AgentSet> {
    let kb = match &g.knowledge {
        Some(dir) => KnowledgeBase::load_pack(dir)?,
        None => KnowledgeBase::new(),
    };
    let schedule = match &g.fault_schedule {
        Some(path) => parse_json::<FaultSchedule>(&read(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))?,
        None => FaultSchedule::default(),
    };
    let backend: Box<dyn GeneratorBackend> = match g.backend {
        BackendKind::Scripted => {
            let dir = g
                .fixtures
                .as_ref()
                .ok_or_else(|| anyhow!("--fixtures is required with the scripted backend"))?;
            Box::new(FaultInjectingBackend::new(ScriptedBackend::from_dir(dir)?, schedule))
        }
        BackendKind::Remote => Box::new(FaultInjectingBackend::new(RemoteBackend::new(RemoteConfig::from_env()?), schedule)),
    };
    let toolchain: Box<dyn Toolchain> = match g.toolchain.as_str() {
        "stub" => Box::new(StubToolchain),
        other => {
            let Some(cfg) = other.strip_prefix("command:") else {
                bail!("--toolchain must be `stub` or `command:<config>`, got `{other}`");
            };
            let config = CommandConfig::load(Path::new(cfg))?;
            Box::new(CommandToolchain::new(config, ws.root())?)
        }
    };
    Ok((kb, backend, toolchain))
}

fn print_outcome(ws: &Workspace, outcome: &RunOutcome) -> u8 {
    let summary: Option<RunSummary> = ws.read_json(orchestrator::RUN_SUMMARY).ok();
    match outcome {
        RunOutcome::Done(report) => {
            println!(
                "Done: {} cases, {} defects, coverage {:.2}",
                report.case_results.len(),
                report.open_defects().count(),
                report.coverage
            );
            if let Some(s) = summary {
                println!(
                    "plan v{}, {} improvement records, {} iterations",
                    s.plan_version, s.metrics.improvement_records, s.metrics.iterations
                );
            }
            0
        }
        RunOutcome::Escalated(items) => {
            println!("Escalated: {} audit item(s)", items.len());
            for item in items {
                println!("  {} {} ({})", item.id, item.subject, item.reason);
            }
            2
        }
    }
}

fn load_all_cases(ws: &Workspace) -> Result<Vec<TestCase>> {
    let mut cases = Vec::new();
    let tests = ws.path("tests");
    let Ok(entries) = fs::read_dir(&tests) else {
        return Ok(cases);
    };
    let mut modules: Vec<String> = entries
        .filter_map(Result::ok)
        .filter(|e| e.path().join("cases.json").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    modules.sort();
    for m in modules {
        let more: Vec<TestCase> = ws.read_json(&Workspace::cases_path(&m))?;
        cases.extend(more);
    }
    Ok(cases)
}

fn print_trace(ws: &Workspace) -> Result<()> {
    let matrix: TraceabilityMatrix = ws
        .read_json("artifacts/trace-matrix.json")
        .context("no traceability matrix yet; run the pipeline first")?;
    let cases = load_all_cases(ws)?;
    let status = |id: &str| {
        cases.iter().find(|c| c.id == id).map_or("missing", |c| match c.status {
            CaseStatus::Passed => "pass",
            CaseStatus::Failed => "fail",
            CaseStatus::Pending => "pending",
            CaseStatus::Regenerated => "regenerated",
        })
    };
    for row in &matrix.rows {
        let passed = row.test_case_ids.iter().filter(|id| status(id) == "pass").count();
        println!(
            "{} -> {}.{} : {} cases, {} passed",
            row.requirement_id,
            row.module_id,
            row.method_signature,
            row.test_case_ids.len(),
            passed
        );
        for id in &row.test_case_ids {
            println!("    {id} {}", status(id));
        }
    }
    Ok(())
}

fn print_report(report: &TestReport) {
    let failed = report
        .case_results
        .values()
        .filter(|r| matches!(r, appforge_core::model::CaseResult::Failed))
        .count();
    println!(
        "report {}: {} cases, {} failed, coverage {:.2}",
        report.ordinal,
        report.case_results.len(),
        failed,
        report.coverage
    );
    for d in &report.defects {
        let accepted = if report.accepted_defects.contains(&d.id) { " (accepted)" } else { "" };
        println!("  {:?} {}{}: {}", d.severity, d.id, accepted, d.description);
    }
}

fn audit(g: &Global, cmd: &AuditCommand) -> Result<u8> {
    match cmd {
        AuditCommand::List => {
            let ws = Workspace::open_read_only(&g.workspace)?;
            let queue = orchestrator::load_audit_queue(&ws)?;
            if queue.items.is_empty() {
                println!("audit queue empty");
            }
            for i in &queue.items {
                println!("{} {:?} {} {}", i.id, i.status, i.subject, i.reason);
            }
            Ok(0)
        }
        AuditCommand::Show { id } => {
            let ws = Workspace::open_read_only(&g.workspace)?;
            let queue = orchestrator::load_audit_queue(&ws)?;
            let item = queue
                .items
                .iter()
                .find(|i| &i.id == id)
                .ok_or_else(|| anyhow!("unknown audit item {id}"))?;
            println!("{}", serde_json::to_string_pretty(item)?);
            Ok(0)
        }
        AuditCommand::Resolve {
            id,
            amend,
            skip,
            abort,
            note,
        } => {
            let input = match (amend, skip, abort) {
                (Some(src), false, false) => DirectiveInput::Amend {
                    fixtures: amendment(src)?,
                    note: note.clone(),
                },
                (None, true, false) => DirectiveInput::Skip { note: note.clone() },
                (None, false, true) => DirectiveInput::Abort { note: note.clone() },
                _ => bail!("give exactly one of --amend, --skip or --abort"),
            };
            let ws = Workspace::open(&g.workspace)?;
            let item = orchestrator::resolve_item(&ws, id, input)?;
            debug_assert_eq!(item.status, AuditStatus::Resolved);
            println!("{} resolved", item.id);
            Ok(0)
        }
    }
}

fn amendment(src: &str) -> Result<Vec<FixtureEntry>> {
    let trimmed = src.trim_start();
    let text = if trimmed.starts_with('[') || trimmed.starts_with('{') {
        src.to_owned()
    } else {
        read(Path::new(src))?
    };
    let value: serde_json::Value = serde_json::from_str(&text).context("amendment is not JSON")?;
    let entries = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value)?,
        other => vec![serde_json::from_value(other)?],
    };
    Ok(entries)
}

fn scenario_command(g: &Global, cmd: &ScenarioCommand) -> Result<u8> {
    match cmd {
        ScenarioCommand::Run { file, keep } => {
            let s = Scenario::load(file)?;
            let run = match keep {
                Some(dir) => scenario::run_scenario_at(&s, g.budgets, dir)?,
                None => scenario::run_scenario(&s, g.budgets)?,
            };
            println!("{}", serde_json::to_string_pretty(&run)?);
            if run.verdict.pass {
                println!("PASS {}", run.scenario);
                Ok(0)
            } else {
                println!("FAIL {}: {}", run.scenario, run.verdict.mismatches.join("; "));
                Ok(1)
            }
        }
        ScenarioCommand::Sweep {
            file,
            self_debug,
            plan_revision,
            rectification,
            fault_rates,
            out,
        } => {
            let s = Scenario::load(file)?;
            let grid = SweepGrid {
                self_debug: self_debug.clone(),
                plan_revision: plan_revision.clone(),
                rectification: rectification.clone(),
                fault_rates: if fault_rates.is_empty() {
                    vec![None]
                } else {
                    fault_rates.iter().copied().map(Some).collect()
                },
            };
            if grid.points().is_empty() {
                bail!("sweep grid is empty");
            }
            let rows = scenario::sweep(&s, &grid, g.seed)?;
            match out {
                Some(path) => {
                    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                    scenario::write_table(&rows, f)?;
                    println!("{} rows written to {}", rows.len(), path.display());
                }
                None => scenario::write_table(&rows, std::io::stdout())?,
            }
            Ok(0)
        }
    }
}
