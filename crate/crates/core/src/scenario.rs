//! Scenario harness: replays a bundled input set through the pipeline with
//! the scripted backend and the stub toolchain, then checks structural
//! expectations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{
    BackendError, FaultInjectingBackend, FaultSchedule, FaultSpec, FixtureEntry, GenRequest, GenResponse,
    GeneratorBackend, RequestKind, ScriptedBackend,
};
use crate::kb::{KbError, KnowledgeBase};
use crate::model::{parse_json, Add, MarkerKind, SchemaError};
use crate::orchestrator::{self, Agents, Budgets, OrchestratorError, RunMetrics, RunOptions, RunOutcome, RunSummary};
use crate::toolchain::StubToolchain;
use crate::workspace::{Workspace, WorkspaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpectedOutcome {
    Done,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    pub outcome: ExpectedOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement_records: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defects_repaired: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rectification_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_defects: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_items: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_events: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compile_attempts: Option<BTreeMap<String, u32>>,
}

/// Scenario file. Paths are relative to the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub srs: String,
    pub add: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_pack: Option<String>,
    pub fixtures: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_schedule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Budgets>,
    #[serde(default)]
    pub strict: bool,
    pub expectations: Expectations,
    #[serde(skip)]
    base: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario {path}: {source}")]
    Schema { path: String, source: SchemaError },
    #[error("fixture gap: no {kind} fixture with digest {digest} (fingerprint {fingerprint}); context: {context}")]
    FixtureGap {
        kind: RequestKind,
        digest: String,
        fingerprint: String,
        context: String,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Knowledge(#[from] KbError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let schema = |source| ScenarioError::Schema {
            path: path.display().to_string(),
            source,
        };
        let mut s: Scenario = parse_json(&read(path)?).map_err(schema)?;
        if s.name.trim().is_empty() {
            return Err(schema(SchemaError::new("name", "must not be empty")));
        }
        s.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn srs_text(&self) -> Result<String, ScenarioError> {
        read(&self.resolve(&self.srs))
    }

    pub fn add_text(&self) -> Result<String, ScenarioError> {
        read(&self.resolve(&self.add))
    }

    pub fn knowledge(&self) -> Result<KnowledgeBase, ScenarioError> {
        match &self.knowledge_pack {
            Some(p) => Ok(KnowledgeBase::load_pack(&self.resolve(p))?),
            None => Ok(KnowledgeBase::new()),
        }
    }

    pub fn schedule(&self) -> Result<FaultSchedule, ScenarioError> {
        let Some(rel) = &self.fault_schedule else {
            return Ok(FaultSchedule::default());
        };
        let path = self.resolve(rel);
        parse_json(&read(&path)?).map_err(|source| ScenarioError::Schema {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn fixtures(&self) -> Result<ScriptedBackend, ScenarioError> {
        Ok(ScriptedBackend::from_dir(&self.resolve(&self.fixtures))?)
    }

    /// Module ids of the scenario's architecture document.
    pub fn modules(&self) -> Result<Vec<String>, ScenarioError> {
        let add: Add = parse_json(&self.add_text()?).map_err(|source| ScenarioError::Schema {
            path: self.add.clone(),
            source,
        })?;
        Ok(add.elements.iter().map(|e| e.module_id.clone()).collect())
    }
}

/// Remembers the first request the inner backend had no fixture for.
pub struct GapRecorder<B> {
    inner: B,
    gap: Mutex<Option<(RequestKind, String, String, String)>>,
}

impl<B: GeneratorBackend> GapRecorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            gap: Mutex::new(None),
        }
    }

    pub fn gap(&self) -> Option<ScenarioError> {
        self.gap
            .lock()
            .expect("gap lock")
            .clone()
            .map(|(kind, digest, fingerprint, context)| ScenarioError::FixtureGap {
                kind,
                digest,
                fingerprint,
                context,
            })
    }
}

impl<B: GeneratorBackend> GeneratorBackend for GapRecorder<B> {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        let out = self.inner.generate(req);
        if let Err(BackendError::NoFixture { context, .. }) = &out {
            self.gap.lock().expect("gap lock").get_or_insert_with(|| {
                (req.kind, req.digest().to_owned(), req.fingerprint.clone(), context.clone())
            });
        }
        out
    }
    fn amend(&self, fixtures: &[FixtureEntry]) -> Result<(), BackendError> {
        self.inner.amend(fixtures)
    }
    fn checkpoint(&self) -> Value {
        self.inner.checkpoint()
    }
    fn restore(&self, state: &Value) -> Result<(), BackendError> {
        self.inner.restore(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub mismatches: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRun {
    pub scenario: String,
    pub budgets: Budgets,
    pub outcome: ExpectedOutcome,
    pub verdict: Verdict,
    pub summary: RunSummary,
    pub final_defects: Option<usize>,
    pub coverage: Option<f64>,
}

impl ScenarioRun {
    pub fn metrics(&self) -> &RunMetrics {
        &self.summary.metrics
    }
}

/// Runs the scenario in a fresh workspace at `root`, which is left in place
/// for inspection.
pub fn run_scenario_at(scenario: &Scenario, budgets: Option<Budgets>, root: &Path) -> Result<ScenarioRun, ScenarioError> {
    run_with_schedule(scenario, budgets, scenario.schedule()?, root)
}

/// Runs the scenario in a temporary workspace.
pub fn run_scenario(scenario: &Scenario, budgets: Option<Budgets>) -> Result<ScenarioRun, ScenarioError> {
    let dir = tempfile::tempdir().map_err(|e| ScenarioError::Io {
        path: "tempdir".into(),
        message: e.to_string(),
    })?;
    run_scenario_at(scenario, budgets, &dir.path().join("ws"))
}

fn run_with_schedule(
    scenario: &Scenario,
    budgets: Option<Budgets>,
    schedule: FaultSchedule,
    root: &Path,
) -> Result<ScenarioRun, ScenarioError> {
    let budgets = budgets.or(scenario.budgets).unwrap_or_default();
    let kb = scenario.knowledge()?;
    let backend = GapRecorder::new(FaultInjectingBackend::new(scenario.fixtures()?, schedule));
    let toolchain = StubToolchain;
    let ws = Workspace::init(root, &scenario.srs_text()?, &scenario.add_text()?, false)?;
    let agents = Agents {
        kb: &kb,
        backend: &backend,
        toolchain: &toolchain,
    };
    let outcome = orchestrator::run(&ws, &agents, budgets, RunOptions { strict: scenario.strict })?;
    if let Some(gap) = backend.gap() {
        return Err(gap);
    }
    let summary: RunSummary = ws.read_json(orchestrator::RUN_SUMMARY)?;
    Ok(judge(scenario, budgets, &outcome, summary))
}

/// Resumes an escalated scenario run left at `root`, with the scenario's
/// fixtures and fault schedule. Amendments recorded in the workspace are
/// re-applied by the orchestrator.
pub fn resume_at(scenario: &Scenario, root: &Path) -> Result<RunOutcome, ScenarioError> {
    let kb = scenario.knowledge()?;
    let backend = GapRecorder::new(FaultInjectingBackend::new(scenario.fixtures()?, scenario.schedule()?));
    let toolchain = StubToolchain;
    let ws = Workspace::open(root)?;
    let state: orchestrator::RunState = ws.read_json(orchestrator::RUN_STATE)?;
    let agents = Agents {
        kb: &kb,
        backend: &backend,
        toolchain: &toolchain,
    };
    let outcome = orchestrator::resume(&ws, &state.run_id, &agents)?;
    match backend.gap() {
        Some(gap) => Err(gap),
        None => Ok(outcome),
    }
}

fn judge(scenario: &Scenario, budgets: Budgets, outcome: &RunOutcome, summary: RunSummary) -> ScenarioRun {
    let exp = &scenario.expectations;
    let m = &summary.metrics;
    let (kind, final_defects, coverage, audit) = match outcome {
        RunOutcome::Done(r) => (ExpectedOutcome::Done, Some(r.open_defects().count()), Some(r.coverage), 0),
        RunOutcome::Escalated(items) => (ExpectedOutcome::Escalated, None, None, items.len()),
    };
    let mut mismatches = Vec::new();
    let mut check = |field: &str, expected: String, actual: String| {
        if expected != actual {
            mismatches.push(format!("{field}: expected {expected}, got {actual}"));
        }
    };
    check("outcome", format!("{:?}", exp.outcome), format!("{kind:?}"));
    if let Some(v) = exp.plan_version {
        check("plan_version", v.to_string(), summary.plan_version.to_string());
    }
    if let Some(v) = exp.improvement_records {
        check("improvement_records", v.to_string(), m.improvement_records.to_string());
    }
    if let Some(v) = exp.defects_repaired {
        check("defects_repaired", v.to_string(), m.defects_repaired.to_string());
    }
    if let Some(v) = exp.rectification_rounds {
        check("rectification_rounds", v.to_string(), m.rectification_rounds.to_string());
    }
    if let Some(v) = exp.final_defects {
        let got = final_defects.map_or("none".to_owned(), |n| n.to_string());
        check("final_defects", v.to_string(), got);
    }
    if let Some(v) = exp.coverage {
        let got = coverage.map_or("none".to_owned(), |c| c.to_string());
        check("coverage", v.to_string(), got);
    }
    if let Some(v) = exp.audit_items {
        check("audit_items", v.to_string(), audit.to_string());
    }
    if let Some(v) = exp.feedback_events {
        check("feedback_events", v.to_string(), m.feedback_events.values().sum::<u32>().to_string());
    }
    if let Some(v) = &exp.compile_attempts {
        for (module, n) in v {
            let got = m.compile_attempts.get(module).copied().unwrap_or(0);
            check(&format!("compile_attempts[{module}]"), n.to_string(), got.to_string());
        }
    }
    ScenarioRun {
        scenario: scenario.name.clone(),
        budgets,
        outcome: kind,
        verdict: Verdict {
            pass: mismatches.is_empty(),
            mismatches,
        },
        summary,
        final_defects,
        coverage,
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Detail of the compile fault injected into sampled modules.
pub const SWEEP_FAULT: &str = "injected-fault: persistent compile error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub self_debug: Vec<u32>,
    pub plan_revision: Vec<u32>,
    pub rectification: Vec<u32>,
    /// Per-module probability of a persistent compile fault. `None` keeps
    /// the scenario's own fault schedule.
    pub fault_rates: Vec<Option<f64>>,
}

impl SweepGrid {
    pub fn single(budgets: Budgets) -> Self {
        Self {
            self_debug: vec![budgets.self_debug],
            plan_revision: vec![budgets.plan_revision],
            rectification: vec![budgets.rectification],
            fault_rates: vec![None],
        }
    }

    pub fn points(&self) -> Vec<(Budgets, Option<f64>)> {
        let mut out = Vec::new();
        for &d in &self.self_debug {
            for &p in &self.plan_revision {
                for &r in &self.rectification {
                    for &rate in &self.fault_rates {
                        out.push((Budgets::new(d, p, r), rate));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub self_debug: u32,
    pub plan_revision: u32,
    pub rectification: u32,
    pub fault_rate: String,
    pub seed: u64,
    pub faulted_modules: String,
    pub outcome: String,
    pub iterations: u32,
    pub feedback_events: u32,
    pub compile_attempts: u32,
    pub max_unit_compile_attempts: u32,
    pub reuse_ratio: f64,
    pub plan_version: u32,
    pub improvement_records: u32,
    pub defects_repaired: u32,
}

impl SweepRow {
    fn new(budgets: Budgets, rate: Option<f64>, seed: u64, faulted: &[String]) -> Self {
        Self {
            self_debug: budgets.self_debug,
            plan_revision: budgets.plan_revision,
            rectification: budgets.rectification,
            fault_rate: rate.map_or_else(|| "scenario".to_owned(), |r| r.to_string()),
            seed,
            faulted_modules: faulted.join(";"),
            outcome: String::new(),
            iterations: 0,
            feedback_events: 0,
            compile_attempts: 0,
            max_unit_compile_attempts: 0,
            reuse_ratio: 1.0,
            plan_version: 0,
            improvement_records: 0,
            defects_repaired: 0,
        }
    }

    pub fn fill(&mut self, run: &ScenarioRun) {
        let m = run.metrics();
        self.outcome = format!("{:?}", run.outcome);
        self.iterations = m.iterations;
        self.feedback_events = m.feedback_events.values().sum();
        self.compile_attempts = m.compile_attempts.values().sum();
        self.max_unit_compile_attempts = m.compile_attempts.values().copied().max().unwrap_or(0);
        self.reuse_ratio = m.reuse_ratio;
        self.plan_version = run.summary.plan_version;
        self.improvement_records = m.improvement_records;
        self.defects_repaired = m.defects_repaired;
    }
}

/// Modules that receive a persistent compile fault at `rate`; sampled in
/// module order from a generator seeded with `seed`.
pub fn sample_faulted(modules: &[String], rate: f64, seed: u64) -> Vec<String> {
    let mut sorted = modules.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.into_iter().filter(|_| rng.random::<f64>() < rate).collect()
}

/// One run per grid point. Points that hit a fixture gap are reported with
/// outcome `FixtureGap` rather than aborting the sweep.
pub fn sweep(scenario: &Scenario, grid: &SweepGrid, seed: u64) -> Result<Vec<SweepRow>, ScenarioError> {
    let modules = scenario.modules()?;
    let mut rows = Vec::new();
    for (budgets, rate) in grid.points() {
        let (schedule, faulted) = match rate {
            None => (scenario.schedule()?, Vec::new()),
            Some(rate) => {
                let faulted = sample_faulted(&modules, rate, seed);
                let faults = faulted
                    .iter()
                    .map(|m| FaultSpec {
                        module_id: m.clone(),
                        kind: MarkerKind::Compile,
                        detail: SWEEP_FAULT.to_owned(),
                        target_signature: None,
                        attempts: None,
                    })
                    .collect();
                (FaultSchedule { faults }, faulted)
            }
        };
        let mut row = SweepRow::new(budgets, rate, seed, &faulted);
        let dir = tempfile::tempdir().map_err(|e| ScenarioError::Io {
            path: "tempdir".into(),
            message: e.to_string(),
        })?;
        match run_with_schedule(scenario, Some(budgets), schedule, &dir.path().join("ws")) {
            Ok(run) => row.fill(&run),
            Err(ScenarioError::FixtureGap { kind, .. }) => row.outcome = format!("FixtureGap({kind})"),
            Err(e) => return Err(e),
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_table<W: Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_are_the_product() {
        let g = SweepGrid {
            self_debug: vec![0, 1],
            plan_revision: vec![0, 1, 2],
            rectification: vec![3],
            fault_rates: vec![None, Some(0.5)],
        };
        assert_eq!(g.points().len(), 12);
        assert_eq!(SweepGrid::single(Budgets::default()).points(), vec![(Budgets::default(), None)]);
    }

    #[test]
    fn fault_sampling_is_seeded() {
        let mods: Vec<String> = (0..20).map(|i| format!("m{i:02}")).collect();
        assert_eq!(sample_faulted(&mods, 0.5, 7), sample_faulted(&mods, 0.5, 7));
        assert!(sample_faulted(&mods, 0.0, 7).is_empty());
        assert_eq!(sample_faulted(&mods, 1.0, 7).len(), 20);
    }

    #[test]
    fn table_has_header_and_rows() {
        let mut row = SweepRow::new(Budgets::default(), Some(0.25), 1, &["a".into(), "b".into()]);
        row.outcome = "Done".into();
        let mut buf = Vec::new();
        write_table(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("self_debug,plan_revision,rectification,fault_rate"));
        assert!(lines.next().unwrap().contains("0.25,1,a;b,Done"));
    }
}
