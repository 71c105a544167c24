//! Closed-loop pipeline: drives the three agents through a state machine,
//! routes feedback under budgets and escalates to the audit queue.
//!
//! Routing is budget-ordered. Compiler and launch failures go to
//! self-debugging while the unit has attempts left, then to plan revision
//! while revisions are left, then to escalation. Test defects and quality
//! findings go to rectification until their per-subject budget runs out.
//!
//! The run is checkpointed to `artifacts/run-state.json` after every step,
//! so an escalated run can be resumed once its audit items are resolved.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backends::{FixtureEntry, GeneratorBackend};
use crate::ca::{self, Issue, QualityReport};
use crate::copa::{self, AnalysisResult};
use crate::graph::{conflict_set, plan_diff, topo_order};
use crate::kb::KnowledgeBase;
use crate::model::{
    ApiManifest, CodePlan, CompilationLog, CounterSnapshot, Defect, DefectSeverity, FeedbackEvent, FeedbackOrigin,
    ImprovementRecord, ProjectStructure, SourceUnit, TestCase, TestReport, UnitStatus,
};
use crate::ta::{self, TestPlan};
use crate::toolchain::{LaunchOutcome, Toolchain};
use crate::workspace::{Workspace, WorkspaceError};

pub const RUN_STATE: &str = "artifacts/run-state.json";
pub const STATE_TRACE: &str = "artifacts/state-trace.json";
pub const AUDIT_QUEUE: &str = "audit/queue.json";
pub const RUN_SUMMARY: &str = "artifacts/run.json";
const ANALYSIS: &str = "artifacts/analysis.json";
const STRUCTURE: &str = "artifacts/structure.json";
const MANIFEST: &str = "artifacts/manifest.json";
const TEST_PLAN: &str = "artifacts/test-plan.json";
const TRACE_MATRIX: &str = "artifacts/trace-matrix.json";

// ---------------------------------------------------------------------------
// Budgets and routing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub self_debug: u32,
    pub plan_revision: u32,
    pub rectification: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            self_debug: 3,
            plan_revision: 2,
            rectification: 3,
        }
    }
}

impl Budgets {
    pub fn new(self_debug: u32, plan_revision: u32, rectification: u32) -> Self {
        Self {
            self_debug,
            plan_revision,
            rectification,
        }
    }

    /// Compile attempts a permanently failing unit gets before escalation.
    pub fn max_compile_attempts(&self) -> u32 {
        (self.plan_revision + 1) * (1 + self.self_debug)
    }
}

impl fmt::Display for Budgets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.self_debug, self.plan_revision, self.rectification)
    }
}

impl FromStr for Budgets {
    type Err = String;

    /// Parses `D,P,R`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [d, p, r] = parts.as_slice() else {
            return Err(format!("budgets must be D,P,R, got `{s}`"));
        };
        let n = |v: &str| v.parse::<u32>().map_err(|_| format!("budget `{v}` is not a non-negative integer"));
        Ok(Self::new(n(d)?, n(p)?, n(r)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    SelfDebug,
    PlanRevision,
    Rectify,
    Escalate,
}

/// Decides the repair for `event` from its counter snapshot.
pub fn route_feedback(event: &FeedbackEvent, budgets: &Budgets) -> Decision {
    let c = &event.counters;
    match event.origin {
        FeedbackOrigin::Compiler | FeedbackOrigin::LaunchCheck => {
            if c.debug_attempts < budgets.self_debug {
                Decision::SelfDebug
            } else if c.plan_revisions < budgets.plan_revision {
                Decision::PlanRevision
            } else {
                Decision::Escalate
            }
        }
        FeedbackOrigin::TestReport | FeedbackOrigin::QualityCheck => {
            if c.rectifications < budgets.rectification {
                Decision::Rectify
            } else {
                Decision::Escalate
            }
        }
    }
}

// ---------------------------------------------------------------------------
// States and steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PipelineState {
    Planning,
    Structuring,
    ApiAnalysis,
    Generating { module: String },
    Compiling { module: String },
    SelfDebugging { module: String },
    Revising,
    Rebuilding,
    IntegrationCheck,
    Testing,
    Rectifying,
    Escalated { reason: String },
    Done,
}

impl PipelineState {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Planning => "Planning",
            Self::Structuring => "Structuring",
            Self::ApiAnalysis => "ApiAnalysis",
            Self::Generating { .. } => "Generating",
            Self::Compiling { .. } => "Compiling",
            Self::SelfDebugging { .. } => "SelfDebugging",
            Self::Revising => "Revising",
            Self::Rebuilding => "Rebuilding",
            Self::IntegrationCheck => "IntegrationCheck",
            Self::Testing => "Testing",
            Self::Rectifying => "Rectifying",
            Self::Escalated { .. } => "Escalated",
            Self::Done => "Done",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::Escalated { .. } | Self::Done)
    }
}

impl fmt::Display for PipelineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Generating { module } | Self::Compiling { module } | Self::SelfDebugging { module } => {
                write!(f, "{}({module})", self.name())
            }
            Self::Escalated { reason } => write!(f, "Escalated({reason})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Whether `from → to` is one of the declared edges. `None` is the start.
pub fn is_legal_transition(from: Option<&PipelineState>, to: &PipelineState) -> bool {
    use PipelineState as S;
    let Some(from) = from else {
        return matches!(to, S::Planning);
    };
    if matches!(to, S::Escalated { .. }) {
        return !from.is_terminal();
    }
    match from {
        S::Escalated { .. } => !to.is_terminal(),
        S::Done => false,
        S::Planning => matches!(to, S::Structuring),
        S::Structuring => matches!(to, S::ApiAnalysis),
        S::ApiAnalysis => matches!(to, S::Generating { .. }),
        S::Generating { .. } => matches!(to, S::Compiling { .. }),
        S::Compiling { .. } => matches!(
            to,
            S::Generating { .. } | S::Compiling { .. } | S::SelfDebugging { .. } | S::Revising | S::IntegrationCheck
        ),
        S::SelfDebugging { .. } => matches!(to, S::Compiling { .. }),
        S::Revising => matches!(to, S::Rebuilding),
        S::Rebuilding => matches!(to, S::Generating { .. } | S::Compiling { .. } | S::IntegrationCheck),
        S::IntegrationCheck => matches!(to, S::Testing | S::SelfDebugging { .. } | S::Revising | S::Rectifying),
        S::Testing => matches!(to, S::Rectifying | S::Done),
        S::Rectifying => matches!(to, S::Compiling { .. } | S::Testing),
    }
}

/// Checks a whole state trace against the edge set.
pub fn check_trace(trace: &[PipelineState]) -> Result<(), String> {
    let mut prev = None;
    for (i, s) in trace.iter().enumerate() {
        if !is_legal_transition(prev, s) {
            return Err(format!(
                "illegal transition at {i}: {} -> {s}",
                prev.map_or("start".to_owned(), ToString::to_string)
            ));
        }
        prev = Some(s);
    }
    Ok(())
}

/// Unit of work of the pipeline; also the re-entry point of an audit item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Step {
    Plan,
    Structure,
    AnalyzeApis,
    Generate { module: String },
    Compile { module: String },
    SelfDebug { module: String, event: String },
    Revise { event: String },
    Rebuild { event: String, from_version: u32 },
    IntegrationCheck,
    Test,
    Rectify { events: Vec<String> },
}

impl Step {
    pub fn state(&self) -> PipelineState {
        match self {
            Self::Plan => PipelineState::Planning,
            Self::Structure => PipelineState::Structuring,
            Self::AnalyzeApis => PipelineState::ApiAnalysis,
            Self::Generate { module } => PipelineState::Generating { module: module.clone() },
            Self::Compile { module } => PipelineState::Compiling { module: module.clone() },
            Self::SelfDebug { module, .. } => PipelineState::SelfDebugging { module: module.clone() },
            Self::Revise { .. } => PipelineState::Revising,
            Self::Rebuild { .. } => PipelineState::Rebuilding,
            Self::IntegrationCheck => PipelineState::IntegrationCheck,
            Self::Test => PipelineState::Testing,
            Self::Rectify { .. } => PipelineState::Rectifying,
        }
    }
}

// ---------------------------------------------------------------------------
// Audit queue
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EscalationReason {
    BudgetExhausted { budget: String },
    Internal { message: String },
}

impl fmt::Display for EscalationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BudgetExhausted { budget } => write!(f, "{budget} budget exhausted"),
            Self::Internal { message } => write!(f, "internal error: {message}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditStatus {
    Open,
    Resolved,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Directive {
    /// Replacement fixtures, stored under `audit/amendments/`.
    Amend {
        fixtures: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    /// Accept the defect; it no longer blocks completion.
    Skip {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    Abort {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditItem {
    pub id: String,
    pub run_id: String,
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    pub reason: EscalationReason,
    pub evidence: Vec<String>,
    pub status: AuditStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Directive>,
    pub reentry: Step,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditQueue {
    pub items: Vec<AuditItem>,
}

pub fn load_audit_queue(ws: &Workspace) -> Result<AuditQueue, WorkspaceError> {
    match ws.read_json(AUDIT_QUEUE) {
        Err(WorkspaceError::NotFound(_)) => Ok(AuditQueue::default()),
        other => other,
    }
}

/// A reviewer's directive as entered, before it is stored.
#[derive(Debug, Clone, PartialEq)]
pub enum DirectiveInput {
    Amend { fixtures: Vec<FixtureEntry>, note: Option<String> },
    Skip { note: Option<String> },
    Abort { note: Option<String> },
}

/// Records a directive on an open audit item.
pub fn resolve_item(ws: &Workspace, item_id: &str, input: DirectiveInput) -> Result<AuditItem, OrchestratorError> {
    let mut queue = load_audit_queue(ws)?;
    let item = queue
        .items
        .iter_mut()
        .find(|i| i.id == item_id)
        .ok_or_else(|| OrchestratorError::UnknownItem(item_id.to_owned()))?;
    if item.status != AuditStatus::Open {
        return Err(OrchestratorError::InvalidDirective(format!("{item_id} is not open")));
    }
    let directive = match input {
        DirectiveInput::Amend { fixtures, note } => {
            if fixtures.is_empty() {
                return Err(OrchestratorError::InvalidDirective("amendment has no fixtures".into()));
            }
            for f in &fixtures {
                f.key().map_err(|e| OrchestratorError::InvalidDirective(e.to_string()))?;
            }
            let rel = format!("audit/amendments/{item_id}.json");
            ws.write_json(&rel, &fixtures)?;
            Directive::Amend { fixtures: rel, note }
        }
        DirectiveInput::Skip { note } => {
            if !is_defect_subject(&item.subject) {
                return Err(OrchestratorError::InvalidDirective(format!(
                    "skip applies to test defects only, {} is {}",
                    item_id, item.subject
                )));
            }
            Directive::Skip { note }
        }
        DirectiveInput::Abort { note } => Directive::Abort { note },
    };
    item.resolution = Some(directive);
    item.status = AuditStatus::Resolved;
    let out = item.clone();
    ws.write_json(AUDIT_QUEUE, &queue)?;
    Ok(out)
}

fn is_defect_subject(subject: &str) -> bool {
    subject.starts_with("DEF-")
}

// ---------------------------------------------------------------------------
// Run state, metrics and outcome
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    /// Repair actions taken: self-debug rounds, plan revisions and
    /// rectification rounds.
    pub iterations: u32,
    pub feedback_events: BTreeMap<FeedbackOrigin, u32>,
    pub reused_units: u32,
    pub regenerated_units: u32,
    /// reused / (reused + regenerated) over all revisions; 1.0 without any.
    pub reuse_ratio: f64,
    pub compile_attempts: BTreeMap<String, u32>,
    pub plan_versions: u32,
    pub improvement_records: u32,
    pub rectification_rounds: u32,
    /// Feedback subjects whose failure later cleared.
    pub defects_repaired: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub run_id: String,
    pub budgets: Budgets,
    pub strict: bool,
    pub state: Option<PipelineState>,
    pub next: Option<Step>,
    pub plan_version: u32,
    /// Module id → unit path of every live unit.
    pub units: BTreeMap<String, String>,
    pub queue: VecDeque<String>,
    pub pending_compile: VecDeque<String>,
    pub revisions: u32,
    pub rectifications: BTreeMap<String, u32>,
    pub accepted_defects: Vec<String>,
    pub open_subjects: BTreeSet<String>,
    pub resolved_subjects: BTreeSet<String>,
    pub test_modules: Vec<String>,
    pub metrics: RunMetrics,
    pub backend_state: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub run_id: String,
    pub outcome: String,
    pub plan_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_report: Option<String>,
    pub audit_items: Vec<String>,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Done(TestReport),
    Escalated(Vec<AuditItem>),
}

impl RunOutcome {
    pub fn is_done(&self) -> bool {
        matches!(self, Self::Done(_))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("audit item {0} is still open")]
    UnresolvedItem(String),
    #[error("unknown audit item {0}")]
    UnknownItem(String),
    #[error("invalid directive: {0}")]
    InvalidDirective(String),
    #[error("run {0} is not escalated")]
    NotEscalated(String),
    #[error("workspace already holds run {0}; use resume")]
    AlreadyRan(String),
}

/// Deterministic id over the input documents and budgets.
pub fn run_id(srs_text: &str, add_text: &str, budgets: &Budgets) -> String {
    let mut h = Sha256::new();
    h.update(srs_text.as_bytes());
    h.update([0]);
    h.update(add_text.as_bytes());
    h.update([0]);
    h.update(budgets.to_string().as_bytes());
    format!("run-{}", &hex::encode(h.finalize())[..12])
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Unmappable functional requirements are errors instead of notes.
    pub strict: bool,
}

/// Everything a run needs besides the workspace.
pub struct Agents<'a> {
    pub kb: &'a KnowledgeBase,
    pub backend: &'a dyn GeneratorBackend,
    pub toolchain: &'a dyn Toolchain,
}

pub fn run(
    ws: &Workspace,
    agents: &Agents<'_>,
    budgets: Budgets,
    options: RunOptions,
) -> Result<RunOutcome, OrchestratorError> {
    if let Ok(existing) = ws.read_json::<RunState>(RUN_STATE) {
        return Err(OrchestratorError::AlreadyRan(existing.run_id));
    }
    let srs_text = std::fs::read_to_string(ws.path("inputs/srs.json")).map_err(|source| WorkspaceError::Io {
        path: "inputs/srs.json".into(),
        source,
    })?;
    let add_text = std::fs::read_to_string(ws.path("inputs/add.json")).map_err(|source| WorkspaceError::Io {
        path: "inputs/add.json".into(),
        source,
    })?;
    let state = RunState {
        run_id: run_id(&srs_text, &add_text, &budgets),
        budgets,
        strict: options.strict,
        state: None,
        next: Some(Step::Plan),
        plan_version: 0,
        units: BTreeMap::new(),
        queue: VecDeque::new(),
        pending_compile: VecDeque::new(),
        revisions: 0,
        rectifications: BTreeMap::new(),
        accepted_defects: Vec::new(),
        open_subjects: BTreeSet::new(),
        resolved_subjects: BTreeSet::new(),
        test_modules: Vec::new(),
        metrics: RunMetrics::default(),
        backend_state: Value::Null,
    };
    let mut p = Pipeline::new(ws, agents, state, Vec::new())?;
    p.drive()
}

/// Applies the resolved directives of an escalated run and continues it.
pub fn resume(ws: &Workspace, run_id: &str, agents: &Agents<'_>) -> Result<RunOutcome, OrchestratorError> {
    let state: RunState = ws
        .read_json(RUN_STATE)
        .map_err(|_| OrchestratorError::UnknownRun(run_id.to_owned()))?;
    if state.run_id != run_id {
        return Err(OrchestratorError::UnknownRun(run_id.to_owned()));
    }
    if !matches!(state.state, Some(PipelineState::Escalated { .. })) {
        return Err(OrchestratorError::NotEscalated(run_id.to_owned()));
    }
    let mut queue = load_audit_queue(ws)?;
    let pending: Vec<usize> = queue
        .items
        .iter()
        .enumerate()
        .filter(|(_, i)| i.run_id == run_id && i.status != AuditStatus::Closed)
        .map(|(n, _)| n)
        .collect();
    if let Some(open) = pending.iter().find(|n| queue.items[**n].status == AuditStatus::Open) {
        return Err(OrchestratorError::UnresolvedItem(queue.items[*open].id.clone()));
    }
    let trace: Vec<PipelineState> = ws.read_json(STATE_TRACE).unwrap_or_default();
    let mut p = Pipeline::new(ws, agents, state, trace)?;
    if pending.is_empty() {
        return Err(OrchestratorError::NotEscalated(run_id.to_owned()));
    }

    let aborted = pending
        .iter()
        .any(|n| matches!(queue.items[*n].resolution, Some(Directive::Abort { .. })));
    if aborted {
        for n in &pending {
            queue.items[*n].status = AuditStatus::Closed;
        }
        ws.write_json(AUDIT_QUEUE, &queue)?;
        let items = pending.iter().map(|n| queue.items[*n].clone()).collect();
        return Ok(RunOutcome::Escalated(items));
    }

    let mut reentry = None;
    for n in &pending {
        let item = queue.items[*n].clone();
        match &item.resolution {
            Some(Directive::Amend { .. }) => {
                p.reset_subject(&item.subject)?;
                reentry.get_or_insert(item.reentry.clone());
            }
            Some(Directive::Skip { .. }) => {
                p.accept_defect_group(&item)?;
                reentry.get_or_insert(Step::Test);
            }
            _ => unreachable!("open and aborted items handled above"),
        }
        queue.items[*n].status = AuditStatus::Closed;
    }
    ws.write_json(AUDIT_QUEUE, &queue)?;
    p.rs.next = reentry;
    p.drive()
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

enum Flow {
    Next(Step),
    Done(TestReport),
    Escalated(Vec<AuditItem>),
}

/// Failure inside a step; becomes an internal escalation.
struct StepError(String);

impl<E: std::error::Error> From<E> for StepError {
    fn from(e: E) -> Self {
        StepError(e.to_string())
    }
}

struct Pipeline<'a> {
    ws: &'a Workspace,
    agents: &'a Agents<'a>,
    rs: RunState,
    trace: Vec<PipelineState>,
    units: BTreeMap<String, SourceUnit>,
}

impl<'a> Pipeline<'a> {
    fn new(
        ws: &'a Workspace,
        agents: &'a Agents<'a>,
        rs: RunState,
        trace: Vec<PipelineState>,
    ) -> Result<Self, OrchestratorError> {
        let mut units = BTreeMap::new();
        for (m, path) in &rs.units {
            units.insert(m.clone(), ws.read_unit(path)?);
        }
        agents
            .backend
            .restore(&rs.backend_state)
            .map_err(|e| OrchestratorError::InvalidDirective(format!("backend checkpoint: {e}")))?;
        // amendments survive across invocations
        let queue = load_audit_queue(ws)?;
        for item in &queue.items {
            if let Some(Directive::Amend { fixtures, .. }) = &item.resolution {
                let entries: Vec<FixtureEntry> = ws.read_json(fixtures)?;
                agents
                    .backend
                    .amend(&entries)
                    .map_err(|e| OrchestratorError::InvalidDirective(e.to_string()))?;
            }
        }
        Ok(Self {
            ws,
            agents,
            rs,
            trace,
            units,
        })
    }

    fn drive(&mut self) -> Result<RunOutcome, OrchestratorError> {
        loop {
            let Some(step) = self.rs.next.take() else {
                return Err(OrchestratorError::NotEscalated(self.rs.run_id.clone()));
            };
            self.enter(step.state());
            let flow = match self.exec(&step) {
                Ok(flow) => flow,
                Err(StepError(message)) => {
                    let item = self.escalate(
                        "pipeline".into(),
                        None,
                        EscalationReason::Internal { message },
                        step.clone(),
                    )?;
                    Flow::Escalated(vec![item])
                }
            };
            match flow {
                Flow::Next(next) => {
                    self.rs.next = Some(next);
                    self.checkpoint()?;
                }
                Flow::Done(report) => {
                    self.enter(PipelineState::Done);
                    self.finish("Done", Some(&report), &[])?;
                    return Ok(RunOutcome::Done(report));
                }
                Flow::Escalated(items) => {
                    let reason = items
                        .iter()
                        .map(|i| format!("{}: {}", i.subject, i.reason))
                        .collect::<Vec<_>>()
                        .join("; ");
                    self.enter(PipelineState::Escalated { reason });
                    self.finish("Escalated", None, &items)?;
                    return Ok(RunOutcome::Escalated(items));
                }
            }
        }
    }

    fn enter(&mut self, state: PipelineState) {
        debug_assert!(
            is_legal_transition(self.trace.last(), &state),
            "illegal transition {:?} -> {state}",
            self.trace.last()
        );
        self.rs.state = Some(state.clone());
        self.trace.push(state);
    }

    fn checkpoint(&mut self) -> Result<(), WorkspaceError> {
        self.rs.backend_state = self.agents.backend.checkpoint();
        self.rs.metrics.reuse_ratio = reuse_ratio(self.rs.metrics.reused_units, self.rs.metrics.regenerated_units);
        self.ws.write_json(RUN_STATE, &self.rs)?;
        self.ws.write_json(STATE_TRACE, &self.trace)
    }

    fn finish(&mut self, outcome: &str, report: Option<&TestReport>, items: &[AuditItem]) -> Result<(), WorkspaceError> {
        self.rs.metrics.plan_versions = self.rs.plan_version;
        self.rs.metrics.improvement_records = self.ws.improvement_log()?.len() as u32;
        self.rs.metrics.defects_repaired = self.rs.resolved_subjects.len() as u32;
        self.checkpoint()?;
        let summary = RunSummary {
            run_id: self.rs.run_id.clone(),
            outcome: outcome.to_owned(),
            plan_version: self.rs.plan_version,
            final_report: report.map(|r| Workspace::ordinal_path("report", r.ordinal)),
            audit_items: items.iter().map(|i| i.id.clone()).collect(),
            metrics: self.rs.metrics.clone(),
        };
        self.ws.write_json(RUN_SUMMARY, &summary)
    }

    fn next_ordinal(&self, kind: &str) -> u64 {
        self.ws.ordinals(kind).last().map_or(1, |n| n + 1)
    }

    fn plan(&self) -> Result<CodePlan, StepError> {
        Ok(self.ws.load_plan(self.rs.plan_version)?)
    }

    fn structure(&self) -> Result<ProjectStructure, StepError> {
        Ok(self.ws.read_json(STRUCTURE)?)
    }

    fn manifest(&self) -> Result<ApiManifest, StepError> {
        Ok(self.ws.read_json(MANIFEST)?)
    }

    fn unit_list(&self) -> Vec<SourceUnit> {
        self.units.values().cloned().collect()
    }

    fn store_unit(&mut self, unit: SourceUnit) -> Result<(), StepError> {
        self.ws.write_unit(&unit)?;
        self.rs.units.insert(unit.module_id.clone(), unit.path.clone());
        self.units.insert(unit.module_id.clone(), unit);
        Ok(())
    }

    fn next_build_step(&mut self) -> Step {
        if let Some(m) = self.rs.pending_compile.pop_front() {
            Step::Compile { module: m }
        } else if let Some(m) = self.rs.queue.pop_front() {
            Step::Generate { module: m }
        } else {
            Step::IntegrationCheck
        }
    }

    fn exec(&mut self, step: &Step) -> Result<Flow, StepError> {
        match step {
            Step::Plan => self.step_plan(),
            Step::Structure => self.step_structure(),
            Step::AnalyzeApis => self.step_apis(),
            Step::Generate { module } => self.step_generate(module),
            Step::Compile { module } => self.step_compile(module),
            Step::SelfDebug { module, event } => self.step_self_debug(module, event),
            Step::Revise { event } => self.step_revise(event),
            Step::Rebuild { event, from_version } => self.step_rebuild(event, *from_version),
            Step::IntegrationCheck => self.step_integration(),
            Step::Test => self.step_test(),
            Step::Rectify { events } => self.step_rectify(events),
        }
    }

    fn step_plan(&mut self) -> Result<Flow, StepError> {
        let (srs, add) = self.ws.inputs()?;
        let analysis = copa::analyze_documents(&srs, &add, self.agents.kb)?;
        self.ws.write_json(ANALYSIS, &analysis)?;
        let plan = copa::generate_plan(&analysis, &add, self.agents.backend)?;
        self.ws.persist_plan(&plan)?;
        self.rs.plan_version = plan.version;
        Ok(Flow::Next(Step::Structure))
    }

    fn step_structure(&mut self) -> Result<Flow, StepError> {
        let structure = copa::generate_structure(&self.plan()?);
        self.ws.write_json(STRUCTURE, &structure)?;
        Ok(Flow::Next(Step::AnalyzeApis))
    }

    fn step_apis(&mut self) -> Result<Flow, StepError> {
        let plan = self.plan()?;
        let analysis: AnalysisResult = self.ws.read_json(ANALYSIS)?;
        let manifest = ca::analyze_apis(&plan, &analysis.constraints, self.agents.kb, self.agents.backend)?;
        self.ws.write_json(MANIFEST, &manifest)?;
        let mut structure = self.structure()?;
        structure.apply_manifest(&manifest);
        self.ws.write_json(STRUCTURE, &structure)?;
        self.rs.queue = topo_order(&plan.dep_graph)
            .map_err(|e| StepError(e.to_string()))?
            .into_iter()
            .collect();
        match self.next_build_step() {
            Step::IntegrationCheck => Err(StepError("plan has no modules".into())),
            step => Ok(Flow::Next(step)),
        }
    }

    fn step_generate(&mut self, module: &str) -> Result<Flow, StepError> {
        let unit = ca::generate_unit(
            module,
            &self.plan()?,
            &self.structure()?,
            &self.units,
            &self.manifest()?,
            self.agents.backend,
        )?;
        self.store_unit(unit)?;
        Ok(Flow::Next(Step::Compile { module: module.to_owned() }))
    }

    fn step_compile(&mut self, module: &str) -> Result<Flow, StepError> {
        let mut unit = self
            .units
            .get(module)
            .cloned()
            .ok_or_else(|| StepError(format!("no unit for {module}")))?;
        if unit.status != UnitStatus::Generated {
            unit.status = UnitStatus::Generated;
        }
        let ordinal = self.next_ordinal("compile");
        let others = self.unit_list();
        let log = ca::compile_unit(&mut unit, &others, self.agents.toolchain, ordinal)?;
        let log_path = self.ws.persist_ordinal("compile", ordinal, &log)?;
        *self.rs.metrics.compile_attempts.entry(module.to_owned()).or_default() += 1;
        self.store_unit(unit.clone())?;
        if log.is_success() {
            self.clear_subject(module);
            return Ok(Flow::Next(self.next_build_step()));
        }
        self.module_failure(FeedbackOrigin::Compiler, module, log_path)
    }

    /// Records a compiler or launch failure of `module` and routes it.
    fn module_failure(&mut self, origin: FeedbackOrigin, module: &str, payload_ref: String) -> Result<Flow, StepError> {
        let attempts = self.units.get(module).map_or(0, |u| u.debug_attempts);
        let event = FeedbackEvent {
            origin,
            payload_ref,
            subject: module.to_owned(),
            counters: CounterSnapshot {
                debug_attempts: attempts,
                plan_revisions: self.rs.revisions,
                rectifications: 0,
            },
        };
        let event_path = self.record_event(&event)?;
        match route_feedback(&event, &self.rs.budgets) {
            Decision::SelfDebug => Ok(Flow::Next(Step::SelfDebug {
                module: module.to_owned(),
                event: event_path,
            })),
            Decision::PlanRevision => Ok(Flow::Next(Step::Revise { event: event_path })),
            _ => {
                let budget = if self.rs.budgets.plan_revision == 0 {
                    "self_debug"
                } else {
                    "plan_revision"
                };
                let item = self.escalate(
                    module.to_owned(),
                    Some(event_path.clone()),
                    EscalationReason::BudgetExhausted { budget: budget.into() },
                    Step::SelfDebug {
                        module: module.to_owned(),
                        event: event_path,
                    },
                )?;
                Ok(Flow::Escalated(vec![item]))
            }
        }
    }

    fn record_event(&mut self, event: &FeedbackEvent) -> Result<String, StepError> {
        let ordinal = self.next_ordinal("event");
        let path = self.ws.persist_ordinal("event", ordinal, event)?;
        *self.rs.metrics.feedback_events.entry(event.origin).or_default() += 1;
        self.rs.open_subjects.insert(event.subject.clone());
        Ok(path)
    }

    fn clear_subject(&mut self, subject: &str) {
        if self.rs.open_subjects.remove(subject) {
            self.rs.resolved_subjects.insert(subject.to_owned());
        }
    }

    /// Diagnostics of an event's payload that concern `module`, in the form
    /// sent to the backend.
    fn event_diagnostics(&self, event: &FeedbackEvent) -> Result<Vec<Value>, StepError> {
        let unit_path = self.units.get(&event.subject).map(|u| u.path.clone());
        match event.origin {
            FeedbackOrigin::Compiler => {
                let log: CompilationLog = self.ws.read_json(&event.payload_ref)?;
                let relevant: Vec<_> = log
                    .diagnostics
                    .into_iter()
                    .filter(|d| log.scope != crate::model::INTEGRATION_SCOPE || Some(&d.location.path) == unit_path.as_ref())
                    .collect();
                Ok(ca::diagnostic_summary(&relevant))
            }
            FeedbackOrigin::LaunchCheck => {
                let outcome: LaunchOutcome = self.ws.read_json(&event.payload_ref)?;
                Ok(outcome
                    .failures
                    .iter()
                    .filter(|f| f.module_id.as_deref().is_none_or(|m| m == event.subject))
                    .map(|f| json!({"error_type": "launch-failure", "message": f.detail}))
                    .collect())
            }
            _ => Ok(Vec::new()),
        }
    }

    fn step_self_debug(&mut self, module: &str, event_path: &str) -> Result<Flow, StepError> {
        let event: FeedbackEvent = self.ws.read_json(event_path)?;
        let diagnostics = self.event_diagnostics(&event)?;
        let unit = self
            .units
            .get(module)
            .ok_or_else(|| StepError(format!("no unit for {module}")))?;
        let fixed = ca::self_debug(unit, &diagnostics, self.rs.budgets.self_debug, self.agents.backend)?;
        self.rs.metrics.iterations += 1;
        self.store_unit(fixed)?;
        Ok(Flow::Next(Step::Compile { module: module.to_owned() }))
    }

    fn step_revise(&mut self, event_path: &str) -> Result<Flow, StepError> {
        let event: FeedbackEvent = self.ws.read_json(event_path)?;
        let diagnostics = self.event_diagnostics(&event)?;
        let (srs, add) = self.ws.inputs()?;
        let old = self.plan()?;
        let revised = copa::revise_plan(&old, &event, &diagnostics, &srs, &add, self.agents.backend)?;
        self.ws.persist_plan(&revised)?;
        self.rs.plan_version = revised.version;
        self.rs.revisions += 1;
        self.rs.metrics.iterations += 1;
        Ok(Flow::Next(Step::Rebuild {
            event: event_path.to_owned(),
            from_version: old.version,
        }))
    }

    fn step_rebuild(&mut self, event_path: &str, from_version: u32) -> Result<Flow, StepError> {
        let event: FeedbackEvent = self.ws.read_json(event_path)?;
        let old = self.ws.load_plan(from_version)?;
        let new = self.plan()?;
        let (reuse, regenerate) = incremental_rebuild_set(&old, &new, &self.units).map_err(|e| StepError(e.to_string()))?;

        let mut structure = copa::generate_structure(&new);
        structure.apply_manifest(&self.manifest()?);
        self.ws.write_json(STRUCTURE, &structure)?;

        for m in &regenerate {
            if let Some(unit) = self.units.remove(m) {
                self.rs.units.remove(m);
                let _ = std::fs::remove_file(self.ws.path(&unit.path));
            }
        }
        let live: BTreeSet<String> = new.module_ids().into_iter().collect();
        let removed: Vec<String> = self.units.keys().filter(|m| !live.contains(*m)).cloned().collect();
        for m in removed {
            if let Some(unit) = self.units.remove(&m) {
                self.rs.units.remove(&m);
                let _ = std::fs::remove_file(self.ws.path(&unit.path));
            }
        }
        self.rs.metrics.reused_units += reuse.len() as u32;
        self.rs.metrics.regenerated_units += regenerate.len() as u32;

        // reused units keep their bodies; the failing subject gets a fresh
        // budget and is compiled again against the new plan
        self.rs.pending_compile.clear();
        if let Some(unit) = self.units.get(&event.subject).cloned() {
            let reset = SourceUnit {
                debug_attempts: 0,
                status: UnitStatus::Generated,
                ..unit
            };
            self.store_unit(reset)?;
            self.rs.pending_compile.push_back(event.subject.clone());
        }
        let order = topo_order(&new.dep_graph).map_err(|e| StepError(e.to_string()))?;
        self.rs.queue = order.into_iter().filter(|m| !self.units.contains_key(m)).collect();

        if !self.rs.test_modules.is_empty() {
            self.regenerate_cases(&old, &new)?;
        }

        let changed_units: Vec<String> = regenerate
            .iter()
            .filter_map(|m| structure.unit_path(m))
            .collect();
        self.ws.record_improvement(ImprovementRecord {
            ordinal: 0,
            trigger: event_path.to_owned(),
            changed_units,
            plan_version_before: old.version,
            plan_version_after: new.version,
        })?;
        Ok(Flow::Next(self.next_build_step()))
    }

    fn regenerate_cases(&mut self, old: &CodePlan, new: &CodePlan) -> Result<(), StepError> {
        let diff = plan_diff(old, new).map_err(|e| StepError(e.to_string()))?;
        let (srs, add) = self.ws.inputs()?;
        let analysis: AnalysisResult = self.ws.read_json(ANALYSIS)?;
        let test_plan = ta::generate_test_plan(&srs, &add, new, &analysis.constraints, self.agents.kb, self.rs.strict)?;
        let cases = self.load_cases()?;
        let (cases, _) = ta::regenerate_for_plan(&cases, &test_plan, new, &diff.changed_signatures())?;
        self.store_tests(&test_plan, &cases)
    }

    fn load_cases(&self) -> Result<Vec<TestCase>, StepError> {
        let mut out = Vec::new();
        for m in &self.rs.test_modules {
            let cases: Vec<TestCase> = self.ws.read_json(&Workspace::cases_path(m))?;
            out.extend(cases);
        }
        Ok(out)
    }

    fn store_tests(&mut self, test_plan: &TestPlan, cases: &[TestCase]) -> Result<(), StepError> {
        let mut by_module: BTreeMap<String, Vec<TestCase>> = BTreeMap::new();
        for m in &self.rs.test_modules {
            by_module.entry(m.clone()).or_default();
        }
        for c in cases {
            let m = test_plan
                .module_of(&c.trace.requirement_id, &c.trace.method_signature)
                .ok_or_else(|| StepError(format!("case {} has no mapped module", c.id)))?;
            by_module.entry(m.to_owned()).or_default().push(c.clone());
        }
        for (m, cs) in &by_module {
            self.ws.write_cases(m, cs)?;
        }
        self.rs.test_modules = by_module.keys().cloned().collect();
        self.ws.write_json(TEST_PLAN, test_plan)?;
        self.ws.write_json(TRACE_MATRIX, &ta::build_matrix(test_plan, cases))?;
        Ok(())
    }

    fn step_integration(&mut self) -> Result<Flow, StepError> {
        let units = self.unit_list();
        let ordinal = self.next_ordinal("compile");
        let (log, launch) = ca::integration_build(&units, self.agents.toolchain, ordinal)?;
        let log_path = self.ws.persist_ordinal("compile", ordinal, &log)?;
        if !log.is_success() {
            let module = log
                .errors()
                .find_map(|d| units.iter().find(|u| u.path == d.location.path))
                .map(|u| u.module_id.clone())
                .or_else(|| self.fallback_module())
                .ok_or_else(|| StepError("integration build failed with no unit to blame".into()))?;
            self.mark_failed(&module)?;
            return self.module_failure(FeedbackOrigin::Compiler, &module, log_path);
        }
        let mut launch = launch.expect("launch runs after a clean build");
        let launch_ordinal = self.next_ordinal("launch");
        launch.ordinal = launch_ordinal;
        let launch_path = self.ws.persist_ordinal("launch", launch_ordinal, &launch)?;
        if !launch.ok {
            let module = launch
                .failures
                .iter()
                .find_map(|f| f.module_id.clone())
                .or_else(|| self.fallback_module())
                .ok_or_else(|| StepError("launch failed with no unit to blame".into()))?;
            self.mark_failed(&module)?;
            return self.module_failure(FeedbackOrigin::LaunchCheck, &module, launch_path);
        }
        let modules: Vec<String> = self.units.keys().cloned().collect();
        for m in modules {
            self.clear_subject(&m);
        }

        let plan = self.plan()?;
        let structure = self.structure()?;
        let findings = ca::quality_check(&self.units, &plan, &structure);
        let quality_modules: BTreeSet<String> = findings.iter().map(|f| f.module_id.clone()).collect();
        let stale: Vec<String> = self
            .rs
            .open_subjects
            .iter()
            .filter(|s| s.strip_prefix("quality:").is_some_and(|m| !quality_modules.contains(m)))
            .cloned()
            .collect();
        for s in stale {
            self.clear_subject(&s);
        }
        if findings.is_empty() {
            return Ok(Flow::Next(Step::Test));
        }
        let ordinal = self.next_ordinal("quality");
        let path = self.ws.persist_ordinal("quality", ordinal, &QualityReport { findings, ordinal })?;
        let subjects: Vec<String> = quality_modules.iter().map(|m| format!("quality:{m}")).collect();
        self.route_rectifiable(FeedbackOrigin::QualityCheck, &path, subjects)
    }

    fn fallback_module(&self) -> Option<String> {
        let structure: ProjectStructure = self.ws.read_json(STRUCTURE).ok()?;
        structure
            .entry_points
            .keys()
            .find(|m| self.units.contains_key(*m))
            .cloned()
            .or_else(|| self.units.keys().next().cloned())
    }

    fn mark_failed(&mut self, module: &str) -> Result<(), StepError> {
        if let Some(unit) = self.units.get(module).cloned() {
            self.store_unit(SourceUnit {
                status: UnitStatus::Failed,
                ..unit
            })?;
        }
        Ok(())
    }

    /// One event per subject; rectify them together, or escalate every
    /// subject whose budget is spent.
    fn route_rectifiable(&mut self, origin: FeedbackOrigin, payload_ref: &str, subjects: Vec<String>) -> Result<Flow, StepError> {
        let mut to_fix = Vec::new();
        let mut exhausted = Vec::new();
        for subject in subjects {
            let event = FeedbackEvent {
                origin,
                payload_ref: payload_ref.to_owned(),
                subject: subject.clone(),
                counters: CounterSnapshot {
                    debug_attempts: 0,
                    plan_revisions: self.rs.revisions,
                    rectifications: self.rs.rectifications.get(&subject).copied().unwrap_or(0),
                },
            };
            let path = self.record_event(&event)?;
            match route_feedback(&event, &self.rs.budgets) {
                Decision::Rectify => to_fix.push(path),
                _ => exhausted.push((subject, path)),
            }
        }
        if exhausted.is_empty() {
            return Ok(Flow::Next(Step::Rectify { events: to_fix }));
        }
        let mut items = Vec::new();
        for (subject, path) in exhausted {
            items.push(self.escalate(
                subject,
                Some(path.clone()),
                EscalationReason::BudgetExhausted {
                    budget: "rectification".into(),
                },
                Step::Rectify { events: vec![path] },
            )?);
        }
        Ok(Flow::Escalated(items))
    }

    fn step_test(&mut self) -> Result<Flow, StepError> {
        let plan = self.plan()?;
        let (srs, add) = self.ws.inputs()?;
        let analysis: AnalysisResult = self.ws.read_json(ANALYSIS)?;
        let test_plan = ta::generate_test_plan(&srs, &add, &plan, &analysis.constraints, self.agents.kb, self.rs.strict)?;
        let mut cases = if self.rs.test_modules.is_empty() {
            ta::derive_all(&test_plan, &plan)?
        } else {
            self.load_cases()?
        };
        let ordinal = self.next_ordinal("report");
        let mut report = ta::execute_and_report(
            &mut cases,
            &self.unit_list(),
            &plan,
            &test_plan,
            self.agents.toolchain,
            ordinal,
        )?;
        report.accepted_defects = report
            .defects
            .iter()
            .filter(|d| self.rs.accepted_defects.contains(&d.id))
            .map(|d| d.id.clone())
            .collect();
        self.store_tests(&test_plan, &cases)?;
        let path = self.ws.persist_ordinal("report", ordinal, &report)?;

        let groups = defect_groups(&report);
        let failing: BTreeSet<&str> = groups.iter().map(|g| g.as_str()).collect();
        let stale: Vec<String> = self
            .rs
            .open_subjects
            .iter()
            .filter(|s| is_defect_subject(s) && !failing.contains(s.as_str()))
            .cloned()
            .collect();
        for s in stale {
            self.clear_subject(&s);
        }
        if groups.is_empty() {
            return Ok(Flow::Done(report));
        }
        self.route_rectifiable(FeedbackOrigin::TestReport, &path, groups)
    }

    fn step_rectify(&mut self, event_paths: &[String]) -> Result<Flow, StepError> {
        let plan = self.plan()?;
        let manifest = self.manifest()?;
        let mut issues = Vec::new();
        for path in event_paths {
            let event: FeedbackEvent = self.ws.read_json(path)?;
            issues.push(self.issue_for(&event, &plan)?);
        }
        let result = ca::rectify(
            &issues,
            &self.units,
            &plan,
            &manifest,
            &self.rs.rectifications,
            self.rs.budgets.rectification,
            self.agents.backend,
        )?;
        for issue in &issues {
            *self.rs.rectifications.entry(issue.subject.clone()).or_default() += 1;
        }
        self.rs.metrics.iterations += 1;
        self.rs.metrics.rectification_rounds += 1;
        if let Some(m) = &result.manifest {
            self.ws.write_json(MANIFEST, m)?;
            let mut structure = self.structure()?;
            structure.apply_manifest(m);
            self.ws.write_json(STRUCTURE, &structure)?;
        }
        if result.changed.is_empty() && result.manifest.is_none() {
            return Ok(Flow::Next(Step::Test));
        }
        let order = topo_order(&plan.dep_graph).map_err(|e| StepError(e.to_string()))?;
        let changed: BTreeSet<String> = result.changed.iter().map(|u| u.module_id.clone()).collect();
        let mut changed_units = Vec::new();
        if result.manifest.is_some() {
            changed_units.push(MANIFEST.to_owned());
        }
        for unit in result.changed {
            changed_units.push(unit.path.clone());
            self.store_unit(unit)?;
        }
        changed_units.sort();
        self.ws.record_improvement(ImprovementRecord {
            ordinal: 0,
            trigger: event_paths[0].clone(),
            changed_units,
            plan_version_before: plan.version,
            plan_version_after: plan.version,
        })?;
        self.rs.pending_compile = order.into_iter().filter(|m| changed.contains(m)).collect();
        Ok(Flow::Next(self.next_build_step()))
    }

    fn issue_for(&self, event: &FeedbackEvent, plan: &CodePlan) -> Result<Issue, StepError> {
        match event.origin {
            FeedbackOrigin::TestReport => {
                let report: TestReport = self.ws.read_json(&event.payload_ref)?;
                let defect = report
                    .defects
                    .iter()
                    .find(|d| d.id == event.subject)
                    .ok_or_else(|| StepError(format!("{} not in {}", event.subject, event.payload_ref)))?;
                let test_plan: TestPlan = self.ws.read_json(TEST_PLAN)?;
                let module = test_plan
                    .module_of(&defect.trace.requirement_id, &defect.trace.method_signature)
                    .or_else(|| {
                        plan.contracts()
                            .find(|(_, c)| c.signature == defect.trace.method_signature)
                            .map(|(m, _)| m)
                    })
                    .ok_or_else(|| StepError(format!("no module for {}", defect.trace.method_signature)))?;
                Ok(Issue {
                    subject: event.subject.clone(),
                    module_id: module.to_owned(),
                    method_signature: Some(defect.trace.method_signature.clone()),
                    category: defect_category(defect),
                    detail: defect.actual.clone(),
                })
            }
            FeedbackOrigin::QualityCheck => {
                let report: QualityReport = self.ws.read_json(&event.payload_ref)?;
                let module = event.subject.trim_start_matches("quality:").to_owned();
                let detail = report
                    .findings
                    .iter()
                    .filter(|f| f.module_id == module)
                    .map(|f| f.detail.clone())
                    .collect::<Vec<_>>()
                    .join("; ");
                Ok(Issue {
                    subject: event.subject.clone(),
                    module_id: module,
                    method_signature: None,
                    category: None,
                    detail,
                })
            }
            other => Err(StepError(format!("{other} feedback cannot be rectified"))),
        }
    }

    fn escalate(
        &mut self,
        subject: String,
        event: Option<String>,
        reason: EscalationReason,
        reentry: Step,
    ) -> Result<AuditItem, WorkspaceError> {
        let mut queue = load_audit_queue(self.ws)?;
        let item = AuditItem {
            id: format!("AUD-{:03}", queue.items.len() + 1),
            run_id: self.rs.run_id.clone(),
            evidence: self.evidence(&subject)?,
            subject,
            event,
            reason,
            status: AuditStatus::Open,
            resolution: None,
            reentry,
        };
        queue.items.push(item.clone());
        self.ws.write_json(AUDIT_QUEUE, &queue)?;
        Ok(item)
    }

    /// Artifacts a reviewer needs: plan versions, the subject's events, and
    /// its compile logs or the report history.
    fn evidence(&self, subject: &str) -> Result<Vec<String>, WorkspaceError> {
        let mut out: Vec<String> = self.ws.plan_versions().into_iter().map(Workspace::plan_path).collect();
        let unit_path = self.units.get(subject).map(|u| u.path.clone());
        for n in self.ws.ordinals("compile") {
            let log: CompilationLog = self.ws.load_ordinal("compile", n)?;
            if Some(&log.scope) == unit_path.as_ref() || log.scope == crate::model::INTEGRATION_SCOPE {
                out.push(Workspace::ordinal_path("compile", n));
            }
        }
        if unit_path.is_some() {
            out.extend(self.ws.ordinals("launch").into_iter().map(|n| Workspace::ordinal_path("launch", n)));
        }
        if is_defect_subject(subject) {
            out.extend(self.ws.ordinals("report").into_iter().map(|n| Workspace::ordinal_path("report", n)));
        }
        if subject.starts_with("quality:") {
            out.extend(self.ws.ordinals("quality").into_iter().map(|n| Workspace::ordinal_path("quality", n)));
        }
        for n in self.ws.ordinals("event") {
            let e: FeedbackEvent = self.ws.load_ordinal("event", n)?;
            if e.subject == subject {
                out.push(Workspace::ordinal_path("event", n));
            }
        }
        Ok(out)
    }

    fn reset_subject(&mut self, subject: &str) -> Result<(), OrchestratorError> {
        if let Some(unit) = self.units.get(subject).cloned() {
            let reset = SourceUnit {
                debug_attempts: 0,
                ..unit
            };
            self.ws.write_unit(&reset)?;
            self.units.insert(subject.to_owned(), reset);
        }
        self.rs.rectifications.remove(subject);
        Ok(())
    }

    fn accept_defect_group(&mut self, item: &AuditItem) -> Result<(), OrchestratorError> {
        let Some(event_path) = &item.event else {
            return Err(OrchestratorError::InvalidDirective(format!("{} has no defect event", item.id)));
        };
        let event: FeedbackEvent = self.ws.read_json(event_path)?;
        let report: TestReport = self.ws.read_json(&event.payload_ref)?;
        let primary = report
            .defects
            .iter()
            .find(|d| d.id == item.subject)
            .ok_or_else(|| OrchestratorError::InvalidDirective(format!("{} not in report", item.subject)))?;
        for d in &report.defects {
            if same_group(d, primary) && !self.rs.accepted_defects.contains(&d.id) {
                self.rs.accepted_defects.push(d.id.clone());
            }
        }
        self.rs.open_subjects.remove(&item.subject);
        Ok(())
    }
}

fn same_group(a: &Defect, b: &Defect) -> bool {
    a.trace.method_signature == b.trace.method_signature && a.actual == b.actual
}

fn defect_category(d: &Defect) -> Option<String> {
    // case ids end in `<category>-<nn>`
    let last = d.id.rsplit('/').next()?;
    Some(last.rsplit_once('-')?.0.to_owned())
}

/// Primary defect ids of the report's open defects: minor duplicates fold
/// into the earlier defect with the same signature and actual result.
pub fn defect_groups(report: &TestReport) -> Vec<String> {
    let open: Vec<&Defect> = report.open_defects().collect();
    let mut primaries: Vec<&Defect> = Vec::new();
    for d in open {
        if d.severity == DefectSeverity::Minor && primaries.iter().any(|p| same_group(p, d)) {
            continue;
        }
        if !primaries.iter().any(|p| same_group(p, d)) {
            primaries.push(d);
        }
    }
    primaries.into_iter().map(|d| d.id.clone()).collect()
}

fn reuse_ratio(reused: u32, regenerated: u32) -> f64 {
    if reused + regenerated == 0 {
        1.0
    } else {
        f64::from(reused) / f64::from(reused + regenerated)
    }
}

/// Splits the existing units into reused and regenerated for the step from
/// `old` to `new`: regenerated are the units in the conflict set.
pub fn incremental_rebuild_set(
    old: &CodePlan,
    new: &CodePlan,
    units: &BTreeMap<String, SourceUnit>,
) -> Result<(BTreeSet<String>, BTreeSet<String>), crate::graph::VersionError> {
    let diff = plan_diff(old, new)?;
    let conflicts = conflict_set(&diff, &new.dep_graph);
    let (regenerate, reuse) = units.keys().cloned().partition(|m| conflicts.contains(m));
    Ok((reuse, regenerate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(origin: FeedbackOrigin, d: u32, p: u32, r: u32) -> FeedbackEvent {
        FeedbackEvent {
            origin,
            payload_ref: "x".into(),
            subject: "m".into(),
            counters: CounterSnapshot {
                debug_attempts: d,
                plan_revisions: p,
                rectifications: r,
            },
        }
    }

    #[test]
    fn routing_table() {
        let b = Budgets::default();
        assert_eq!(route_feedback(&event(FeedbackOrigin::Compiler, 0, 0, 0), &b), Decision::SelfDebug);
        assert_eq!(route_feedback(&event(FeedbackOrigin::Compiler, 3, 0, 0), &b), Decision::PlanRevision);
        assert_eq!(route_feedback(&event(FeedbackOrigin::Compiler, 3, 2, 0), &b), Decision::Escalate);
        assert_eq!(route_feedback(&event(FeedbackOrigin::TestReport, 0, 0, 1), &b), Decision::Rectify);
        assert_eq!(route_feedback(&event(FeedbackOrigin::QualityCheck, 0, 0, 3), &b), Decision::Escalate);
    }

    #[test]
    fn budgets_parse() {
        assert_eq!("3, 2,1".parse::<Budgets>().unwrap(), Budgets::new(3, 2, 1));
        assert!("3,2".parse::<Budgets>().is_err());
        assert!("a,b,c".parse::<Budgets>().is_err());
        assert_eq!(Budgets::new(3, 2, 0).max_compile_attempts(), 12);
    }

    #[test]
    fn transitions() {
        use PipelineState as S;
        let m = || "m".to_string();
        assert!(is_legal_transition(None, &S::Planning));
        assert!(!is_legal_transition(None, &S::Testing));
        assert!(is_legal_transition(Some(&S::Compiling { module: m() }), &S::SelfDebugging { module: m() }));
        assert!(!is_legal_transition(Some(&S::Planning), &S::Testing));
        assert!(!is_legal_transition(Some(&S::Done), &S::Escalated { reason: "x".into() }));
        assert!(is_legal_transition(
            Some(&S::Escalated { reason: "x".into() }),
            &S::SelfDebugging { module: m() }
        ));
        assert!(check_trace(&[S::Planning, S::Structuring, S::Testing]).is_err());
    }

    #[test]
    fn reuse_ratio_convention() {
        assert_eq!(reuse_ratio(0, 0), 1.0);
        assert_eq!(reuse_ratio(1, 3), 0.25);
    }

    #[test]
    fn run_id_is_stable_and_budget_sensitive() {
        let a = run_id("s", "a", &Budgets::default());
        assert_eq!(a, run_id("s", "a", &Budgets::default()));
        assert_ne!(a, run_id("s", "a", &Budgets::new(1, 1, 1)));
        assert!(a.starts_with("run-"));
    }
}
