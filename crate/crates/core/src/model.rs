//! Shared artifact types.
//!
//! Every artifact serializes to JSON with the field names used here and
//! rejects unknown fields on parse. The canonical file form is pretty-printed
//! JSON followed by a single newline; [`to_canonical_json`] and
//! [`parse_json`] are inverse on that form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

/// A document or payload that failed to parse or violates a structural
/// invariant. `field` names the offending location.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("schema error at `{field}`: {message}")]
pub struct SchemaError {
    pub field: String,
    pub message: String,
}

impl SchemaError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for SchemaError {
    fn from(err: serde_json::Error) -> Self {
        let message = err.to_string();
        // serde reports unknown/missing fields as "unknown field `x`, ..."
        let field = message
            .split('`')
            .nth(1)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("line {}, column {}", err.line(), err.column()));
        Self { field, message }
    }
}

pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let mut out = serde_json::to_string_pretty(value).expect("artifact types always serialize");
    out.push('\n');
    out
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, SchemaError> {
    serde_json::from_str(text).map_err(SchemaError::from)
}

pub fn from_value<T: DeserializeOwned>(value: &Value) -> Result<T, SchemaError> {
    T::deserialize(value).map_err(SchemaError::from)
}

// ---------------------------------------------------------------------------
// Requirements and architecture documents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequirementKind {
    Functional,
    UserStory,
    AcceptanceCriterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementItem {
    pub id: String,
    pub kind: RequirementKind,
    pub text: String,
    #[serde(default)]
    pub constraints: Vec<String>,
    pub source_ref: String,
}

/// Software requirements specification, ingested as a structured document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Srs {
    #[serde(default)]
    pub project: String,
    pub requirements: Vec<RequirementItem>,
}

impl Srs {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for (i, req) in self.requirements.iter().enumerate() {
            if req.id.trim().is_empty() {
                return Err(SchemaError::new(format!("requirements[{i}].id"), "empty requirement id"));
            }
            if !seen.insert(req.id.as_str()) {
                return Err(SchemaError::new(
                    format!("requirements[{i}].id"),
                    format!("duplicate requirement id {}", req.id),
                ));
            }
        }
        Ok(())
    }

    pub fn requirement(&self, id: &str) -> Option<&RequirementItem> {
        self.requirements.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Public,
    Protected,
    Package,
    Private,
}

/// Inclusive numeric range `[lo, hi]`, kept as JSON numbers so integral
/// bounds stay integral in the file form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericRange(pub Number, pub Number);

impl NumericRange {
    pub fn new(lo: impl Into<Number>, hi: impl Into<Number>) -> Self {
        Self(lo.into(), hi.into())
    }

    pub fn lo(&self) -> f64 {
        self.0.as_f64().unwrap_or(f64::NAN)
    }

    pub fn hi(&self) -> f64 {
        self.1.as_f64().unwrap_or(f64::NAN)
    }

    pub fn int_bounds(&self) -> Option<(i64, i64)> {
        Some((self.0.as_i64()?, self.1.as_i64()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub semantic_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_range: Option<NumericRange>,
    #[serde(default)]
    pub invalid_classes: Vec<String>,
}

const INTEGRAL_TYPES: &[&str] = &[
    "int", "integer", "long", "short", "byte", "i8", "i16", "i32", "i64", "u8", "u16", "u32",
    "u64", "isize", "usize", "Integer", "Long", "Short", "Byte",
];

impl ParamSpec {
    pub fn is_integral(&self) -> bool {
        INTEGRAL_TYPES.contains(&self.semantic_type.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodContract {
    /// Canonical signature, e.g. `decreaseHealth(int tankId, int damage)`.
    pub signature: String,
    pub visibility: Visibility,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    pub returns: String,
    #[serde(default)]
    pub exception_conditions: Vec<String>,
    #[serde(default)]
    pub nondeterministic: bool,
}

impl MethodContract {
    /// Method name: the last token before the opening parenthesis.
    pub fn method_name(&self) -> &str {
        let head = self.signature.split('(').next().unwrap_or("");
        head.split_whitespace().last().unwrap_or(head)
    }

    pub fn validate(&self, field: &str) -> Result<(), SchemaError> {
        if self.signature.trim().is_empty() {
            return Err(SchemaError::new(format!("{field}.signature"), "empty signature"));
        }
        let mut names = BTreeSet::new();
        for (i, p) in self.params.iter().enumerate() {
            let pf = format!("{field}.params[{i}]");
            if p.name.trim().is_empty() {
                return Err(SchemaError::new(format!("{pf}.name"), "empty parameter name"));
            }
            if !names.insert(p.name.as_str()) {
                return Err(SchemaError::new(
                    format!("{pf}.name"),
                    format!("duplicate parameter {}", p.name),
                ));
            }
            if let Some(range) = &p.numeric_range {
                if range.lo().partial_cmp(&range.hi()).is_none_or(|o| o.is_gt()) {
                    return Err(SchemaError::new(
                        format!("{pf}.numeric_range"),
                        "lower bound exceeds upper bound",
                    ));
                }
                if p.is_integral() && range.int_bounds().is_none() {
                    return Err(SchemaError::new(
                        format!("{pf}.numeric_range"),
                        "integral parameter with non-integral bounds",
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchElement {
    pub module_id: String,
    #[serde(default)]
    pub responsibilities: String,
    #[serde(default)]
    pub contracts: Vec<MethodContract>,
    #[serde(default)]
    pub patterns: Vec<String>,
    #[serde(default)]
    pub tech_constraints: Vec<String>,
    #[serde(default)]
    pub depends_on: Vec<String>,
}

/// Links a requirement to the method contract that realizes it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLink {
    pub requirement_id: String,
    pub module_id: String,
    pub method_signature: String,
}

/// Architectural design document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Add {
    #[serde(default)]
    pub project: String,
    pub elements: Vec<ArchElement>,
    /// Domain types the contracts may name besides built-ins.
    #[serde(default)]
    pub types: Vec<String>,
    #[serde(default)]
    pub trace_links: Vec<TraceLink>,
}

impl Add {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut modules = BTreeSet::new();
        for (i, el) in self.elements.iter().enumerate() {
            let field = format!("elements[{i}]");
            if el.module_id.trim().is_empty() {
                return Err(SchemaError::new(format!("{field}.module_id"), "empty module id"));
            }
            if !modules.insert(el.module_id.as_str()) {
                return Err(SchemaError::new(
                    format!("{field}.module_id"),
                    format!("duplicate module id {}", el.module_id),
                ));
            }
            let mut sigs = BTreeSet::new();
            for (j, c) in el.contracts.iter().enumerate() {
                let cf = format!("{field}.contracts[{j}]");
                c.validate(&cf)?;
                if !sigs.insert(c.signature.as_str()) {
                    return Err(SchemaError::new(
                        format!("{cf}.signature"),
                        format!("duplicate signature {}", c.signature),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn element(&self, module_id: &str) -> Option<&ArchElement> {
        self.elements.iter().find(|e| e.module_id == module_id)
    }
}

// ---------------------------------------------------------------------------
// Plans and structure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanStep {
    pub module_id: String,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub contracts: Vec<MethodContract>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageNode {
    pub name: String,
    #[serde(default)]
    pub modules: Vec<String>,
    #[serde(default)]
    pub children: Vec<PackageNode>,
}

impl PackageNode {
    /// Visits every node with its path from the root (inclusive).
    pub fn walk<'a>(&'a self, prefix: &mut Vec<&'a str>, f: &mut dyn FnMut(&[&'a str], &'a PackageNode)) {
        prefix.push(&self.name);
        f(prefix, self);
        for child in &self.children {
            child.walk(prefix, f);
        }
        prefix.pop();
    }

    /// Module id → package path, one entry per placement (duplicates kept).
    pub fn placements(&self) -> Vec<(String, Vec<String>)> {
        let mut out = Vec::new();
        self.walk(&mut Vec::new(), &mut |path, node| {
            for m in &node.modules {
                out.push((m.clone(), path.iter().map(|s| s.to_string()).collect()));
            }
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InheritanceEdge {
    pub child: String,
    pub parent: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilityRule {
    pub module_id: String,
    pub symbol: String,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrangementRules {
    #[serde(default)]
    pub inheritance: Vec<InheritanceEdge>,
    #[serde(default)]
    pub visibility: Vec<VisibilityRule>,
}

/// Adjacency list over module ids. An edge `a → b` means `a` must be
/// implemented before `b` (`b` depends on `a`).
pub type DepGraph = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodePlan {
    pub version: u32,
    pub steps: Vec<PlanStep>,
    pub dep_graph: DepGraph,
    pub packages: PackageNode,
    #[serde(default)]
    pub arrangement_rules: ArrangementRules,
    #[serde(default)]
    pub ambiguities: Vec<String>,
}

impl CodePlan {
    pub fn step(&self, module_id: &str) -> Option<&PlanStep> {
        self.steps.iter().find(|s| s.module_id == module_id)
    }

    pub fn module_ids(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.module_id.clone()).collect()
    }

    /// Every `(module_id, contract)` pair in step order.
    pub fn contracts(&self) -> impl Iterator<Item = (&str, &MethodContract)> {
        self.steps
            .iter()
            .flat_map(|s| s.contracts.iter().map(move |c| (s.module_id.as_str(), c)))
    }

    pub fn contract(&self, module_id: &str, signature: &str) -> Option<&MethodContract> {
        self.step(module_id)?.contracts.iter().find(|c| c.signature == signature)
    }

    /// Direct dependencies of `module_id` (sources of edges into it).
    pub fn dependencies_of(&self, module_id: &str) -> Vec<String> {
        self.dep_graph
            .iter()
            .filter(|(_, targets)| targets.iter().any(|t| t == module_id))
            .map(|(src, _)| src.clone())
            .collect()
    }

    /// Sorts and dedups adjacency lists and lists every node as a key.
    pub fn normalize_graph(&mut self) {
        self.dep_graph = normalize_graph(&self.dep_graph, self.steps.iter().map(|s| s.module_id.as_str()));
    }

    pub fn into_proposal(self) -> PlanProposal {
        PlanProposal {
            steps: self.steps,
            dep_graph: self.dep_graph,
            packages: self.packages,
            arrangement_rules: self.arrangement_rules,
            ambiguities: self.ambiguities,
        }
    }
}

pub fn normalize_graph<'a>(graph: &DepGraph, extra_nodes: impl IntoIterator<Item = &'a str>) -> DepGraph {
    let mut out: DepGraph = BTreeMap::new();
    for node in extra_nodes {
        out.entry(node.to_owned()).or_default();
    }
    for (src, targets) in graph {
        out.entry(src.clone()).or_default();
        for t in targets {
            out.entry(t.clone()).or_default();
        }
    }
    for (src, targets) in graph {
        let entry = out.get_mut(src).expect("inserted above");
        entry.extend(targets.iter().cloned());
    }
    for targets in out.values_mut() {
        targets.sort();
        targets.dedup();
    }
    out
}

/// A plan as proposed by the generator backend: everything but the version,
/// which the planning agent assigns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanProposal {
    pub steps: Vec<PlanStep>,
    pub dep_graph: DepGraph,
    pub packages: PackageNode,
    #[serde(default)]
    pub arrangement_rules: ArrangementRules,
    #[serde(default)]
    pub ambiguities: Vec<String>,
}

impl PlanProposal {
    pub fn into_plan(self, version: u32) -> CodePlan {
        CodePlan {
            version,
            steps: self.steps,
            dep_graph: self.dep_graph,
            packages: self.packages,
            arrangement_rules: self.arrangement_rules,
            ambiguities: self.ambiguities,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirRole {
    Source,
    Tests,
    Resources,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryEntry {
    pub path: String,
    pub role: DirRole,
    #[serde(default)]
    pub modules: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectStructure {
    pub directories: Vec<DirectoryEntry>,
    pub entry_points: BTreeMap<String, String>,
    #[serde(default)]
    pub dep_config: BTreeMap<String, String>,
}

impl ProjectStructure {
    pub fn source_dir(&self, module_id: &str) -> Option<&str> {
        self.directories
            .iter()
            .find(|d| d.role == DirRole::Source && d.modules.iter().any(|m| m == module_id))
            .map(|d| d.path.as_str())
    }

    /// Workspace-relative path of the single source unit for `module_id`.
    pub fn unit_path(&self, module_id: &str) -> Option<String> {
        self.source_dir(module_id)
            .map(|dir| format!("{dir}/{module_id}.unit.json"))
    }

    pub fn apply_manifest(&mut self, manifest: &ApiManifest) {
        self.dep_config = manifest
            .entries
            .iter()
            .map(|e| (e.library_name.clone(), e.version_constraint.clone()))
            .collect();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiEntry {
    pub library_name: String,
    pub version_constraint: String,
    #[serde(default)]
    pub elements_used: Vec<String>,
    #[serde(default)]
    pub purpose: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiManifest {
    pub entries: Vec<ApiEntry>,
}

impl ApiManifest {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.library_name.trim().is_empty() {
                return Err(SchemaError::new(format!("entries[{i}].library_name"), "empty library name"));
            }
            if e.version_constraint.trim().is_empty() {
                return Err(SchemaError::new(
                    format!("entries[{i}].version_constraint"),
                    "empty version constraint",
                ));
            }
            if !seen.insert(e.library_name.as_str()) {
                return Err(SchemaError::new(
                    format!("entries[{i}].library_name"),
                    format!("duplicate library {}", e.library_name),
                ));
            }
        }
        Ok(())
    }

    pub fn library_names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.library_name.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Source units and compilation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerKind {
    Compile,
    Init,
    Logic,
}

impl fmt::Display for MarkerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Compile => "compile",
            Self::Init => "init",
            Self::Logic => "logic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectMarker {
    pub kind: MarkerKind,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_signature: Option<String>,
}

/// Structured stand-in for generated program text: the symbols a unit
/// declares, the symbols it uses, and any seeded defects.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubBody {
    #[serde(default)]
    pub declares: Vec<String>,
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub defect_markers: Vec<DefectMarker>,
}

impl StubBody {
    pub fn validate(&self) -> Result<(), SchemaError> {
        for (i, s) in self.declares.iter().enumerate() {
            if s.trim().is_empty() {
                return Err(SchemaError::new(format!("declares[{i}]"), "empty symbol name"));
            }
        }
        for (i, s) in self.references.iter().enumerate() {
            if s.trim().is_empty() {
                return Err(SchemaError::new(format!("references[{i}]"), "empty symbol name"));
            }
        }
        Ok(())
    }

    pub fn markers(&self, kind: MarkerKind) -> impl Iterator<Item = &DefectMarker> {
        self.defect_markers.iter().filter(move |m| m.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitStatus {
    Generated,
    Compiled,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceUnit {
    pub path: String,
    pub module_id: String,
    pub plan_version: u32,
    pub body: StubBody,
    pub status: UnitStatus,
    #[serde(default)]
    pub debug_attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Location {
    pub path: String,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostic {
    pub severity: Severity,
    pub error_type: String,
    pub location: Location,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggested_fix: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

pub const INTEGRATION_SCOPE: &str = "integration";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompilationLog {
    /// Unit path, or `"integration"` for a whole-workspace build.
    pub scope: String,
    pub diagnostics: Vec<Diagnostic>,
    pub outcome: Outcome,
    pub ordinal: u64,
}

impl CompilationLog {
    pub fn new(scope: impl Into<String>, diagnostics: Vec<Diagnostic>, ordinal: u64) -> Self {
        let outcome = if diagnostics.iter().any(|d| d.severity == Severity::Error) {
            Outcome::Failure
        } else {
            Outcome::Success
        };
        Self {
            scope: scope.into(),
            diagnostics,
            outcome,
            ordinal,
        }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error)
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

// ---------------------------------------------------------------------------
// Tests and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseCategory {
    Positive,
    Negative,
    Boundary,
    Exception,
    Property,
}

impl CaseCategory {
    pub const ALL: [CaseCategory; 5] = [
        Self::Positive,
        Self::Negative,
        Self::Boundary,
        Self::Exception,
        Self::Property,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::Boundary => "boundary",
            Self::Exception => "exception",
            Self::Property => "property",
        }
    }
}

impl fmt::Display for CaseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trace {
    pub requirement_id: String,
    pub method_signature: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Pending,
    Passed,
    Failed,
    Regenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCase {
    pub id: String,
    pub category: CaseCategory,
    pub trace: Trace,
    pub input_values: BTreeMap<String, Value>,
    pub oracle: String,
    pub status: CaseStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseResult {
    Passed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectSeverity {
    Blocker,
    Major,
    Minor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defect {
    pub id: String,
    pub severity: DefectSeverity,
    pub description: String,
    pub test_input: BTreeMap<String, Value>,
    pub expected: String,
    pub actual: String,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestReport {
    pub coverage: f64,
    pub case_results: BTreeMap<String, CaseResult>,
    pub defects: Vec<Defect>,
    /// Defect ids a reviewer accepted; they do not block completion.
    #[serde(default)]
    pub accepted_defects: Vec<String>,
    pub ordinal: u64,
}

impl TestReport {
    pub fn open_defects(&self) -> impl Iterator<Item = &Defect> {
        self.defects
            .iter()
            .filter(|d| !self.accepted_defects.contains(&d.id))
    }
}

// ---------------------------------------------------------------------------
// Feedback loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackOrigin {
    Compiler,
    LaunchCheck,
    TestReport,
    QualityCheck,
}

impl FeedbackOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Compiler => "compiler",
            Self::LaunchCheck => "launch_check",
            Self::TestReport => "test_report",
            Self::QualityCheck => "quality_check",
        }
    }
}

impl fmt::Display for FeedbackOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterSnapshot {
    pub debug_attempts: u32,
    pub plan_revisions: u32,
    pub rectifications: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackEvent {
    pub origin: FeedbackOrigin,
    /// Workspace-relative path of the artifact that raised the event.
    pub payload_ref: String,
    /// Module id, defect id, or `quality:<module>`.
    pub subject: String,
    pub counters: CounterSnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImprovementRecord {
    pub ordinal: u64,
    /// Path of the persisted [`FeedbackEvent`] that triggered the change.
    pub trigger: String,
    pub changed_units: Vec<String>,
    pub plan_version_before: u32,
    pub plan_version_after: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRow {
    pub requirement_id: String,
    pub module_id: String,
    pub method_signature: String,
    pub test_case_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceabilityMatrix {
    pub rows: Vec<TraceRow>,
}

impl TraceabilityMatrix {
    /// Checks every case trace has a row and every row resolves against the
    /// requirement ids and `(module, signature)` pairs given.
    pub fn check(
        &self,
        cases: &[TestCase],
        requirement_ids: &BTreeSet<String>,
        signatures: &BTreeSet<(String, String)>,
    ) -> Result<(), String> {
        for row in &self.rows {
            if !requirement_ids.contains(&row.requirement_id) {
                return Err(format!("dangling requirement {}", row.requirement_id));
            }
            if !signatures.contains(&(row.module_id.clone(), row.method_signature.clone())) {
                return Err(format!("dangling signature {}", row.method_signature));
            }
        }
        for case in cases {
            let listed = self.rows.iter().any(|r| {
                r.requirement_id == case.trace.requirement_id
                    && r.method_signature == case.trace.method_signature
                    && r.test_case_ids.contains(&case.id)
            });
            if !listed {
                return Err(format!("orphan case {}", case.id));
            }
        }
        Ok(())
    }
}
