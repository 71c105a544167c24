//! Coding agent: API manifest, unit generation in dependency order,
//! compilation, self-debugging, integration build and rectification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backends::{request, BackendError, GeneratorBackend, RectificationPayload, RequestKind};
use crate::kb::{tokenize, Corpus, KnowledgeBase};
use crate::model::{
    ApiEntry, ApiManifest, CodePlan, CompilationLog, Diagnostic, ProjectStructure, SourceUnit, StubBody,
    UnitStatus, Visibility,
};
use crate::toolchain::{CompileScope, LaunchOutcome, Toolchain, ToolchainError};

/// Technology constraints of the form `lib:<name>@<version constraint>`
/// name a library directly.
pub const LIB_PREFIX: &str = "lib:";

#[derive(Debug, thiserror::Error)]
pub enum CaError {
    #[error("{module} cannot be generated: dependency {dependency} is not compiled")]
    DependencyNotReady { module: String, dependency: String },
    #[error("budget exhausted for {subject}: {used} of {budget} used")]
    BudgetExhausted { subject: String, used: u32, budget: u32 },
    #[error("rectification touched {0}, outside the trace closure of its defects")]
    OutsideTraceClosure(String),
    #[error("module {0} has no step or directory in the plan")]
    UnknownModule(String),
    #[error("unit {path} is {status:?}, expected {expected:?}")]
    WrongStatus {
        path: String,
        status: UnitStatus,
        expected: UnitStatus,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
}

fn parse_lib_constraint(c: &str) -> Option<ApiEntry> {
    let rest = c.strip_prefix(LIB_PREFIX)?;
    let (name, version) = rest.split_once('@').unwrap_or((rest, "*"));
    let name = name.trim();
    if name.is_empty() {
        return None;
    }
    Some(ApiEntry {
        library_name: name.to_owned(),
        version_constraint: version.trim().to_owned(),
        elements_used: Vec::new(),
        purpose: "declared technology constraint".into(),
    })
}

/// Merges entries by library name: the first version constraint and
/// non-empty purpose win, used elements are unioned. Output is sorted by
/// library name.
pub fn merge_entries(entries: impl IntoIterator<Item = ApiEntry>) -> ApiManifest {
    let mut merged: BTreeMap<String, ApiEntry> = BTreeMap::new();
    for e in entries {
        match merged.get_mut(&e.library_name) {
            None => {
                merged.insert(e.library_name.clone(), e);
            }
            Some(existing) => {
                existing.elements_used.extend(e.elements_used);
                if existing.purpose.is_empty() {
                    existing.purpose = e.purpose;
                }
            }
        }
    }
    let entries = merged
        .into_values()
        .map(|mut e| {
            e.elements_used.sort();
            e.elements_used.dedup();
            e
        })
        .collect();
    ApiManifest { entries }
}

pub fn analyze_apis(
    plan: &CodePlan,
    constraints: &[String],
    kb: &KnowledgeBase,
    backend: &dyn GeneratorBackend,
) -> Result<ApiManifest, CaError> {
    let keywords: BTreeSet<String> = constraints.iter().flat_map(|c| tokenize(c)).collect();
    let knowledge: Vec<String> = kb
        .query(Corpus::Coding, Some("API Library"), &keywords, 3)
        .into_iter()
        .map(|d| d.id)
        .collect();
    let context = json!({
        "plan_version": plan.version,
        "modules": plan.module_ids(),
        "constraints": constraints,
        "knowledge": knowledge,
    });
    let (proposal, _) = request::<ApiManifest>(backend, RequestKind::ApiProposal, context)?;
    let declared = constraints.iter().filter_map(|c| parse_lib_constraint(c));
    Ok(merge_entries(declared.chain(proposal.entries)))
}

/// Generates the unit for `module_id`. Every dependency must already have a
/// compiled unit.
pub fn generate_unit(
    module_id: &str,
    plan: &CodePlan,
    structure: &ProjectStructure,
    units: &BTreeMap<String, SourceUnit>,
    manifest: &ApiManifest,
    backend: &dyn GeneratorBackend,
) -> Result<SourceUnit, CaError> {
    let step = plan
        .step(module_id)
        .ok_or_else(|| CaError::UnknownModule(module_id.to_owned()))?;
    let path = structure
        .unit_path(module_id)
        .ok_or_else(|| CaError::UnknownModule(module_id.to_owned()))?;
    let dependencies = plan.dependencies_of(module_id);
    for dep in &dependencies {
        let ready = units.get(dep).is_some_and(|u| u.status == UnitStatus::Compiled);
        if !ready {
            return Err(CaError::DependencyNotReady {
                module: module_id.to_owned(),
                dependency: dep.clone(),
            });
        }
    }
    let context = json!({
        "module_id": module_id,
        "plan_version": plan.version,
        "path": path,
        "contracts": step.contracts,
        "dependencies": dependencies,
        "libraries": manifest.library_names(),
    });
    let (body, _) = request::<StubBody>(backend, RequestKind::SourceUnit, context)?;
    Ok(SourceUnit {
        path,
        module_id: module_id.to_owned(),
        plan_version: plan.version,
        body,
        status: UnitStatus::Generated,
        debug_attempts: 0,
    })
}

/// Compiles `unit` against the other available units and updates its
/// status.
pub fn compile_unit(
    unit: &mut SourceUnit,
    others: &[SourceUnit],
    toolchain: &dyn Toolchain,
    ordinal: u64,
) -> Result<CompilationLog, CaError> {
    if unit.status != UnitStatus::Generated {
        return Err(CaError::WrongStatus {
            path: unit.path.clone(),
            status: unit.status,
            expected: UnitStatus::Generated,
        });
    }
    let mut scope_units: Vec<SourceUnit> = others.iter().filter(|u| u.path != unit.path).cloned().collect();
    scope_units.push(unit.clone());
    let diagnostics = toolchain.compile(&CompileScope::Unit(unit.path.clone()), &scope_units)?;
    let log = CompilationLog::new(unit.path.clone(), diagnostics, ordinal);
    unit.status = if log.is_success() {
        UnitStatus::Compiled
    } else {
        UnitStatus::Failed
    };
    Ok(log)
}

/// Diagnostic summary sent to the backend: type and message only, so a fix
/// request does not depend on line numbers.
pub fn diagnostic_summary(diags: &[Diagnostic]) -> Vec<Value> {
    diags
        .iter()
        .filter(|d| d.severity == crate::model::Severity::Error)
        .map(|d| json!({"error_type": d.error_type, "message": d.message}))
        .collect()
}

/// One fix-snippet round for a failed unit.
pub fn self_debug(
    unit: &SourceUnit,
    diagnostics: &[Value],
    budget: u32,
    backend: &dyn GeneratorBackend,
) -> Result<SourceUnit, CaError> {
    if unit.debug_attempts >= budget {
        return Err(CaError::BudgetExhausted {
            subject: unit.module_id.clone(),
            used: unit.debug_attempts,
            budget,
        });
    }
    let context = json!({
        "module_id": unit.module_id,
        "plan_version": unit.plan_version,
        "path": unit.path,
        "body": unit.body,
        "diagnostics": diagnostics,
    });
    let (body, _) = request::<StubBody>(backend, RequestKind::FixSnippet, context)?;
    Ok(SourceUnit {
        body,
        status: UnitStatus::Generated,
        debug_attempts: unit.debug_attempts + 1,
        ..unit.clone()
    })
}

/// Whole-workspace compile, then a launch check if it succeeded.
pub fn integration_build(
    units: &[SourceUnit],
    toolchain: &dyn Toolchain,
    ordinal: u64,
) -> Result<(CompilationLog, Option<LaunchOutcome>), CaError> {
    let diagnostics = toolchain.compile(&CompileScope::Integration, units)?;
    let log = CompilationLog::new(crate::model::INTEGRATION_SCOPE, diagnostics, ordinal);
    if !log.is_success() {
        return Ok((log, None));
    }
    let launch = toolchain.launch_check(units)?;
    Ok((log, Some(launch)))
}

/// Something to rectify: a test defect or a quality finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Issue {
    /// Defect id or `quality:<module>`.
    pub subject: String,
    pub module_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method_signature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rectification {
    /// Units whose body changed, with status reset to generated.
    pub changed: Vec<SourceUnit>,
    pub manifest: Option<ApiManifest>,
}

/// Requests fixes for `issues`. Only units of the issues' modules may
/// change; each issue's counter must still be under `budget`.
pub fn rectify(
    issues: &[Issue],
    units: &BTreeMap<String, SourceUnit>,
    plan: &CodePlan,
    manifest: &ApiManifest,
    counters: &BTreeMap<String, u32>,
    budget: u32,
    backend: &dyn GeneratorBackend,
) -> Result<Rectification, CaError> {
    if issues.is_empty() {
        return Ok(Rectification {
            changed: Vec::new(),
            manifest: None,
        });
    }
    for issue in issues {
        let used = counters.get(&issue.subject).copied().unwrap_or(0);
        if used >= budget {
            return Err(CaError::BudgetExhausted {
                subject: issue.subject.clone(),
                used,
                budget,
            });
        }
    }
    let closure: BTreeSet<&str> = issues.iter().map(|i| i.module_id.as_str()).collect();
    let modules: Vec<Value> = closure
        .iter()
        .filter_map(|m| units.get(*m))
        .map(|u| json!({"module_id": u.module_id, "path": u.path, "body": u.body}))
        .collect();
    let context = json!({
        "plan_version": plan.version,
        "issues": issues,
        "modules": modules,
        "libraries": manifest.library_names(),
    });
    let (payload, _) = request::<RectificationPayload>(backend, RequestKind::Rectification, context)?;
    let mut changed = Vec::new();
    for patch in payload.units {
        if !closure.contains(patch.module_id.as_str()) {
            return Err(CaError::OutsideTraceClosure(patch.module_id));
        }
        let unit = units
            .get(&patch.module_id)
            .ok_or_else(|| CaError::UnknownModule(patch.module_id.clone()))?;
        if unit.body != patch.body {
            changed.push(SourceUnit {
                body: patch.body,
                status: UnitStatus::Generated,
                ..unit.clone()
            });
        }
    }
    let manifest = payload.manifest.filter(|m| m != manifest);
    Ok(Rectification { changed, manifest })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityFinding {
    pub module_id: String,
    pub symbol: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityReport {
    pub findings: Vec<QualityFinding>,
    pub ordinal: u64,
}

/// Static pass over unit bodies: a reference to another module's symbol
/// that the arrangement rules make private, or package-private across
/// source directories.
pub fn quality_check(
    units: &BTreeMap<String, SourceUnit>,
    plan: &CodePlan,
    structure: &ProjectStructure,
) -> Vec<QualityFinding> {
    let mut findings = Vec::new();
    for unit in units.values() {
        for symbol in &unit.body.references {
            for rule in &plan.arrangement_rules.visibility {
                if rule.symbol != *symbol || rule.module_id == unit.module_id {
                    continue;
                }
                let owner_declares = units
                    .get(&rule.module_id)
                    .is_some_and(|u| u.body.declares.contains(symbol));
                if !owner_declares {
                    continue;
                }
                let violation = match rule.visibility {
                    Visibility::Private => true,
                    Visibility::Package => {
                        structure.source_dir(&rule.module_id) != structure.source_dir(&unit.module_id)
                    }
                    _ => false,
                };
                if violation {
                    findings.push(QualityFinding {
                        module_id: unit.module_id.clone(),
                        symbol: symbol.clone(),
                        detail: format!(
                            "{} uses {:?}-visible `{symbol}` of {}",
                            unit.module_id, rule.visibility, rule.module_id
                        )
                        .to_lowercase(),
                    });
                }
            }
        }
    }
    findings
}
