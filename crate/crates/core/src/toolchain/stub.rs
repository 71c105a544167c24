use std::collections::{BTreeMap, BTreeSet};

use super::{CompileScope, LaunchFailure, LaunchOutcome, RawResult, Toolchain, ToolchainError};
use crate::model::{Diagnostic, Location, MarkerKind, Severity, SourceUnit, TestCase};

/// Deterministic interpreter of structured unit bodies.
///
/// * compile: one error per compile marker and per reference not declared
///   within the scope;
/// * launch: fails while any init marker remains;
/// * tests: a case fails when a logic marker targets its method and names
///   its category in the detail.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubToolchain;

fn marker_error_type(detail: &str) -> String {
    match detail.split_once(':') {
        Some((head, _)) if !head.is_empty() && !head.contains(char::is_whitespace) => head.to_owned(),
        _ => "compile-defect".to_owned(),
    }
}

fn unit_diagnostics(unit: &SourceUnit, symbols: &BTreeSet<&str>) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let body = &unit.body;
    for (i, r) in body.references.iter().enumerate() {
        if !symbols.contains(r.as_str()) {
            out.push(Diagnostic {
                severity: Severity::Error,
                error_type: "unresolved-symbol".into(),
                location: Location {
                    path: unit.path.clone(),
                    line: (body.declares.len() + i + 1) as u32,
                },
                message: format!("cannot resolve symbol `{r}`"),
                suggested_fix: Some(format!("declare `{r}` or depend on a module that does")),
            });
        }
    }
    let first_marker_line = body.declares.len() + body.references.len() + 1;
    for (i, m) in body.defect_markers.iter().enumerate() {
        if m.kind == MarkerKind::Compile {
            out.push(Diagnostic {
                severity: Severity::Error,
                error_type: marker_error_type(&m.detail),
                location: Location {
                    path: unit.path.clone(),
                    line: (first_marker_line + i) as u32,
                },
                message: m.detail.clone(),
                suggested_fix: None,
            });
        }
    }
    out
}

fn all_declares(units: &[SourceUnit]) -> BTreeSet<&str> {
    units
        .iter()
        .flat_map(|u| u.body.declares.iter().map(String::as_str))
        .collect()
}

/// Whole-word, case-insensitive containment.
fn names_word(text: &str, word: &str) -> bool {
    text.split(|c: char| !c.is_alphanumeric())
        .any(|t| t.eq_ignore_ascii_case(word))
}

impl Toolchain for StubToolchain {
    fn compile(&self, scope: &CompileScope, units: &[SourceUnit]) -> Result<Vec<Diagnostic>, ToolchainError> {
        let symbols = all_declares(units);
        match scope {
            CompileScope::Unit(path) => {
                let unit = units
                    .iter()
                    .find(|u| &u.path == path)
                    .ok_or_else(|| ToolchainError::UnknownUnit(path.clone()))?;
                Ok(unit_diagnostics(unit, &symbols))
            }
            CompileScope::Integration => {
                let mut sorted: Vec<&SourceUnit> = units.iter().collect();
                sorted.sort_by(|a, b| a.path.cmp(&b.path));
                Ok(sorted.into_iter().flat_map(|u| unit_diagnostics(u, &symbols)).collect())
            }
        }
    }

    fn launch_check(&self, units: &[SourceUnit]) -> Result<LaunchOutcome, ToolchainError> {
        let mut sorted: Vec<&SourceUnit> = units.iter().collect();
        sorted.sort_by(|a, b| a.path.cmp(&b.path));
        let failures: Vec<LaunchFailure> = sorted
            .into_iter()
            .flat_map(|u| {
                u.body.markers(MarkerKind::Init).map(move |m| LaunchFailure {
                    module_id: Some(u.module_id.clone()),
                    path: Some(u.path.clone()),
                    detail: m.detail.clone(),
                })
            })
            .collect();
        Ok(LaunchOutcome {
            ok: failures.is_empty(),
            failures,
            ordinal: 0,
        })
    }

    fn run_tests(
        &self,
        cases: &[TestCase],
        units: &[SourceUnit],
    ) -> Result<BTreeMap<String, RawResult>, ToolchainError> {
        let markers: Vec<_> = units
            .iter()
            .flat_map(|u| u.body.markers(MarkerKind::Logic))
            .collect();
        Ok(cases
            .iter()
            .map(|case| {
                let hit = markers.iter().find(|m| {
                    m.target_signature.as_deref() == Some(case.trace.method_signature.as_str())
                        && names_word(&m.detail, case.category.as_str())
                });
                let result = match hit {
                    Some(m) => RawResult {
                        passed: false,
                        actual: m.detail.clone(),
                    },
                    None => RawResult {
                        passed: true,
                        actual: case.oracle.clone(),
                    },
                };
                (case.id.clone(), result)
            })
            .collect())
    }
}
