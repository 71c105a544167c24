//! Testing agent: test plan, deterministic case derivation from method
//! contracts, execution and defect reports, targeted regeneration.
//!
//! Per contract the derivation yields one positive case, one negative case
//! per invalid input class, a boundary pair (the limit, then one step
//! outside) per numeric limit value, one case per exception condition and a
//! property case for nondeterministic contracts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Number, Value};
use sha2::{Digest, Sha256};

use crate::kb::{tokenize, Corpus, KnowledgeBase};
use crate::model::{
    Add, CaseCategory, CaseResult, CaseStatus, CodePlan, Defect, DefectSeverity, MethodContract, ParamSpec,
    RequirementKind, SourceUnit, Srs, TestCase, TestReport, Trace, TraceRow, TraceabilityMatrix,
};
use crate::toolchain::{Toolchain, ToolchainError};

/// Invalid-class name that asks for out-of-range inputs, which needs a
/// numeric range to place them.
pub const OUT_OF_RANGE: &str = "out-of-range";

/// Samples drawn by a property case's generator.
pub const PROPERTY_SAMPLES: u32 = 100;

#[derive(Debug, thiserror::Error)]
pub enum TaError {
    #[error("requirement {0} maps to no planned method contract")]
    UnmappableRequirement(String),
    #[error("{signature}: parameter {param} has no numeric range but a boundary case is required")]
    Range { signature: String, param: String },
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodTarget {
    pub module_id: String,
    pub method_signature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestPlan {
    pub framework: String,
    pub mappings: BTreeMap<String, Vec<MethodTarget>>,
    /// One test target per module with mapped methods, e.g. `GameStateDataTest`.
    pub test_targets: Vec<String>,
    /// Requirement id → reason it has no tests.
    pub untestable: BTreeMap<String, String>,
    pub scope_notes: Vec<String>,
}

impl TestPlan {
    pub fn module_of(&self, requirement_id: &str, signature: &str) -> Option<&str> {
        self.mappings
            .get(requirement_id)?
            .iter()
            .find(|t| t.method_signature == signature)
            .map(|t| t.module_id.as_str())
    }
}

pub fn generate_test_plan(
    srs: &Srs,
    add: &Add,
    plan: &CodePlan,
    constraints: &[String],
    kb: &KnowledgeBase,
    strict: bool,
) -> Result<TestPlan, TaError> {
    let keywords: BTreeSet<String> = constraints.iter().flat_map(|c| tokenize(c)).collect();
    let framework = kb
        .query(Corpus::Testing, Some("Testing Tools"), &keywords, 1)
        .into_iter()
        .next()
        .map_or_else(|| "unspecified".to_owned(), |d| d.id);

    let mut mappings: BTreeMap<String, Vec<MethodTarget>> = BTreeMap::new();
    for link in &add.trace_links {
        if plan.contract(&link.module_id, &link.method_signature).is_none() {
            continue;
        }
        let targets = mappings.entry(link.requirement_id.clone()).or_default();
        let t = MethodTarget {
            module_id: link.module_id.clone(),
            method_signature: link.method_signature.clone(),
        };
        if !targets.contains(&t) {
            targets.push(t);
        }
    }
    let mut untestable = BTreeMap::new();
    for req in &srs.requirements {
        if mappings.contains_key(&req.id) {
            continue;
        }
        if strict && req.kind == RequirementKind::Functional {
            return Err(TaError::UnmappableRequirement(req.id.clone()));
        }
        untestable.insert(req.id.clone(), "no traced method contract in the plan".to_owned());
    }
    let modules: BTreeSet<&str> = mappings.values().flatten().map(|t| t.module_id.as_str()).collect();
    let test_targets = plan
        .steps
        .iter()
        .filter(|s| modules.contains(s.module_id.as_str()))
        .map(|s| format!("{}Test", s.module_id))
        .collect();
    Ok(TestPlan {
        framework,
        mappings,
        test_targets,
        untestable,
        scope_notes: vec![
            "cases run against the generated units; dependency mocking is not implemented".to_owned(),
        ],
    })
}

fn int_value(v: i64) -> Value {
    Value::Number(v.into())
}

fn float_value(v: f64) -> Value {
    Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn nominal(p: &ParamSpec) -> Value {
    match &p.numeric_range {
        Some(r) if p.is_integral() => {
            let (lo, hi) = r.int_bounds().expect("validated integral bounds");
            // i128 so the sum cannot overflow
            int_value(((lo as i128 + hi as i128).div_euclid(2)) as i64)
        }
        Some(r) => float_value(r.lo() + (r.hi() - r.lo()) / 2.0),
        None => Value::String(format!("<nominal {}>", p.semantic_type)),
    }
}

/// Limit values of a numeric parameter with their just-outside neighbours.
fn limits(p: &ParamSpec) -> Vec<(Value, Value)> {
    let Some(r) = &p.numeric_range else {
        return Vec::new();
    };
    if p.is_integral() {
        let (lo, hi) = r.int_bounds().expect("validated integral bounds");
        let mut out = vec![(int_value(lo), int_value(lo.saturating_sub(1)))];
        if hi != lo {
            out.push((int_value(hi), int_value(hi.saturating_add(1))));
        }
        out
    } else {
        let (lo, hi) = (r.lo(), r.hi());
        let width = hi - lo;
        let below = {
            let v = lo - width * 1e-6;
            if v < lo { v } else { lo.next_down() }
        };
        let above = {
            let v = hi + width * 1e-6;
            if v > hi { v } else { hi.next_up() }
        };
        let mut out = vec![(float_value(lo), float_value(below))];
        if hi != lo {
            out.push((float_value(hi), float_value(above)));
        }
        out
    }
}

/// Number of cases [`derive_test_cases`] yields for `contract`.
pub fn expected_case_count(contract: &MethodContract) -> usize {
    let invalid: usize = contract.params.iter().map(|p| p.invalid_classes.len()).sum();
    let limit_values: usize = contract.params.iter().map(|p| limits(p).len()).sum();
    1 + invalid + 2 * limit_values + contract.exception_conditions.len() + usize::from(contract.nondeterministic)
}

fn seed_for(signature: &str) -> u64 {
    let digest = Sha256::digest(signature.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn derive_test_cases(contract: &MethodContract, module_id: &str, trace: &Trace) -> Result<Vec<TestCase>, TaError> {
    for p in &contract.params {
        if p.numeric_range.is_none() && p.invalid_classes.iter().any(|c| c == OUT_OF_RANGE) {
            return Err(TaError::Range {
                signature: contract.signature.clone(),
                param: p.name.clone(),
            });
        }
    }
    let base: BTreeMap<String, Value> = contract.params.iter().map(|p| (p.name.clone(), nominal(p))).collect();
    let mut counters: BTreeMap<CaseCategory, usize> = BTreeMap::new();
    let mut cases = Vec::new();
    let mut push = |category: CaseCategory, input_values: BTreeMap<String, Value>, oracle: String| {
        let n = counters.entry(category).or_insert(0);
        *n += 1;
        cases.push(TestCase {
            id: format!(
                "{}/{}/{}/{}-{:02}",
                trace.requirement_id,
                module_id,
                contract.method_name(),
                category,
                n
            ),
            category,
            trace: trace.clone(),
            input_values,
            oracle,
            status: CaseStatus::Pending,
        });
    };
    let with = |name: &str, v: Value| {
        let mut inputs = base.clone();
        inputs.insert(name.to_owned(), v);
        inputs
    };

    push(
        CaseCategory::Positive,
        base.clone(),
        format!("returns {} without error", contract.returns),
    );
    for p in &contract.params {
        for class in &p.invalid_classes {
            push(
                CaseCategory::Negative,
                with(&p.name, Value::String(format!("<invalid {}: {class}>", p.name))),
                format!("rejects {} ({class})", p.name),
            );
        }
    }
    for p in &contract.params {
        for (limit, outside) in limits(p) {
            push(
                CaseCategory::Boundary,
                with(&p.name, limit.clone()),
                format!("accepts {} = {limit}", p.name),
            );
            push(
                CaseCategory::Boundary,
                with(&p.name, outside.clone()),
                format!("rejects {} = {outside} outside its range", p.name),
            );
        }
    }
    for cond in &contract.exception_conditions {
        push(
            CaseCategory::Exception,
            base.clone(),
            format!("raises an error on {cond}"),
        );
    }
    if contract.nondeterministic {
        let ranges: BTreeMap<&str, Value> = contract
            .params
            .iter()
            .filter_map(|p| p.numeric_range.as_ref().map(|r| (p.name.as_str(), json!([r.0, r.1]))))
            .collect();
        let generator = json!({
            "seed": seed_for(&contract.signature),
            "samples": PROPERTY_SAMPLES,
            "ranges": ranges,
        });
        push(
            CaseCategory::Property,
            BTreeMap::from([("$generator".to_owned(), generator)]),
            format!("contract of {} holds for every sample", contract.method_name()),
        );
    }
    Ok(cases)
}

/// Cases for every mapping of the test plan, in mapping order.
pub fn derive_all(test_plan: &TestPlan, plan: &CodePlan) -> Result<Vec<TestCase>, TaError> {
    let mut out = Vec::new();
    for (req, targets) in &test_plan.mappings {
        for t in targets {
            let Some(contract) = plan.contract(&t.module_id, &t.method_signature) else {
                continue;
            };
            let trace = Trace {
                requirement_id: req.clone(),
                method_signature: t.method_signature.clone(),
            };
            out.extend(derive_test_cases(contract, &t.module_id, &trace)?);
        }
    }
    Ok(out)
}

pub fn build_matrix(test_plan: &TestPlan, cases: &[TestCase]) -> TraceabilityMatrix {
    let rows = test_plan
        .mappings
        .iter()
        .flat_map(|(req, targets)| {
            targets.iter().map(move |t| TraceRow {
                requirement_id: req.clone(),
                module_id: t.module_id.clone(),
                method_signature: t.method_signature.clone(),
                test_case_ids: cases
                    .iter()
                    .filter(|c| c.trace.requirement_id == *req && c.trace.method_signature == t.method_signature)
                    .map(|c| c.id.clone())
                    .collect(),
            })
        })
        .collect();
    TraceabilityMatrix { rows }
}

/// Case ids whose trace row matches a changed requirement or signature.
pub fn regenerate_affected(
    matrix: &TraceabilityMatrix,
    changed_requirements: &BTreeSet<String>,
    changed_signatures: &BTreeSet<String>,
) -> BTreeSet<String> {
    matrix
        .rows
        .iter()
        .filter(|r| changed_requirements.contains(&r.requirement_id) || changed_signatures.contains(&r.method_signature))
        .flat_map(|r| r.test_case_ids.iter().cloned())
        .collect()
}

/// Re-derives the rows touched by `changed_signatures` against the new
/// plan. Replaced cases come back with status `regenerated`; returns the
/// new case list and the affected ids.
pub fn regenerate_for_plan(
    cases: &[TestCase],
    test_plan: &TestPlan,
    plan: &CodePlan,
    changed_signatures: &BTreeSet<String>,
) -> Result<(Vec<TestCase>, BTreeSet<String>), TaError> {
    let matrix = build_matrix(test_plan, cases);
    let affected = regenerate_affected(&matrix, &BTreeSet::new(), changed_signatures);
    let fresh = derive_all(test_plan, plan)?;
    let mut out = Vec::new();
    let mut touched = affected.clone();
    for case in fresh {
        if changed_signatures.contains(&case.trace.method_signature) {
            touched.insert(case.id.clone());
            out.push(TestCase {
                status: CaseStatus::Regenerated,
                ..case
            });
        } else if let Some(old) = cases.iter().find(|c| c.id == case.id) {
            out.push(old.clone());
        } else {
            out.push(case);
        }
    }
    Ok((out, touched))
}

pub fn severity_for(category: CaseCategory) -> DefectSeverity {
    match category {
        CaseCategory::Exception | CaseCategory::Boundary => DefectSeverity::Blocker,
        CaseCategory::Negative | CaseCategory::Positive | CaseCategory::Property => DefectSeverity::Major,
    }
}

/// Runs `cases` and evaluates the results. Case statuses are updated in
/// place. A failure with the same signature and actual result as an
/// earlier defect of the same report is a minor duplicate.
pub fn execute_and_report(
    cases: &mut [TestCase],
    units: &[SourceUnit],
    plan: &CodePlan,
    test_plan: &TestPlan,
    toolchain: &dyn Toolchain,
    ordinal: u64,
) -> Result<TestReport, TaError> {
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    let raw = toolchain.run_tests(cases, units)?;
    let mut case_results = BTreeMap::new();
    let mut defects: Vec<Defect> = Vec::new();
    let mut exercised: BTreeSet<(String, String)> = BTreeSet::new();
    for case in cases.iter_mut() {
        let Some(result) = raw.get(&case.id) else {
            continue;
        };
        if let Some(m) = test_plan.module_of(&case.trace.requirement_id, &case.trace.method_signature) {
            exercised.insert((m.to_owned(), case.trace.method_signature.clone()));
        }
        if result.passed {
            case.status = CaseStatus::Passed;
            case_results.insert(case.id.clone(), CaseResult::Passed);
            continue;
        }
        case.status = CaseStatus::Failed;
        case_results.insert(case.id.clone(), CaseResult::Failed);
        let duplicate = defects
            .iter()
            .any(|d| d.trace.method_signature == case.trace.method_signature && d.actual == result.actual);
        defects.push(Defect {
            id: format!("DEF-{}", case.id),
            severity: if duplicate {
                DefectSeverity::Minor
            } else {
                severity_for(case.category)
            },
            description: format!("{} case failed for {}", case.category, case.trace.method_signature),
            test_input: case.input_values.clone(),
            expected: case.oracle.clone(),
            actual: result.actual.clone(),
            trace: case.trace.clone(),
        });
    }
    let planned: BTreeSet<(String, String)> = plan
        .contracts()
        .map(|(m, c)| (m.to_owned(), c.signature.clone()))
        .collect();
    let covered = exercised.intersection(&planned).count();
    let coverage = if planned.is_empty() {
        1.0
    } else {
        covered as f64 / planned.len() as f64
    };
    Ok(TestReport {
        coverage,
        case_results,
        defects,
        accepted_defects: Vec::new(),
        ordinal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NumericRange, Visibility};

    fn param(name: &str, ty: &str, range: Option<NumericRange>, invalid: &[&str]) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            semantic_type: ty.into(),
            numeric_range: range,
            invalid_classes: invalid.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn decrease_health() -> MethodContract {
        MethodContract {
            signature: "decreaseHealth(int tankId, int damage)".into(),
            visibility: Visibility::Public,
            params: vec![
                param("tankId", "int", None, &["unknown tank id"]),
                param("damage", "int", Some(NumericRange::new(0, 100)), &[]),
            ],
            returns: "void".into(),
            exception_conditions: vec!["damage exceeding remaining health".into()],
            nondeterministic: false,
        }
    }

    fn trace() -> Trace {
        Trace {
            requirement_id: "REQ-003".into(),
            method_signature: "decreaseHealth(int tankId, int damage)".into(),
        }
    }

    #[test]
    fn decrease_health_yields_seven_cases() {
        let c = decrease_health();
        let cases = derive_test_cases(&c, "GameStateData", &trace()).unwrap();
        assert_eq!(cases.len(), 7);
        assert_eq!(expected_case_count(&c), 7);
        let by = |cat| cases.iter().filter(|c| c.category == cat).count();
        assert_eq!(by(CaseCategory::Positive), 1);
        assert_eq!(by(CaseCategory::Negative), 1);
        assert_eq!(by(CaseCategory::Boundary), 4);
        assert_eq!(by(CaseCategory::Exception), 1);
        assert_eq!(cases[0].input_values["damage"], json!(50));
        assert_eq!(cases[0].id, "REQ-003/GameStateData/decreaseHealth/positive-01");
        let boundary: Vec<&Value> = cases
            .iter()
            .filter(|c| c.category == CaseCategory::Boundary)
            .map(|c| &c.input_values["damage"])
            .collect();
        assert_eq!(boundary, [&json!(0), &json!(-1), &json!(100), &json!(101)]);
    }

    #[test]
    fn parameterless_contract_has_one_positive_case() {
        let c = MethodContract {
            signature: "fire()".into(),
            params: vec![],
            exception_conditions: vec![],
            ..decrease_health()
        };
        let cases = derive_test_cases(&c, "Tank", &trace()).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].category, CaseCategory::Positive);
    }

    #[test]
    fn nondeterministic_contract_has_seeded_property_case() {
        let c = MethodContract {
            nondeterministic: true,
            ..decrease_health()
        };
        let cases = derive_test_cases(&c, "GameStateData", &trace()).unwrap();
        let prop = cases.iter().find(|c| c.category == CaseCategory::Property).unwrap();
        let g = &prop.input_values["$generator"];
        assert_eq!(g["seed"], json!(seed_for(&c.signature)));
        assert_eq!(g["ranges"]["damage"], json!([0, 100]));
    }

    #[test]
    fn negative_midpoint_floors() {
        let p = param("x", "int", Some(NumericRange::new(-3, 0)), &[]);
        assert_eq!(nominal(&p), json!(-2));
    }

    #[test]
    fn float_boundaries_step_outside() {
        let p = param("x", "double", Some(NumericRange::new(Number::from_f64(0.0).unwrap(), Number::from_f64(1.0).unwrap())), &[]);
        let l = limits(&p);
        assert_eq!(l[0].1.as_f64().unwrap(), -1e-6);
        assert!(l[1].1.as_f64().unwrap() > 1.0);
        let point = param("y", "double", Some(NumericRange::new(Number::from_f64(2.5).unwrap(), Number::from_f64(2.5).unwrap())), &[]);
        let l = limits(&point);
        assert_eq!(l.len(), 1);
        assert!(l[0].1.as_f64().unwrap() < 2.5);
    }

    #[test]
    fn out_of_range_without_range_is_error() {
        let c = MethodContract {
            params: vec![param("x", "int", None, &[OUT_OF_RANGE])],
            ..decrease_health()
        };
        assert!(matches!(
            derive_test_cases(&c, "m", &trace()),
            Err(TaError::Range { .. })
        ));
    }

    #[test]
    fn regeneration_selects_linked_rows() {
        let matrix = TraceabilityMatrix {
            rows: vec![
                TraceRow {
                    requirement_id: "R1".into(),
                    module_id: "m".into(),
                    method_signature: "f()".into(),
                    test_case_ids: vec!["a".into(), "b".into(), "c".into()],
                },
                TraceRow {
                    requirement_id: "R2".into(),
                    module_id: "m".into(),
                    method_signature: "f()".into(),
                    test_case_ids: vec!["d".into()],
                },
            ],
        };
        let none = regenerate_affected(&matrix, &BTreeSet::new(), &BTreeSet::new());
        assert!(none.is_empty());
        let r1 = regenerate_affected(&matrix, &BTreeSet::from(["R1".into()]), &BTreeSet::new());
        assert_eq!(r1, BTreeSet::from(["a".into(), "b".into(), "c".into()]));
        let sig = regenerate_affected(&matrix, &BTreeSet::from(["R1".into()]), &BTreeSet::from(["f()".into()]));
        assert_eq!(sig.len(), 4);
    }

    #[test]
    fn severity_mapping() {
        assert_eq!(severity_for(CaseCategory::Boundary), DefectSeverity::Blocker);
        assert_eq!(severity_for(CaseCategory::Exception), DefectSeverity::Blocker);
        assert_eq!(severity_for(CaseCategory::Negative), DefectSeverity::Major);
        assert_eq!(severity_for(CaseCategory::Property), DefectSeverity::Major);
    }
}
