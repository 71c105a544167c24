//! Random instance generators and brute-force oracles shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Number, Value};

use appforge_core::backends::{AttemptRange, FaultSchedule, FaultSpec, FixtureEntry, RequestKind};
use appforge_core::ca::{QualityFinding, QualityReport};
use appforge_core::copa::AnalysisResult;
use appforge_core::kb::{Corpus, KnowledgeDoc};
use appforge_core::model::*;
use appforge_core::orchestrator::{AuditItem, AuditStatus, Directive, EscalationReason, PipelineState, Step};
use appforge_core::ta::{MethodTarget, TestPlan};
use appforge_core::toolchain::{LaunchFailure, LaunchOutcome};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn golden() -> PathBuf {
    fixtures_dir().join("tank-battle/scenario.json")
}

pub fn escalating() -> PathBuf {
    fixtures_dir().join("tank-battle/scenario-escalating.json")
}

pub fn clean() -> PathBuf {
    fixtures_dir().join("counter/scenario-clean.json")
}

pub fn permanent() -> PathBuf {
    fixtures_dir().join("counter/scenario-permanent.json")
}

pub fn all_scenarios() -> Vec<PathBuf> {
    vec![golden(), escalating(), clean(), permanent()]
}

/// Relative path → bytes for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Graph oracles
// ---------------------------------------------------------------------------

pub fn node_name(i: usize) -> String {
    const NAMES: [&str; 10] = ["alpha", "beta", "delta", "echo", "gamma", "kilo", "lima", "omega", "sigma", "zeta"];
    NAMES[i].to_owned()
}

/// Random DAG on `n` nodes: edges only go forward in a shuffled order.
pub fn random_dag<R: Rng>(rng: &mut R, n: usize, density: f64) -> DepGraph {
    let mut order: Vec<String> = (0..n).map(node_name).collect();
    order.shuffle(rng);
    let mut g: DepGraph = order.iter().map(|m| (m.clone(), Vec::new())).collect();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                g.get_mut(&order[i]).unwrap().push(order[j].clone());
            }
        }
    }
    g
}

/// Random directed graph that may contain cycles.
pub fn random_digraph<R: Rng>(rng: &mut R, n: usize, density: f64) -> DepGraph {
    let mut g: DepGraph = (0..n).map(|i| (node_name(i), Vec::new())).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(density) {
                g.get_mut(&node_name(i)).unwrap().push(node_name(j));
            }
        }
    }
    g
}

fn edges(g: &DepGraph) -> Vec<(String, String)> {
    g.iter().flat_map(|(a, bs)| bs.iter().map(move |b| (a.clone(), b.clone()))).collect()
}

/// Every ordering of the nodes that respects all edges, by exhaustive
/// search over permutations (pruned only on already-violated prefixes).
pub fn all_topological_orders(g: &DepGraph) -> Vec<Vec<String>> {
    let nodes: Vec<String> = g.keys().cloned().collect();
    let es = edges(g);
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut used = vec![false; nodes.len()];
    fn go(
        nodes: &[String],
        es: &[(String, String)],
        used: &mut [bool],
        current: &mut Vec<String>,
        out: &mut Vec<Vec<String>>,
    ) {
        if current.len() == nodes.len() {
            out.push(current.clone());
            return;
        }
        for i in 0..nodes.len() {
            if used[i] {
                continue;
            }
            // placing nodes[i] now is wrong if some predecessor is still unplaced
            let blocked = es.iter().any(|(a, b)| *b == nodes[i] && !current.contains(a));
            if blocked {
                continue;
            }
            used[i] = true;
            current.push(nodes[i].clone());
            go(nodes, es, used, current, out);
            current.pop();
            used[i] = false;
        }
    }
    go(&nodes, &es, &mut used, &mut current, &mut out);
    out
}

pub fn respects_edges(g: &DepGraph, order: &[String]) -> bool {
    let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    order.len() == g.len() && edges(g).iter().all(|(a, b)| pos[a.as_str()] < pos[b.as_str()])
}

/// Nodes reachable from `starts` (inclusive) by transitive closure over an
/// adjacency matrix.
pub fn reachable(g: &DepGraph, starts: &BTreeSet<String>) -> BTreeSet<String> {
    let nodes: Vec<&String> = g.keys().collect();
    let n = nodes.len();
    let idx: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let mut m = vec![vec![false; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = true;
    }
    for (a, b) in edges(g) {
        m[idx[a.as_str()]][idx[b.as_str()]] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if m[i][k] && m[k][j] {
                    m[i][j] = true;
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    for s in starts {
        let i = idx[s.as_str()];
        for (j, node) in nodes.iter().enumerate() {
            if m[i][j] {
                out.insert((*node).clone());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Test-derivation oracle
// ---------------------------------------------------------------------------

/// Case count per category computed from the derivation rules directly.
pub fn expected_categories(c: &MethodContract) -> BTreeMap<CaseCategory, usize> {
    let mut out = BTreeMap::new();
    out.insert(CaseCategory::Positive, 1);
    let negative: usize = c.params.iter().map(|p| p.invalid_classes.len()).sum();
    let boundary: usize = c
        .params
        .iter()
        .map(|p| match &p.numeric_range {
            None => 0,
            Some(r) if r.lo() == r.hi() => 2,
            Some(_) => 4,
        })
        .sum();
    out.insert(CaseCategory::Negative, negative);
    out.insert(CaseCategory::Boundary, boundary);
    out.insert(CaseCategory::Exception, c.exception_conditions.len());
    out.insert(CaseCategory::Property, usize::from(c.nondeterministic));
    out.retain(|_, n| *n > 0);
    out
}

pub fn random_contract<R: Rng>(rng: &mut R) -> MethodContract {
    let nparams = rng.random_range(0..5);
    let params: Vec<ParamSpec> = (0..nparams)
        .map(|i| {
            let integral = rng.random_bool(0.6);
            let numeric_range = if rng.random_bool(0.6) {
                Some(if integral {
                    let lo = rng.random_range(-1000i64..1000);
                    let hi = if rng.random_bool(0.1) { lo } else { lo + rng.random_range(1..500) };
                    NumericRange::new(lo, hi)
                } else {
                    let lo = rng.random_range(-1.0e3..1.0e3);
                    let hi = if rng.random_bool(0.1) { lo } else { lo + rng.random_range(0.001..100.0) };
                    NumericRange(Number::from_f64(lo).unwrap(), Number::from_f64(hi).unwrap())
                })
            } else {
                None
            };
            let mut invalid_classes: Vec<String> =
                (0..rng.random_range(0..3)).map(|k| format!("invalid class {k}")).collect();
            if numeric_range.is_some() && rng.random_bool(0.3) {
                invalid_classes.push("out-of-range".into());
            }
            ParamSpec {
                name: format!("p{i}"),
                semantic_type: if integral { "int" } else { "double" }.into(),
                numeric_range,
                invalid_classes,
            }
        })
        .collect();
    let sig_params: Vec<String> = params.iter().map(|p| format!("{} {}", p.semantic_type, p.name)).collect();
    MethodContract {
        signature: format!("op{}({})", rng.random_range(0..100), sig_params.join(", ")),
        visibility: Visibility::Public,
        params,
        returns: "int".into(),
        exception_conditions: (0..rng.random_range(0..3)).map(|k| format!("failure {k}")).collect(),
        nondeterministic: rng.random_bool(0.3),
    }
}

// ---------------------------------------------------------------------------
// Artifact generators
// ---------------------------------------------------------------------------

const TEXT_POOL: &[&str] = &["a", "Z", "9", " ", "_", "-", "/", "\"", "\\", "\n", "\t", "é", "ß", "😀", "{", "}", ":", ","];

pub fn ident<R: Rng>(rng: &mut R) -> String {
    const HEAD: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    const TAIL: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789_";
    let mut s = String::new();
    s.push(HEAD[rng.random_range(0..HEAD.len())] as char);
    for _ in 0..rng.random_range(0..8) {
        s.push(TAIL[rng.random_range(0..TAIL.len())] as char);
    }
    s
}

pub fn text<R: Rng>(rng: &mut R) -> String {
    (0..rng.random_range(0..12)).map(|_| TEXT_POOL[rng.random_range(0..TEXT_POOL.len())]).collect()
}

pub fn float<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1.0..1.0),
        1 => rng.random_range(-1e12..1e12),
        2 => f64::from(rng.random_range(-1000..1000)),
        _ => loop {
            let f = f64::from_bits(rng.random());
            if f.is_finite() {
                break f;
            }
        },
    }
}

pub fn value<R: Rng>(rng: &mut R, depth: u32) -> Value {
    let pick = if depth == 0 { rng.random_range(0..5) } else { rng.random_range(0..7) };
    match pick {
        0 => Value::Null,
        1 => Value::Bool(rng.random()),
        2 => json!(rng.random::<i64>()),
        3 => Number::from_f64(float(rng)).map_or(Value::Null, Value::Number),
        4 => Value::String(text(rng)),
        5 => Value::Array((0..rng.random_range(0..4)).map(|_| value(rng, depth - 1)).collect()),
        _ => Value::Object((0..rng.random_range(0..4)).map(|_| (ident(rng), value(rng, depth - 1))).collect()),
    }
}

fn vec_of<R: Rng, T>(rng: &mut R, max: usize, mut f: impl FnMut(&mut R) -> T) -> Vec<T> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| f(rng)).collect()
}

fn opt<R: Rng, T>(rng: &mut R, f: impl FnOnce(&mut R) -> T) -> Option<T> {
    if rng.random() {
        Some(f(rng))
    } else {
        None
    }
}

fn choose<R: Rng, T: Copy>(rng: &mut R, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn visibility<R: Rng>(rng: &mut R) -> Visibility {
    choose(rng, &[Visibility::Public, Visibility::Protected, Visibility::Package, Visibility::Private])
}

fn contract<R: Rng>(rng: &mut R) -> MethodContract {
    let mut c = random_contract(rng);
    c.visibility = visibility(rng);
    c.returns = text(rng);
    c
}

fn requirement<R: Rng>(rng: &mut R) -> RequirementItem {
    RequirementItem {
        id: ident(rng),
        kind: choose(
            rng,
            &[RequirementKind::Functional, RequirementKind::UserStory, RequirementKind::AcceptanceCriterion],
        ),
        text: text(rng),
        constraints: vec_of(rng, 3, text),
        source_ref: text(rng),
    }
}

fn element<R: Rng>(rng: &mut R) -> ArchElement {
    ArchElement {
        module_id: ident(rng),
        responsibilities: text(rng),
        contracts: vec_of(rng, 3, contract),
        patterns: vec_of(rng, 2, text),
        tech_constraints: vec_of(rng, 2, text),
        depends_on: vec_of(rng, 3, ident),
    }
}

fn trace<R: Rng>(rng: &mut R) -> Trace {
    Trace {
        requirement_id: ident(rng),
        method_signature: text(rng),
    }
}

fn inputs<R: Rng>(rng: &mut R) -> BTreeMap<String, Value> {
    (0..rng.random_range(0..4)).map(|_| (ident(rng), value(rng, 2))).collect()
}

fn package<R: Rng>(rng: &mut R, depth: u32) -> PackageNode {
    PackageNode {
        name: ident(rng),
        modules: vec_of(rng, 3, ident),
        children: if depth == 0 {
            Vec::new()
        } else {
            vec_of(rng, 2, |r| package(r, depth - 1))
        },
    }
}

fn marker<R: Rng>(rng: &mut R) -> DefectMarker {
    DefectMarker {
        kind: choose(rng, &[MarkerKind::Compile, MarkerKind::Init, MarkerKind::Logic]),
        detail: text(rng),
        target_signature: opt(rng, text),
    }
}

fn body<R: Rng>(rng: &mut R) -> StubBody {
    StubBody {
        declares: vec_of(rng, 3, ident),
        references: vec_of(rng, 3, ident),
        defect_markers: vec_of(rng, 2, marker),
    }
}

fn diagnostic<R: Rng>(rng: &mut R) -> Diagnostic {
    Diagnostic {
        severity: choose(rng, &[Severity::Error, Severity::Warning]),
        error_type: ident(rng),
        location: Location {
            path: text(rng),
            line: rng.random(),
        },
        message: text(rng),
        suggested_fix: opt(rng, text),
    }
}

fn defect<R: Rng>(rng: &mut R) -> Defect {
    Defect {
        id: ident(rng),
        severity: choose(rng, &[DefectSeverity::Blocker, DefectSeverity::Major, DefectSeverity::Minor]),
        description: text(rng),
        test_input: inputs(rng),
        expected: text(rng),
        actual: text(rng),
        trace: trace(rng),
    }
}

fn step<R: Rng>(rng: &mut R) -> Step {
    match rng.random_range(0..6) {
        0 => Step::Plan,
        1 => Step::Compile { module: ident(rng) },
        2 => Step::SelfDebug {
            module: ident(rng),
            event: text(rng),
        },
        3 => Step::Rebuild {
            event: text(rng),
            from_version: rng.random(),
        },
        4 => Step::Rectify {
            events: vec_of(rng, 3, text),
        },
        _ => Step::Test,
    }
}

pub fn pipeline_state<R: Rng>(rng: &mut R) -> PipelineState {
    match rng.random_range(0..6) {
        0 => PipelineState::Planning,
        1 => PipelineState::Generating { module: ident(rng) },
        2 => PipelineState::SelfDebugging { module: ident(rng) },
        3 => PipelineState::Escalated { reason: text(rng) },
        4 => PipelineState::IntegrationCheck,
        _ => PipelineState::Done,
    }
}

/// Canonical form must be a fixed point of parse∘serialize, and parsing must
/// reproduce the value.
pub fn check_round_trip<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(x: &T) -> Result<(), String> {
    let text = to_canonical_json(x);
    let back: T = parse_json(&text).map_err(|e| format!("{e} while parsing {text}"))?;
    if &back != x {
        return Err(format!("value changed across round trip: {x:?} vs {back:?}"));
    }
    let again = to_canonical_json(&back);
    if again != text {
        return Err(format!("canonical form not stable:\n{text}\n{again}"));
    }
    Ok(())
}

/// One random instance of every persisted artifact type, each round-tripped.
/// Returns the number of instances checked.
pub fn round_trip_all<R: Rng>(rng: &mut R) -> Result<usize, String> {
    let mut n = 0;
    let mut check = |name: &str, r: Result<(), String>| {
        n += 1;
        r.map_err(|e| format!("{name}: {e}"))
    };
    check(
        "Srs",
        check_round_trip(&Srs {
            project: text(rng),
            requirements: vec_of(rng, 3, requirement),
        }),
    )?;
    check(
        "Add",
        check_round_trip(&Add {
            project: text(rng),
            elements: vec_of(rng, 3, element),
            types: vec_of(rng, 3, ident),
            trace_links: vec_of(rng, 3, |r| TraceLink {
                requirement_id: ident(r),
                module_id: ident(r),
                method_signature: text(r),
            }),
        }),
    )?;
    let plan = CodePlan {
        version: rng.random(),
        steps: vec_of(rng, 3, |r| PlanStep {
            module_id: ident(r),
            rationale: text(r),
            contracts: vec_of(r, 2, contract),
        }),
        dep_graph: (0..rng.random_range(0..4)).map(|_| (ident(rng), vec_of(rng, 3, ident))).collect(),
        packages: package(rng, 2),
        arrangement_rules: ArrangementRules {
            inheritance: vec_of(rng, 2, |r| InheritanceEdge {
                child: ident(r),
                parent: ident(r),
            }),
            visibility: vec_of(rng, 2, |r| VisibilityRule {
                module_id: ident(r),
                symbol: ident(r),
                visibility: visibility(r),
            }),
        },
        ambiguities: vec_of(rng, 2, text),
    };
    check("CodePlan", check_round_trip(&plan))?;
    check("PlanProposal", check_round_trip(&plan.clone().into_proposal()))?;
    check(
        "ProjectStructure",
        check_round_trip(&ProjectStructure {
            directories: vec_of(rng, 3, |r| DirectoryEntry {
                path: text(r),
                role: choose(r, &[DirRole::Source, DirRole::Tests, DirRole::Resources]),
                modules: vec_of(r, 2, ident),
            }),
            entry_points: (0..rng.random_range(0..3)).map(|_| (ident(rng), text(rng))).collect(),
            dep_config: (0..rng.random_range(0..3)).map(|_| (ident(rng), text(rng))).collect(),
        }),
    )?;
    check(
        "ApiManifest",
        check_round_trip(&ApiManifest {
            entries: vec_of(rng, 3, |r| ApiEntry {
                library_name: ident(r),
                version_constraint: text(r),
                elements_used: vec_of(r, 3, ident),
                purpose: text(r),
            }),
        }),
    )?;
    check(
        "SourceUnit",
        check_round_trip(&SourceUnit {
            path: text(rng),
            module_id: ident(rng),
            plan_version: rng.random(),
            body: body(rng),
            status: choose(rng, &[UnitStatus::Generated, UnitStatus::Compiled, UnitStatus::Failed]),
            debug_attempts: rng.random(),
        }),
    )?;
    check(
        "CompilationLog",
        check_round_trip(&CompilationLog::new(text(rng), vec_of(rng, 4, diagnostic), rng.random())),
    )?;
    let case = TestCase {
        id: text(rng),
        category: choose(rng, &CaseCategory::ALL),
        trace: trace(rng),
        input_values: inputs(rng),
        oracle: text(rng),
        status: choose(
            rng,
            &[CaseStatus::Pending, CaseStatus::Passed, CaseStatus::Failed, CaseStatus::Regenerated],
        ),
    };
    check("TestCase", check_round_trip(&case))?;
    check(
        "TestReport",
        check_round_trip(&TestReport {
            coverage: float(rng),
            case_results: (0..rng.random_range(0..4))
                .map(|_| (ident(rng), choose(rng, &[CaseResult::Passed, CaseResult::Failed])))
                .collect(),
            defects: vec_of(rng, 3, defect),
            accepted_defects: vec_of(rng, 2, ident),
            ordinal: rng.random(),
        }),
    )?;
    check(
        "FeedbackEvent",
        check_round_trip(&FeedbackEvent {
            origin: choose(
                rng,
                &[
                    FeedbackOrigin::Compiler,
                    FeedbackOrigin::LaunchCheck,
                    FeedbackOrigin::TestReport,
                    FeedbackOrigin::QualityCheck,
                ],
            ),
            payload_ref: text(rng),
            subject: text(rng),
            counters: CounterSnapshot {
                debug_attempts: rng.random(),
                plan_revisions: rng.random(),
                rectifications: rng.random(),
            },
        }),
    )?;
    check(
        "ImprovementRecord",
        check_round_trip(&ImprovementRecord {
            ordinal: rng.random(),
            trigger: text(rng),
            changed_units: vec_of(rng, 3, text),
            plan_version_before: rng.random(),
            plan_version_after: rng.random(),
        }),
    )?;
    check(
        "TraceabilityMatrix",
        check_round_trip(&TraceabilityMatrix {
            rows: vec_of(rng, 4, |r| TraceRow {
                requirement_id: ident(r),
                module_id: ident(r),
                method_signature: text(r),
                test_case_ids: vec_of(r, 3, text),
            }),
        }),
    )?;
    check(
        "TestPlan",
        check_round_trip(&TestPlan {
            framework: text(rng),
            mappings: (0..rng.random_range(0..3))
                .map(|_| {
                    (
                        ident(rng),
                        vec_of(rng, 2, |r| MethodTarget {
                            module_id: ident(r),
                            method_signature: text(r),
                        }),
                    )
                })
                .collect(),
            test_targets: vec_of(rng, 2, ident),
            untestable: (0..rng.random_range(0..3)).map(|_| (ident(rng), text(rng))).collect(),
            scope_notes: vec_of(rng, 2, text),
        }),
    )?;
    check(
        "AnalysisResult",
        check_round_trip(&AnalysisResult {
            requirements: vec_of(rng, 2, requirement),
            elements: vec_of(rng, 2, element),
            constraints: vec_of(rng, 2, text),
            ambiguities: vec_of(rng, 2, text),
            knowledge: vec_of(rng, 2, ident),
        }),
    )?;
    check(
        "LaunchOutcome",
        check_round_trip(&LaunchOutcome {
            ok: rng.random(),
            failures: vec_of(rng, 2, |r| LaunchFailure {
                module_id: opt(r, ident),
                path: opt(r, text),
                detail: text(r),
            }),
            ordinal: rng.random(),
        }),
    )?;
    check(
        "QualityReport",
        check_round_trip(&QualityReport {
            findings: vec_of(rng, 2, |r| QualityFinding {
                module_id: ident(r),
                symbol: ident(r),
                detail: text(r),
            }),
            ordinal: rng.random(),
        }),
    )?;
    check(
        "KnowledgeDoc",
        check_round_trip(&KnowledgeDoc {
            id: ident(rng),
            corpus: choose(rng, &[Corpus::SrsAdd, Corpus::Coding, Corpus::Testing]),
            pillar: text(rng),
            keywords: vec_of(rng, 3, ident),
            body: text(rng),
        }),
    )?;
    check(
        "FixtureEntry",
        check_round_trip(&FixtureEntry {
            note: opt(rng, text),
            kind: Some(choose(rng, &[RequestKind::PlanProposal, RequestKind::FixSnippet, RequestKind::Rectification])),
            // an explicit null context means "no context" on disk
            context: opt(rng, |r| value(r, 3)).filter(|v| !v.is_null()),
            fingerprint: opt(rng, ident),
            payload: value(rng, 3),
            advisory: opt(rng, text),
        }),
    )?;
    check(
        "FaultSchedule",
        check_round_trip(&FaultSchedule {
            faults: vec_of(rng, 3, |r| FaultSpec {
                module_id: ident(r),
                kind: choose(r, &[MarkerKind::Compile, MarkerKind::Init, MarkerKind::Logic]),
                detail: text(r),
                target_signature: opt(r, text),
                attempts: opt(r, |r| AttemptRange {
                    from: r.random(),
                    to: r.random(),
                }),
            }),
        }),
    )?;
    check(
        "AuditItem",
        check_round_trip(&AuditItem {
            id: ident(rng),
            run_id: ident(rng),
            subject: text(rng),
            event: opt(rng, text),
            reason: if rng.random() {
                EscalationReason::BudgetExhausted { budget: ident(rng) }
            } else {
                EscalationReason::Internal { message: text(rng) }
            },
            evidence: vec_of(rng, 3, text),
            status: choose(rng, &[AuditStatus::Open, AuditStatus::Resolved, AuditStatus::Closed]),
            resolution: match rng.random_range(0..4) {
                0 => None,
                1 => Some(Directive::Amend {
                    fixtures: text(rng),
                    note: opt(rng, text),
                }),
                2 => Some(Directive::Skip { note: opt(rng, text) }),
                _ => Some(Directive::Abort { note: opt(rng, text) }),
            },
            reentry: step(rng),
        }),
    )?;
    check("PipelineState", check_round_trip(&vec_of(rng, 4, pipeline_state)))?;
    Ok(n)
}
