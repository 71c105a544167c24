//! Planning agent: turns the SRS and ADD into a validated code plan and
//! project structure, and revises the plan on compiler or launch feedback.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::{request, BackendError, GeneratorBackend, RequestKind};
use crate::graph::{plan_diff, topo_order, validate_plan, PlanViolation};
use crate::kb::{tokenize, Corpus, KnowledgeBase};
use crate::model::{
    Add, ArchElement, CodePlan, DirRole, DirectoryEntry, FeedbackEvent, FeedbackOrigin, PlanProposal,
    ProjectStructure, RequirementItem, SchemaError, Srs,
};

const BUILTIN_TYPES: &[&str] = &[
    "void", "int", "integer", "long", "short", "byte", "float", "double", "boolean", "bool", "char",
    "string", "str", "i8", "i16", "i32", "i64", "u8", "u16", "u32", "u64", "isize", "usize", "f32",
    "f64", "list", "map", "set", "optional", "array", "object",
];

/// How many knowledge documents a planning request cites.
const KNOWLEDGE_HITS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisResult {
    pub requirements: Vec<RequirementItem>,
    pub elements: Vec<ArchElement>,
    /// Requirement and technology constraints, deduplicated, in input order.
    pub constraints: Vec<String>,
    /// Each entry starts with a locator such as `add/<module>` or
    /// `srs/<requirement>`.
    pub ambiguities: Vec<String>,
    /// Knowledge documents consulted, by id.
    pub knowledge: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CopaError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("plan rejected: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    PlanValidation(Vec<PlanViolation>),
    #[error("revision for {subject} returned an unchanged plan")]
    NoChange { subject: String },
    #[error("plan revision needs compiler or launch feedback, got {0}")]
    WrongOrigin(FeedbackOrigin),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn type_tokens(ty: &str) -> impl Iterator<Item = &str> {
    ty.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
}

pub fn analyze_documents(srs: &Srs, add: &Add, kb: &KnowledgeBase) -> Result<AnalysisResult, CopaError> {
    srs.validate()?;
    add.validate()?;

    let mut constraints: Vec<String> = Vec::new();
    let mut push = |c: &String| {
        if !constraints.contains(c) {
            constraints.push(c.clone());
        }
    };
    srs.requirements.iter().flat_map(|r| &r.constraints).for_each(&mut push);
    add.elements.iter().flat_map(|e| &e.tech_constraints).for_each(&mut push);

    let modules: BTreeSet<&str> = add.elements.iter().map(|e| e.module_id.as_str()).collect();
    let declared_types: BTreeSet<String> = add
        .types
        .iter()
        .map(|t| t.to_lowercase())
        .chain(modules.iter().map(|m| m.to_lowercase()))
        .collect();
    let known = |ty: &str| {
        let lower = ty.to_lowercase();
        BUILTIN_TYPES.contains(&lower.as_str())
            || declared_types.contains(&lower)
            || !kb
                .query(Corpus::Coding, Some("API Library"), &BTreeSet::from([lower]), 1)
                .is_empty()
    };

    let mut ambiguities = Vec::new();
    for el in &add.elements {
        for dep in &el.depends_on {
            if !modules.contains(dep.as_str()) {
                ambiguities.push(format!("add/{}: undeclared dependency {dep}", el.module_id));
            }
        }
        for c in &el.contracts {
            let mut unknown: Vec<&str> = Vec::new();
            let named = c.params.iter().map(|p| p.semantic_type.as_str()).chain([c.returns.as_str()]);
            for t in named.flat_map(type_tokens) {
                if !known(t) && !unknown.contains(&t) {
                    unknown.push(t);
                }
            }
            for t in unknown {
                ambiguities.push(format!("add/{}/{}: unknown type {t}", el.module_id, c.signature));
            }
        }
    }
    for req in &srs.requirements {
        if !add.trace_links.iter().any(|l| l.requirement_id == req.id) {
            ambiguities.push(format!("srs/{}: requirement mapped to no module", req.id));
        }
    }
    for link in &add.trace_links {
        if srs.requirement(&link.requirement_id).is_none() {
            ambiguities.push(format!(
                "add/trace_links: unknown requirement {}",
                link.requirement_id
            ));
        }
        let resolves = add
            .element(&link.module_id)
            .is_some_and(|e| e.contracts.iter().any(|c| c.signature == link.method_signature));
        if !resolves {
            ambiguities.push(format!(
                "add/trace_links: {}.{} is not a declared contract",
                link.module_id, link.method_signature
            ));
        }
    }

    let keywords: BTreeSet<String> = constraints.iter().flat_map(|c| tokenize(c)).collect();
    let knowledge = kb
        .query(Corpus::Coding, None, &keywords, KNOWLEDGE_HITS)
        .into_iter()
        .map(|d| d.id)
        .collect();

    Ok(AnalysisResult {
        requirements: srs.requirements.clone(),
        elements: add.elements.clone(),
        constraints,
        ambiguities,
        knowledge,
    })
}

/// Normalizes the graph, sorts steps topologically and validates against
/// the ADD. A rejected proposal is an error, never patched.
fn finalize(proposal: PlanProposal, version: u32, add: &Add, extra_ambiguities: &[String]) -> Result<CodePlan, CopaError> {
    let mut plan = proposal.into_plan(version);
    plan.normalize_graph();
    for a in extra_ambiguities {
        if !plan.ambiguities.contains(a) {
            plan.ambiguities.push(a.clone());
        }
    }
    if let Ok(order) = topo_order(&plan.dep_graph) {
        plan.steps
            .sort_by_key(|s| order.iter().position(|m| *m == s.module_id).unwrap_or(usize::MAX));
    }
    validate_plan(&plan, add).map_err(CopaError::PlanValidation)?;
    Ok(plan)
}

pub fn generate_plan(
    analysis: &AnalysisResult,
    add: &Add,
    backend: &dyn GeneratorBackend,
) -> Result<CodePlan, CopaError> {
    let context = json!({
        "requirements": analysis.requirements,
        "elements": analysis.elements,
        "types": add.types,
        "constraints": analysis.constraints,
        "ambiguities": analysis.ambiguities,
        "knowledge": analysis.knowledge,
    });
    let (proposal, _) = request::<PlanProposal>(backend, RequestKind::PlanProposal, context)?;
    finalize(proposal, 1, add, &analysis.ambiguities)
}

/// Deterministic directory layout: one source directory per package node,
/// one per unplaced module, and a tests directory per module. Modules
/// nothing depends on are the entry points.
pub fn generate_structure(plan: &CodePlan) -> ProjectStructure {
    let mut directories = Vec::new();
    let mut placed = BTreeSet::new();
    plan.packages.walk(&mut Vec::new(), &mut |path, node| {
        directories.push(DirectoryEntry {
            path: format!("src/{}", path.join("/")),
            role: DirRole::Source,
            modules: node.modules.clone(),
        });
        placed.extend(node.modules.iter().cloned());
    });
    for step in &plan.steps {
        if !placed.contains(&step.module_id) {
            directories.push(DirectoryEntry {
                path: format!("src/{}", step.module_id),
                role: DirRole::Source,
                modules: vec![step.module_id.clone()],
            });
        }
    }
    for step in &plan.steps {
        directories.push(DirectoryEntry {
            path: format!("tests/{}", step.module_id),
            role: DirRole::Tests,
            modules: vec![step.module_id.clone()],
        });
    }
    let mut structure = ProjectStructure {
        directories,
        ..Default::default()
    };
    for step in &plan.steps {
        let is_sink = plan.dep_graph.get(&step.module_id).is_none_or(Vec::is_empty);
        if is_sink {
            if let Some(dir) = structure.source_dir(&step.module_id) {
                let dir = dir.to_owned();
                structure.entry_points.insert(step.module_id.clone(), dir);
            }
        }
    }
    structure
}

/// Produces plan version `plan.version + 1` from compiler or launch
/// feedback. The request carries the diagnostics plus the requirements and
/// ADD elements traced to the failing module.
pub fn revise_plan(
    plan: &CodePlan,
    event: &FeedbackEvent,
    diagnostics: &[serde_json::Value],
    srs: &Srs,
    add: &Add,
    backend: &dyn GeneratorBackend,
) -> Result<CodePlan, CopaError> {
    if !matches!(event.origin, FeedbackOrigin::Compiler | FeedbackOrigin::LaunchCheck) {
        return Err(CopaError::WrongOrigin(event.origin));
    }
    let traced: BTreeSet<&str> = add
        .trace_links
        .iter()
        .filter(|l| l.module_id == event.subject)
        .map(|l| l.requirement_id.as_str())
        .collect();
    let requirements: Vec<&RequirementItem> =
        srs.requirements.iter().filter(|r| traced.contains(r.id.as_str())).collect();
    let elements: Vec<&ArchElement> = add.elements.iter().filter(|e| e.module_id == event.subject).collect();
    let context = json!({
        "plan": plan,
        "origin": event.origin,
        "subject": event.subject,
        "diagnostics": diagnostics,
        "requirements": requirements,
        "elements": elements,
    });
    let (proposal, _) = request::<PlanProposal>(backend, RequestKind::PlanRevision, context)?;
    let revised = finalize(proposal, plan.version + 1, add, &[])?;
    let diff = plan_diff(plan, &revised).expect("version bumped by one");
    if diff.is_empty() || diff.is_reorder_only() {
        return Err(CopaError::NoChange {
            subject: event.subject.clone(),
        });
    }
    Ok(revised)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FixtureEntry, ScriptedBackend};
    use crate::kb::KnowledgeDoc;
    use crate::model::{
        CounterSnapshot, MethodContract, PackageNode, ParamSpec, PlanStep, RequirementKind, TraceLink, Visibility,
    };
    use std::collections::BTreeMap;

    fn contract(sig: &str, param_type: &str) -> MethodContract {
        MethodContract {
            signature: sig.into(),
            visibility: Visibility::Public,
            params: vec![ParamSpec {
                name: "x".into(),
                semantic_type: param_type.into(),
                numeric_range: None,
                invalid_classes: vec![],
            }],
            returns: "void".into(),
            exception_conditions: vec![],
            nondeterministic: false,
        }
    }

    fn element(id: &str, deps: &[&str], contracts: Vec<MethodContract>) -> ArchElement {
        ArchElement {
            module_id: id.into(),
            responsibilities: String::new(),
            contracts,
            patterns: vec![],
            tech_constraints: vec![],
            depends_on: deps.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn req(id: &str) -> RequirementItem {
        RequirementItem {
            id: id.into(),
            kind: RequirementKind::Functional,
            text: format!("text {id}"),
            constraints: vec![],
            source_ref: "srs".into(),
        }
    }

    fn link(r: &str, m: &str, sig: &str) -> TraceLink {
        TraceLink {
            requirement_id: r.into(),
            module_id: m.into(),
            method_signature: sig.into(),
        }
    }

    fn consistent() -> (Srs, Add) {
        let srs = Srs {
            project: "p".into(),
            requirements: vec![req("R1"), req("R2")],
        };
        let add = Add {
            project: "p".into(),
            elements: vec![
                element("model", &[], vec![contract("f(int x)", "int")]),
                element("logic", &["model"], vec![contract("g(int x)", "int")]),
                element("view", &["logic"], vec![]),
            ],
            types: vec![],
            trace_links: vec![link("R1", "model", "f(int x)"), link("R2", "logic", "g(int x)")],
        };
        (srs, add)
    }

    #[test]
    fn consistent_documents_have_no_ambiguities() {
        let (srs, add) = consistent();
        let a = analyze_documents(&srs, &add, &KnowledgeBase::new()).unwrap();
        assert_eq!(a.requirements.len(), 2);
        assert_eq!(a.elements.len(), 3);
        assert!(a.ambiguities.is_empty(), "{:?}", a.ambiguities);
    }

    #[test]
    fn undeclared_dependency_is_ambiguity() {
        let (srs, mut add) = consistent();
        add.elements[2].depends_on.push("render".into());
        let a = analyze_documents(&srs, &add, &KnowledgeBase::new()).unwrap();
        assert_eq!(a.ambiguities, ["add/view: undeclared dependency render"]);
    }

    #[test]
    fn library_types_are_known_through_the_kb() {
        let (srs, mut add) = consistent();
        add.elements[2].contracts.push(contract("render(GraphicsContext gc)", "GraphicsContext"));
        let kb = KnowledgeBase::new();
        let a = analyze_documents(&srs, &add, &kb).unwrap();
        assert_eq!(a.ambiguities.len(), 1);
        kb.ingest(KnowledgeDoc {
            id: "javafx".into(),
            corpus: Corpus::Coding,
            pillar: "API Library".into(),
            keywords: vec!["graphicscontext".into()],
            body: String::new(),
        })
        .unwrap();
        let a = analyze_documents(&srs, &add, &kb).unwrap();
        assert_eq!(a.ambiguities.len(), 0, "{:?}", a.ambiguities);
    }

    #[test]
    fn untraced_requirement_is_ambiguity() {
        let (mut srs, add) = consistent();
        srs.requirements.push(req("R3"));
        let a = analyze_documents(&srs, &add, &KnowledgeBase::new()).unwrap();
        assert_eq!(a.ambiguities, ["srs/R3: requirement mapped to no module"]);
    }

    fn proposal(edges: &[(&str, &str)]) -> PlanProposal {
        let mut dep_graph = BTreeMap::new();
        for (a, b) in edges {
            dep_graph.entry(a.to_string()).or_insert_with(Vec::new).push(b.to_string());
        }
        PlanProposal {
            steps: ["view", "logic", "model"]
                .iter()
                .map(|m| PlanStep {
                    module_id: m.to_string(),
                    rationale: String::new(),
                    contracts: vec![],
                })
                .collect(),
            dep_graph,
            packages: PackageNode {
                name: "app".into(),
                modules: vec![],
                children: ["model", "logic", "view"]
                    .iter()
                    .map(|m| PackageNode {
                        name: m.to_string(),
                        modules: vec![m.to_string()],
                        children: vec![],
                    })
                    .collect(),
            },
            arrangement_rules: Default::default(),
            ambiguities: vec![],
        }
    }

    fn backend_for(kind: RequestKind, analysis: &AnalysisResult, add: &Add, p: &PlanProposal) -> ScriptedBackend {
        let ctx = json!({
            "requirements": analysis.requirements,
            "elements": analysis.elements,
            "types": add.types,
            "constraints": analysis.constraints,
            "ambiguities": analysis.ambiguities,
            "knowledge": analysis.knowledge,
        });
        ScriptedBackend::new([FixtureEntry::for_request(kind, ctx, serde_json::to_value(p).unwrap())]).unwrap()
    }

    #[test]
    fn valid_proposal_gets_version_one_and_sorted_steps() {
        let (srs, add) = consistent();
        let a = analyze_documents(&srs, &add, &KnowledgeBase::new()).unwrap();
        let p = proposal(&[("model", "logic"), ("logic", "view")]);
        let plan = generate_plan(&a, &add, &backend_for(RequestKind::PlanProposal, &a, &add, &p)).unwrap();
        assert_eq!(plan.version, 1);
        assert_eq!(plan.module_ids(), ["model", "logic", "view"]);
    }

    #[test]
    fn cyclic_proposal_rejected() {
        let (srs, add) = consistent();
        let a = analyze_documents(&srs, &add, &KnowledgeBase::new()).unwrap();
        let p = proposal(&[("model", "logic"), ("logic", "model")]);
        let err = generate_plan(&a, &add, &backend_for(RequestKind::PlanProposal, &a, &add, &p)).unwrap_err();
        match err {
            CopaError::PlanValidation(v) => assert!(v.iter().any(|x| matches!(x, PlanViolation::Cycle(_)))),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn structure_mirrors_packages() {
        let plan = proposal(&[("model", "logic"), ("logic", "view")]).into_plan(1);
        let s = generate_structure(&plan);
        let sources: Vec<&str> = s
            .directories
            .iter()
            .filter(|d| d.role == DirRole::Source)
            .map(|d| d.path.as_str())
            .collect();
        assert_eq!(sources, ["src/app", "src/app/model", "src/app/logic", "src/app/view"]);
        assert_eq!(s.entry_points, BTreeMap::from([("view".into(), "src/app/view".into())]));
        let mut again = plan.clone();
        again.version = 7;
        assert_eq!(generate_structure(&again), s);
    }

    #[test]
    fn single_module_structure() {
        let mut plan = proposal(&[]).into_plan(1);
        plan.steps.truncate(1);
        plan.steps[0].module_id = "app".into();
        plan.packages = PackageNode {
            name: "app".into(),
            modules: vec!["app".into()],
            children: vec![],
        };
        plan.normalize_graph();
        let s = generate_structure(&plan);
        let paths: Vec<&str> = s.directories.iter().map(|d| d.path.as_str()).collect();
        assert_eq!(paths, ["src/app", "tests/app"]);
        assert_eq!(s.entry_points["app"], "src/app");
    }

    #[test]
    fn identical_revision_is_no_change() {
        let (srs, add) = consistent();
        let mut plan = proposal(&[("model", "logic"), ("logic", "view")]).into_plan(1);
        plan.normalize_graph();
        plan.steps.reverse();
        let event = FeedbackEvent {
            origin: FeedbackOrigin::Compiler,
            payload_ref: "artifacts/compile-1.json".into(),
            subject: "logic".into(),
            counters: CounterSnapshot::default(),
        };
        let ctx = json!({
            "plan": plan,
            "origin": event.origin,
            "subject": "logic",
            "diagnostics": [],
            "requirements": [srs.requirements[1]],
            "elements": [add.elements[1]],
        });
        let same = plan.clone().into_proposal();
        let backend = ScriptedBackend::new([FixtureEntry::for_request(
            RequestKind::PlanRevision,
            ctx,
            serde_json::to_value(&same).unwrap(),
        )])
        .unwrap();
        let err = revise_plan(&plan, &event, &[], &srs, &add, &backend).unwrap_err();
        assert!(matches!(err, CopaError::NoChange { .. }), "{err}");
    }
}
