//! Pure graph algorithms over plans: ordering, validation, diffing and
//! conflict sets for incremental rebuilds.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Add, CodePlan, DepGraph};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("dependency cycle through {}", members.join(" -> "))]
pub struct CycleError {
    /// Members of one cycle, in edge order.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("plan version {new} does not follow {old}")]
pub struct VersionError {
    pub old: u32,
    pub new: u32,
}

/// All nodes mentioned by the graph, as keys or as edge targets.
pub fn nodes(graph: &DepGraph) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (src, targets) in graph {
        out.insert(src.clone());
        out.extend(targets.iter().cloned());
    }
    out
}

/// Kahn's algorithm, always taking the lexicographically smallest ready node.
pub fn topo_order(graph: &DepGraph) -> Result<Vec<String>, CycleError> {
    let all = nodes(graph);
    let mut indegree: BTreeMap<&str, usize> = all.iter().map(|n| (n.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (src, targets) in graph {
        for t in targets {
            if succ.entry(src.as_str()).or_default().insert(t.as_str()) {
                *indegree.get_mut(t.as_str()).expect("node collected") += 1;
            }
        }
    }

    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(n, _)| *n)
        .collect();
    let mut order = Vec::with_capacity(all.len());
    while let Some(node) = ready.pop_first() {
        order.push(node.to_owned());
        if let Some(next) = succ.get(node) {
            for t in next {
                let d = indegree.get_mut(t).expect("node collected");
                *d -= 1;
                if *d == 0 {
                    ready.insert(t);
                }
            }
        }
    }

    if order.len() == all.len() {
        return Ok(order);
    }
    let placed: BTreeSet<&str> = order.iter().map(String::as_str).collect();
    Err(CycleError {
        members: find_cycle(&succ, &placed),
    })
}

/// Every unplaced node has an unplaced predecessor, so walking predecessors
/// from any of them must revisit a node.
fn find_cycle(succ: &BTreeMap<&str, BTreeSet<&str>>, placed: &BTreeSet<&str>) -> Vec<String> {
    let mut pred: BTreeMap<&str, &str> = BTreeMap::new();
    for (src, targets) in succ {
        if placed.contains(src) {
            continue;
        }
        for t in targets {
            if !placed.contains(t) {
                pred.entry(t).or_insert(src);
            }
        }
    }
    let Some(start) = pred.keys().next().copied() else {
        return Vec::new();
    };
    let mut seen: Vec<&str> = Vec::new();
    let mut cur = start;
    while !seen.contains(&cur) {
        seen.push(cur);
        cur = pred[cur];
    }
    let from = seen.iter().position(|n| *n == cur).expect("cycle closes on a seen node");
    let mut cycle: Vec<String> = seen[from..].iter().map(|s| s.to_string()).collect();
    // collected backwards along predecessor links
    cycle.reverse();
    cycle
}

// ---------------------------------------------------------------------------
// Plan validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", content = "detail", rename_all = "kebab-case")]
pub enum PlanViolation {
    ZeroVersion,
    Cycle(Vec<String>),
    UnplannedModule(String),
    DuplicateStep(String),
    UnknownModule(String),
    /// A graph node with no step, so the step order cannot order it.
    UnorderedNode(String),
    OrderViolation { before: String, after: String },
    MultiplyPlaced(String),
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ZeroVersion => write!(f, "version must be at least 1"),
            Self::Cycle(m) => write!(f, "cycle: {}", m.join(" -> ")),
            Self::UnplannedModule(m) => write!(f, "unplanned module: {m}"),
            Self::DuplicateStep(m) => write!(f, "duplicate step for module: {m}"),
            Self::UnknownModule(m) => write!(f, "step for module not in the ADD: {m}"),
            Self::UnorderedNode(m) => write!(f, "graph node without a step: {m}"),
            Self::OrderViolation { before, after } => {
                write!(f, "step order places {after} before its dependency {before}")
            }
            Self::MultiplyPlaced(m) => write!(f, "module placed in several packages: {m}"),
        }
    }
}

/// Checks the plan invariants against the ADD. Violations are returned,
/// never raised.
pub fn validate_plan(plan: &CodePlan, add: &Add) -> Result<(), Vec<PlanViolation>> {
    let mut violations = Vec::new();
    if plan.version == 0 {
        violations.push(PlanViolation::ZeroVersion);
    }
    if let Err(cycle) = topo_order(&plan.dep_graph) {
        violations.push(PlanViolation::Cycle(cycle.members));
    }

    let mut step_count: BTreeMap<&str, usize> = BTreeMap::new();
    for step in &plan.steps {
        *step_count.entry(step.module_id.as_str()).or_default() += 1;
    }
    let declared: BTreeSet<&str> = add.elements.iter().map(|e| e.module_id.as_str()).collect();
    for m in &declared {
        match step_count.get(m) {
            None => violations.push(PlanViolation::UnplannedModule(m.to_string())),
            Some(n) if *n > 1 => violations.push(PlanViolation::DuplicateStep(m.to_string())),
            _ => {}
        }
    }
    for m in step_count.keys() {
        if !declared.contains(m) {
            violations.push(PlanViolation::UnknownModule(m.to_string()));
        }
    }

    let position: BTreeMap<&str, usize> = plan
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.module_id.as_str(), i))
        .collect();
    for node in nodes(&plan.dep_graph) {
        if !position.contains_key(node.as_str()) {
            violations.push(PlanViolation::UnorderedNode(node));
        }
    }
    for (src, targets) in &plan.dep_graph {
        for t in targets {
            if let (Some(a), Some(b)) = (position.get(src.as_str()), position.get(t.as_str())) {
                if a >= b {
                    violations.push(PlanViolation::OrderViolation {
                        before: src.clone(),
                        after: t.clone(),
                    });
                }
            }
        }
    }

    let mut placed: BTreeMap<String, usize> = BTreeMap::new();
    for (m, _) in plan.packages.placements() {
        *placed.entry(m).or_default() += 1;
    }
    for (m, n) in placed {
        if n > 1 {
            violations.push(PlanViolation::MultiplyPlaced(m));
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

// ---------------------------------------------------------------------------
// Plan diff and conflict sets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Added,
    Removed,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContractChange {
    pub module_id: String,
    pub signature: String,
    pub change: ChangeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeChange {
    pub from: String,
    pub to: String,
    pub change: ChangeKind,
}

/// Field-by-field difference between two consecutive plan versions.
/// Adjacency lists are compared as edge sets.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlanDiff {
    pub contracts: Vec<ContractChange>,
    pub deps: Vec<EdgeChange>,
    pub modules_added: Vec<String>,
    pub modules_removed: Vec<String>,
    pub packages_changed: bool,
    pub rules_changed: bool,
    pub ambiguities_changed: bool,
    pub rationale_changed: Vec<String>,
    /// Modules whose contract list was permuted without other changes.
    pub contract_order_changed: Vec<String>,
    pub step_order_changed: bool,
}

impl PlanDiff {
    pub fn is_empty(&self) -> bool {
        !self.step_order_changed && self.is_empty_ignoring_order()
    }

    pub fn is_reorder_only(&self) -> bool {
        self.step_order_changed && self.is_empty_ignoring_order()
    }

    fn is_empty_ignoring_order(&self) -> bool {
        self.contracts.is_empty()
            && self.deps.is_empty()
            && self.modules_added.is_empty()
            && self.modules_removed.is_empty()
            && !self.packages_changed
            && !self.rules_changed
            && !self.ambiguities_changed
            && self.rationale_changed.is_empty()
            && self.contract_order_changed.is_empty()
    }

    /// Modules whose contracts changed, plus newly added modules.
    pub fn changed_modules(&self) -> BTreeSet<String> {
        self.contracts
            .iter()
            .map(|c| c.module_id.clone())
            .chain(self.modules_added.iter().cloned())
            .collect()
    }

    pub fn changed_signatures(&self) -> BTreeSet<String> {
        self.contracts.iter().map(|c| c.signature.clone()).collect()
    }
}

fn edge_set(graph: &DepGraph) -> BTreeSet<(String, String)> {
    graph
        .iter()
        .flat_map(|(s, ts)| ts.iter().map(move |t| (s.clone(), t.clone())))
        .collect()
}

pub fn plan_diff(old: &CodePlan, new: &CodePlan) -> Result<PlanDiff, VersionError> {
    if new.version != old.version.wrapping_add(1) {
        return Err(VersionError {
            old: old.version,
            new: new.version,
        });
    }
    let mut diff = PlanDiff::default();

    let old_mods: Vec<&str> = old.steps.iter().map(|s| s.module_id.as_str()).collect();
    let new_mods: Vec<&str> = new.steps.iter().map(|s| s.module_id.as_str()).collect();
    let old_set: BTreeSet<&str> = old_mods.iter().copied().collect();
    let new_set: BTreeSet<&str> = new_mods.iter().copied().collect();
    diff.modules_added = new_set.difference(&old_set).map(|s| s.to_string()).collect();
    diff.modules_removed = old_set.difference(&new_set).map(|s| s.to_string()).collect();

    let common_old: Vec<&str> = old_mods.iter().copied().filter(|m| new_set.contains(m)).collect();
    let common_new: Vec<&str> = new_mods.iter().copied().filter(|m| old_set.contains(m)).collect();
    diff.step_order_changed = common_old != common_new;

    let module_union: BTreeSet<&str> = old_set.union(&new_set).copied().collect();
    for m in module_union {
        let before = old.step(m);
        let after = new.step(m);
        let empty = Vec::new();
        let old_contracts = before.map(|s| &s.contracts).unwrap_or(&empty);
        let new_contracts = after.map(|s| &s.contracts).unwrap_or(&empty);
        let old_by_sig: BTreeMap<&str, _> = old_contracts.iter().map(|c| (c.signature.as_str(), c)).collect();
        let new_by_sig: BTreeMap<&str, _> = new_contracts.iter().map(|c| (c.signature.as_str(), c)).collect();
        let mut contract_changed = false;
        for (sig, c) in &old_by_sig {
            match new_by_sig.get(sig) {
                None => {
                    contract_changed = true;
                    diff.contracts.push(ContractChange {
                        module_id: m.to_owned(),
                        signature: sig.to_string(),
                        change: ChangeKind::Removed,
                    });
                }
                Some(nc) if nc != c => {
                    contract_changed = true;
                    diff.contracts.push(ContractChange {
                        module_id: m.to_owned(),
                        signature: sig.to_string(),
                        change: ChangeKind::Modified,
                    });
                }
                _ => {}
            }
        }
        for sig in new_by_sig.keys() {
            if !old_by_sig.contains_key(sig) {
                contract_changed = true;
                diff.contracts.push(ContractChange {
                    module_id: m.to_owned(),
                    signature: sig.to_string(),
                    change: ChangeKind::Added,
                });
            }
        }
        if let (Some(b), Some(a)) = (before, after) {
            if b.rationale != a.rationale {
                diff.rationale_changed.push(m.to_owned());
            }
            if !contract_changed && b.contracts != a.contracts {
                diff.contract_order_changed.push(m.to_owned());
            }
        }
    }

    let old_edges = edge_set(&old.dep_graph);
    let new_edges = edge_set(&new.dep_graph);
    for (from, to) in old_edges.difference(&new_edges) {
        diff.deps.push(EdgeChange {
            from: from.clone(),
            to: to.clone(),
            change: ChangeKind::Removed,
        });
    }
    for (from, to) in new_edges.difference(&old_edges) {
        diff.deps.push(EdgeChange {
            from: from.clone(),
            to: to.clone(),
            change: ChangeKind::Added,
        });
    }
    diff.deps.sort();
    diff.contracts.sort();

    diff.packages_changed = old.packages != new.packages;
    diff.rules_changed = old.arrangement_rules != new.arrangement_rules;
    diff.ambiguities_changed = old.ambiguities != new.ambiguities;
    Ok(diff)
}

/// Modules with changed contracts plus everything that transitively depends
/// on them. Reorder-only diffs change no contracts and yield the empty set.
pub fn conflict_set(diff: &PlanDiff, graph: &DepGraph) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut queue: VecDeque<String> = diff.changed_modules().into_iter().collect();
    while let Some(m) = queue.pop_front() {
        if !out.insert(m.clone()) {
            continue;
        }
        if let Some(dependents) = graph.get(&m) {
            queue.extend(dependents.iter().cloned());
        }
    }
    out
}
