mod common;

use std::path::Path;

use proptest::prelude::*;

use appforge_core::model::{CounterSnapshot, FeedbackEvent, FeedbackOrigin};
use appforge_core::orchestrator::{
    self, check_trace, load_audit_queue, resolve_item, route_feedback, AuditStatus, Decision, DirectiveInput,
    OrchestratorError, PipelineState, RunOutcome,
};
use appforge_core::scenario::{self, sweep, ExpectedOutcome, Scenario, ScenarioError, SweepGrid};
use appforge_core::{Budgets, Workspace};

fn load(path: &Path) -> Scenario {
    Scenario::load(path).unwrap()
}

fn trace_of(root: &Path) -> Vec<PipelineState> {
    Workspace::open_read_only(root).unwrap().read_json(orchestrator::STATE_TRACE).unwrap()
}

#[test]
fn bundled_scenarios_meet_their_expectations() {
    for path in common::all_scenarios() {
        let s = load(&path);
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ws");
        let run = scenario::run_scenario_at(&s, None, &root).unwrap();
        assert!(run.verdict.pass, "{}: {:?}", s.name, run.verdict.mismatches);
        check_trace(&trace_of(&root)).unwrap_or_else(|e| panic!("{}: {e}", s.name));
    }
}

#[test]
fn improvement_records_are_ordered_and_point_at_events() {
    let s = load(&common::golden());
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    scenario::run_scenario_at(&s, None, &root).unwrap();
    let ws = Workspace::open_read_only(&root).unwrap();
    let log = ws.improvement_log().unwrap();
    assert_eq!(log.len(), 2);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.ordinal, i as u64 + 1);
        assert!(ws.exists(&r.trigger), "{}", r.trigger);
        assert!(!r.changed_units.is_empty());
        assert!(r.plan_version_before <= r.plan_version_after);
        let _: FeedbackEvent = ws.read_json(&r.trigger).unwrap();
    }
    assert_eq!((log[0].plan_version_before, log[0].plan_version_after), (1, 2));
}

#[test]
fn clean_run_raises_no_feedback() {
    let run = scenario::run_scenario(&load(&common::clean()), None).unwrap();
    assert_eq!(run.outcome, ExpectedOutcome::Done);
    assert!(run.metrics().feedback_events.values().all(|n| *n == 0));
    assert_eq!(run.summary.plan_version, 1);
}

#[test]
fn single_point_sweep_matches_direct_run() {
    let s = load(&common::permanent());
    let budgets = Budgets::new(2, 1, 3);
    let rows = sweep(&s, &SweepGrid::single(budgets), 0).unwrap();
    let run = scenario::run_scenario(&s, Some(budgets)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].outcome, "Escalated");
    assert_eq!(rows[0].compile_attempts, run.metrics().compile_attempts.values().sum::<u32>());
    assert_eq!(rows[0].plan_version, run.summary.plan_version);
}

#[test]
fn attempts_grow_with_self_debug_budget() {
    let s = load(&common::permanent());
    let grid = SweepGrid {
        self_debug: vec![0, 1, 2, 3],
        plan_revision: vec![1],
        rectification: vec![3],
        fault_rates: vec![None],
    };
    let rows = sweep(&s, &grid, 0).unwrap();
    let attempts: Vec<u32> = rows.iter().map(|r| r.max_unit_compile_attempts).collect();
    assert_eq!(attempts, vec![2, 4, 6, 8]);
}

#[test]
fn zero_fault_rate_finishes_cleanly() {
    let s = load(&common::permanent());
    let grid = SweepGrid {
        self_debug: vec![1],
        plan_revision: vec![1],
        rectification: vec![3],
        fault_rates: vec![Some(0.0)],
    };
    let rows = sweep(&s, &grid, 11).unwrap();
    assert_eq!(rows[0].outcome, "Done");
    assert_eq!(rows[0].feedback_events, 0);
    assert!(rows[0].faulted_modules.is_empty());
}

#[test]
fn resume_refuses_open_items() {
    let s = load(&common::escalating());
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    scenario::run_scenario_at(&s, None, &root).unwrap();
    let err = scenario::resume_at(&s, &root).unwrap_err();
    assert!(matches!(err, ScenarioError::Orchestrator(OrchestratorError::UnresolvedItem(_))), "{err}");
}

#[test]
fn amended_resume_reaches_done() {
    let s = load(&common::escalating());
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    let run = scenario::run_scenario_at(&s, None, &root).unwrap();
    let id = run.summary.audit_items[0].clone();
    let text = std::fs::read_to_string(common::fixtures_dir().join("tank-battle/amendments/fix-collision.json")).unwrap();
    {
        let ws = Workspace::open(&root).unwrap();
        let fixtures = appforge_core::model::parse_json(&text).unwrap();
        resolve_item(&ws, &id, DirectiveInput::Amend { fixtures, note: Some("fixed by hand".into()) }).unwrap();
        // an item can only be resolved once
        let again = resolve_item(&ws, &id, DirectiveInput::Abort { note: None });
        assert!(matches!(again, Err(OrchestratorError::InvalidDirective(_))));
    }
    assert!(matches!(scenario::resume_at(&s, &root).unwrap(), RunOutcome::Done(_)));
    let trace = trace_of(&root);
    check_trace(&trace).unwrap();
    assert!(trace.iter().any(|s| matches!(s, PipelineState::Escalated { .. })));
    assert_eq!(trace.last(), Some(&PipelineState::Done));
    let ws = Workspace::open_read_only(&root).unwrap();
    assert!(load_audit_queue(&ws).unwrap().items.iter().all(|i| i.status == AuditStatus::Closed));
}

#[test]
fn skip_is_only_for_test_defects() {
    let s = load(&common::escalating());
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    let run = scenario::run_scenario_at(&s, None, &root).unwrap();
    let ws = Workspace::open(&root).unwrap();
    let err = resolve_item(&ws, &run.summary.audit_items[0], DirectiveInput::Skip { note: None }).unwrap_err();
    assert!(matches!(err, OrchestratorError::InvalidDirective(_)));
}

#[test]
fn skipped_defects_are_accepted() {
    // no rectification budget: the boundary defects escalate
    let s = load(&common::golden());
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    let run = scenario::run_scenario_at(&s, Some(Budgets::new(3, 2, 0)), &root).unwrap();
    assert_eq!(run.outcome, ExpectedOutcome::Escalated);
    {
        let ws = Workspace::open(&root).unwrap();
        for id in &run.summary.audit_items {
            let item = resolve_item(&ws, id, DirectiveInput::Skip { note: Some("known issue".into()) }).unwrap();
            assert!(item.subject.starts_with("DEF-"), "{}", item.subject);
        }
    }
    match scenario::resume_at(&s, &root).unwrap() {
        RunOutcome::Done(report) => {
            assert!(!report.accepted_defects.is_empty());
            assert_eq!(report.open_defects().count(), 0);
            assert_eq!(report.defects.len(), report.accepted_defects.len());
        }
        RunOutcome::Escalated(items) => panic!("escalated again: {items:?}"),
    }
    check_trace(&trace_of(&root)).unwrap();
}

fn origin() -> impl Strategy<Value = FeedbackOrigin> {
    prop_oneof![
        Just(FeedbackOrigin::Compiler),
        Just(FeedbackOrigin::LaunchCheck),
        Just(FeedbackOrigin::TestReport),
        Just(FeedbackOrigin::QualityCheck),
    ]
}

proptest! {
    #[test]
    fn routing_follows_budget_ladder(o in origin(), d in 0u32..5, p in 0u32..5, r in 0u32..5, bd in 0u32..4, bp in 0u32..4, br in 0u32..4) {
        let event = FeedbackEvent {
            origin: o,
            payload_ref: "artifacts/x.json".into(),
            subject: "M".into(),
            counters: CounterSnapshot { debug_attempts: d, plan_revisions: p, rectifications: r },
        };
        let decision = route_feedback(&event, &Budgets::new(bd, bp, br));
        let want = match o {
            FeedbackOrigin::Compiler | FeedbackOrigin::LaunchCheck if d < bd => Decision::SelfDebug,
            FeedbackOrigin::Compiler | FeedbackOrigin::LaunchCheck if p < bp => Decision::PlanRevision,
            FeedbackOrigin::TestReport | FeedbackOrigin::QualityCheck if r < br => Decision::Rectify,
            _ => Decision::Escalate,
        };
        prop_assert_eq!(decision, want);
    }
}
