use agentinfer_core::collab::{
    render_progress, run_collab, CollabConfig, CollabError, Role, ScriptedAdapter, Transition,
};
use proptest::prelude::*;

fn script(values: Vec<u8>) -> Vec<String> {
    values
        .into_iter()
        .map(|v| match v % 5 {
            0 => "not a block".to_string(),
            1 | 2 => render_progress("ok", true),
            _ => render_progress("stuck", false),
        })
        .collect()
}

proptest! {
    #[test]
    fn budgets_and_transitions_hold(
        k in 0usize..5,
        b in 1usize..5,
        large in proptest::collection::vec(any::<u8>(), 1..30),
        small in proptest::collection::vec(any::<u8>(), 1..30),
        large_final in proptest::option::of(1usize..30),
        small_final in proptest::option::of(1usize..30),
    ) {
        let cfg = CollabConfig { large_warmup_steps: k, large_steps_per_escalation: b, max_total_steps: 64 };
        let mut l = ScriptedAdapter::new(Role::Large).with_progress(script(large));
        if let Some(f) = large_final { l = l.final_on_call(f); }
        let mut s = ScriptedAdapter::new(Role::Small).with_progress(script(small));
        if let Some(f) = small_final { s = s.final_on_call(f); }
        let run = || run_collab("q", &mut l.clone(), &mut s.clone(), &cfg);
        let first = run();
        prop_assert_eq!(&first, &run());
        let trace = match first {
            Ok(o) => o.trace,
            Err(CollabError::Truncated { trace, .. }) => *trace,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(trace.events.len() <= 64);
        let warmup = trace.events.iter().take_while(|e| e.kind == agentinfer_core::collab::StepKind::Think).count();
        prop_assert!(warmup <= k);
        prop_assert!(trace.large_steps <= k + b * trace.escalations);
        prop_assert!(trace.large_steps_per_escalation().iter().all(|&n| n <= b));
        prop_assert_eq!(trace.large_steps + trace.small_steps, trace.events.len());
        for e in &trace.events {
            match e.transition {
                Some(Transition::Escalate) => prop_assert!(e.role == Role::Small && !e.progress),
                Some(Transition::DeEscalate) => prop_assert!(e.role == Role::Large && e.progress),
                Some(Transition::BudgetExhausted) => prop_assert!(e.role == Role::Large && !e.progress),
                _ => {}
            }
            if e.malformed {
                prop_assert!(!e.progress);
            }
        }
    }
}
