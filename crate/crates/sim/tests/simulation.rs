use std::collections::BTreeMap;

use agentinfer_core::specdec::TokenOracle;
use agentinfer_sim::config::ScenarioConfig;
use agentinfer_sim::oracle::MockOracle;
use agentinfer_sim::presets;
use agentinfer_sim::report::{MetricsReport, RequestKind};
use agentinfer_sim::scenarios::{
    compress_compare, lambda_trace, littles_law_ratio, sched_compare, run_scenario,
};
use proptest::prelude::*;

fn small_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.workload.sessions = 2;
    cfg.workload.tasks_per_session = 2;
    cfg.workload.loops_per_task = 2;
    cfg.workload.think_tokens = 64;
    cfg.workload.answer_tokens = 32;
    cfg.workload.short_prompt_tokens = [1000, 1500];
    cfg.workload.long_prompt_tokens = [10_000, 11_000];
    cfg
}

fn check_request_invariants(r: &MetricsReport) {
    for q in &r.requests {
        assert!(q.ttft >= 0.0 && q.ttft <= q.e2e + 1e-12, "request {}", q.request_id);
        assert!(q.hit_blocks * 16 <= q.prompt_tokens, "request {}", q.request_id);
        assert!(q.arrival + q.e2e <= r.summary.makespan + 1e-9);
        let steps = q.output_tokens.max(2) - 1;
        let tpot = (q.e2e - q.ttft) / steps as f64;
        assert!((q.tpot - tpot).abs() < 1e-9, "tpot of {}", q.request_id);
        assert!(q.forward_passes as usize <= q.output_tokens.max(1));
        assert!(q.accepted_spec_tokens <= q.proposed_spec_tokens);
    }
}

#[test]
fn identical_seeds_give_identical_reports() {
    let cfg = presets::load("default").unwrap();
    let a = run_scenario(&cfg, 11).unwrap();
    let b = run_scenario(&cfg, 11).unwrap();
    assert_eq!(a.csv_string(), b.csv_string());
    assert_eq!(a.to_json(), b.to_json());
    let c = run_scenario(&cfg, 12).unwrap();
    assert_ne!(a.csv_string(), c.csv_string());
}

#[test]
fn request_timings_are_consistent() {
    for name in ["default", "collab", "sched_compare", "sam_async"] {
        let r = run_scenario(&presets::load(name).unwrap(), 3).unwrap();
        assert!(!r.requests.is_empty(), "{name}");
        check_request_invariants(&r);
    }
}

#[test]
fn agent_steps_of_a_session_never_overlap() {
    let r = run_scenario(&presets::load("default").unwrap(), 5).unwrap();
    let mut by_session: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for q in r.requests.iter().filter(|q| q.kind != RequestKind::DocQa) {
        by_session.entry(q.session).or_default().push((q.arrival, q.arrival + q.e2e));
    }
    for spans in by_session.values_mut() {
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            assert!(w[1].0 >= w[0].1 - 1e-12, "{:?} then {:?}", w[0], w[1]);
        }
    }
}

#[test]
fn closed_loop_obeys_littles_law() {
    for name in ["default", "collab", "sched_compare", "composition"] {
        let cfg = presets::load(name).unwrap();
        for seed in 1..=3 {
            let r = run_scenario(&cfg, seed).unwrap();
            let ratio = littles_law_ratio(&r, cfg.workload.sessions);
            assert!((ratio - 1.0).abs() <= 0.15, "{name} seed {seed}: {ratio}");
        }
    }
}

#[test]
fn abundant_blocks_make_policies_agree_on_hits() {
    let mut cfg = presets::load("sched_compare").unwrap();
    cfg.pool.n = 200_000;
    for seed in 1..=3 {
        let rs = sched_compare(&cfg, seed).unwrap();
        let hits: Vec<f64> = rs.iter().map(|r| r.summary.hit_rate).collect();
        for h in &hits {
            assert!((h - hits[0]).abs() <= 0.01, "seed {seed}: {hits:?}");
        }
        assert!(rs.iter().all(|r| r.summary.evictions == 0));
    }
}

#[test]
fn price_shifts_admissions_toward_long_requests() {
    let mut cfg = presets::load("sched_compare").unwrap();
    cfg.workload.sessions = 8;
    for seed in 1..=3 {
        let r = run_scenario(&cfg, seed).unwrap();
        let trace = lambda_trace(&r, cfg.sched.lambda_max);
        assert!(!trace.samples.is_empty());
        assert!(trace.samples.iter().all(|s| (0.0..=cfg.sched.lambda_max).contains(&s.lambda)));
        assert!(trace.low_price.short > trace.low_price.long, "seed {seed}: {:?}", trace.low_price);
        assert!(trace.long_share_rises, "seed {seed}: {:?} {:?}", trace.low_price, trace.high_price);
    }
}

#[test]
fn compression_keeps_reasoning_and_applies_between_loops() {
    let cfg = presets::load("compress").unwrap();
    for seed in 1..=3 {
        let rs = compress_compare(&cfg, seed).unwrap();
        let (off, on) = (&rs[0].summary, &rs[1].summary);
        assert!(on.distill_applies > 0);
        assert!(on.reasoning_intact);
        assert_eq!(on.mid_loop_applies, 0);
        assert_eq!(on.distill_stalls, 0);
        assert!(on.peak_context_tokens < off.peak_context_tokens);
        assert_eq!(off.distill_applies, 0);
    }
}

#[test]
fn collab_step_counts_match_the_trace() {
    let cfg = presets::load("collab").unwrap();
    let warmup = cfg.collab.large_warmup_steps;
    let per_escalation = cfg.collab.large_steps_per_escalation;
    let r = run_scenario(&cfg, 2).unwrap();
    assert!(r.summary.escalations > 0);
    for t in &r.tasks {
        let steps = r
            .requests
            .iter()
            .filter(|q| q.session == t.session && q.task == t.task && q.kind != RequestKind::DocQa)
            .count();
        assert_eq!(steps, t.large_steps + t.small_steps);
        assert!(t.large_steps >= warmup);
        assert!(t.large_steps <= warmup + per_escalation * t.escalations);
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(toml::from_str::<ScenarioConfig>("[pool]\nN = 100\n").is_ok());
    assert!(toml::from_str::<ScenarioConfig>("[pool]\nsize = 100\n").is_err());
    assert!(toml::from_str::<ScenarioConfig>("bogus = 1\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn small_runs_hold_invariants(seed in 0u64..10_000, spec in any::<bool>(), collab in any::<bool>()) {
        let mut cfg = small_config();
        cfg.spec.enabled = spec;
        cfg.collab.enabled = collab;
        let r = run_scenario(&cfg, seed).unwrap();
        prop_assert_eq!(r.summary.completed_tasks, 4);
        check_request_invariants(&r);
        prop_assert_eq!(r.csv_string(), run_scenario(&cfg, seed).unwrap().csv_string());
    }

    #[test]
    fn oracle_is_a_pure_function_of_context(
        seed in any::<u64>(),
        context in proptest::collection::vec(0u32..64, 1..80),
        n in 1usize..40,
    ) {
        let cfg = ScenarioConfig::default();
        let a = MockOracle::new(seed, &cfg.oracle);
        let b = MockOracle::new(seed, &cfg.oracle);
        let _ = b.next_tokens(&[5, 6, 7], 9);
        let out = a.next_tokens(&context, n);
        prop_assert_eq!(&out, &b.next_tokens(&context, n));
        let mut ctx = context.clone();
        for &t in &out {
            prop_assert_eq!(a.next_tokens(&ctx, 1), vec![t]);
            ctx.push(t);
        }
    }
}
