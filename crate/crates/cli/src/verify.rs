//! Acceptance checks run by `agentinfer verify` and by the `acceptance`
//! test target. Each check returns a [`Criterion`] instead of panicking so
//! the whole table is always printed.

use std::collections::HashSet;
use std::time::Instant;

use agentinfer_core::collab::{
    render_progress, run_collab, CollabConfig, CollabError, CollabTrace, Role, ScriptedAdapter,
    Transition,
};
use agentinfer_core::sam::{DraftPolicy, StateId, SuffixAutomaton, TokenId};
use agentinfer_core::sched::{
    baseline_sjf, order, price_for_ratio, select, update_lambda, Policy, QueueEntry,
    SchedulerParams, SchedulerState,
};
use agentinfer_core::specdec::{
    build_composite, greedy_decode, retrieve_top_k, run_decode, MemoryRepository, SpecConfig,
    StopRule,
};
use agentinfer_sim::config::OracleConfig;
use agentinfer_sim::hashing::mix;
use agentinfer_sim::oracle::{MockOracle, MARKER};
use agentinfer_sim::presets;
use agentinfer_sim::scenarios::{
    composition, compress_compare, ote_vs_context, sam_async, sched_compare, OteSweep,
};

use crate::commands;

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Criterion {
    fn new(id: u8, name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            name,
            passed,
            detail: detail.into(),
        }
    }

    fn failed(id: u8, name: &'static str, err: impl std::fmt::Display) -> Self {
        Self::new(id, name, false, format!("error: {err}"))
    }

    /// `[PASS] 4 scheduler ordering: ...`
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("[{tag}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

pub const IDS: [u8; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Seeds for the multi-seed scheduler comparison.
pub const SCHED_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Seeds for the single-seed scenario checks that are still repeated.
pub const SCENARIO_SEEDS: [u64; 3] = [1, 2, 3];

pub fn run(id: u8) -> Criterion {
    match id {
        1 => sam_correctness(),
        2 => losslessness(),
        3 => ote_trend(),
        4 => scheduler_ordering(),
        5 => lambda_algebra(),
        6 => async_build(),
        7 => collab_budgets(),
        8 => compression_safety(),
        9 => composition_gain(),
        10 => report_determinism(),
        _ => Criterion::new(id, "unknown", false, "no such criterion"),
    }
}

pub fn run_all() -> Vec<Criterion> {
    IDS.iter().map(|&id| run(id)).collect()
}

/// Deterministic integer in `0..n` keyed by `words`.
fn pick(words: &[u64], n: u64) -> u64 {
    mix(words) % n.max(1)
}

/// Largest state count of an automaton over `n` tokens: `2n - 1` once
/// `n >= 2`, and `n + 1` below that.
pub fn state_bound(n: usize) -> usize {
    if n < 2 {
        n + 1
    } else {
        2 * n - 1
    }
}

fn substrings(corpus: &[TokenId]) -> HashSet<&[TokenId]> {
    let mut out = HashSet::new();
    for i in 0..corpus.len() {
        for j in i + 1..=corpus.len() {
            out.insert(&corpus[i..j]);
        }
    }
    out
}

fn accepted(sam: &SuffixAutomaton) -> HashSet<Vec<TokenId>> {
    let mut out = HashSet::new();
    let mut stack = vec![(StateId::ROOT, Vec::new())];
    while let Some((s, path)) = stack.pop() {
        for (t, next) in sam.state(s).transitions() {
            let mut p = path.clone();
            p.push(t);
            out.insert(p.clone());
            stack.push((next, p));
        }
    }
    out
}

pub fn sam_correctness() -> Criterion {
    const NAME: &str = "automaton correctness";
    let start = Instant::now();
    let mut worst_ratio = 0.0f64;
    for c in 0..500u64 {
        let vocab = 1 + pick(&[1, c], 16) as u32;
        let len = pick(&[2, c], 201) as usize;
        let corpus: Vec<TokenId> = (0..len).map(|i| pick(&[3, c, i as u64], vocab as u64) as u32).collect();
        let sam = match SuffixAutomaton::from_tokens(&corpus) {
            Ok(s) => s,
            Err(e) => return Criterion::failed(1, NAME, e),
        };
        let bound = state_bound(len);
        if sam.state_count() > bound {
            return Criterion::new(1, NAME, false, format!("corpus {c}: {} states > {bound}", sam.state_count()));
        }
        worst_ratio = worst_ratio.max(sam.state_count() as f64 / bound as f64);
        let want = substrings(&corpus);
        let got = accepted(&sam);
        if got.len() != want.len() || !got.iter().all(|s| want.contains(s.as_slice())) {
            return Criterion::new(
                1,
                NAME,
                false,
                format!("corpus {c}: {} accepted vs {} substrings", got.len(), want.len()),
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Criterion::new(
        1,
        NAME,
        secs < 10.0,
        format!("500 corpora match brute force, max states/bound {worst_ratio:.3}, {secs:.2}s"),
    )
}

pub fn losslessness() -> Criterion {
    const NAME: &str = "speculative losslessness";
    let start = Instant::now();
    let mut drafted = 0u64;
    for p in 0..100u64 {
        let oracle_cfg = OracleConfig {
            rho: pick(&[10, p], 101) as f64 / 100.0,
            n_docs: 4 + pick(&[11, p], 12) as usize,
            doc_len: 256,
            vocab: 50 + pick(&[12, p], 4000) as u32,
            ..OracleConfig::default()
        };
        let oracle = MockOracle::new(p, &oracle_cfg);
        let pool = oracle.pool();
        let doc_tokens = |d: u64, n: usize| -> Vec<TokenId> {
            let doc = pick(&[13, p, d], pool.n_docs() as u64) as usize;
            pool.doc(doc).into_iter().take(n).collect()
        };
        let mut repo = MemoryRepository::new(32);
        for h in 0..pick(&[14, p], 6) {
            let mut prompt = doc_tokens(100 + h, 200);
            prompt.push(MARKER);
            let (out, _) = greedy_decode(&oracle, &prompt, StopRule::max_tokens(96));
            let _ = repo.push(prompt, out, 1 + h);
        }
        let session: Vec<TokenId> = (0..pick(&[15, p], 3)).flat_map(|d| doc_tokens(200 + d, 256)).collect();
        let mut prompt: Vec<TokenId> = (0..1 + pick(&[16, p], 3)).flat_map(|d| doc_tokens(300 + d, 256)).collect();
        prompt.push(MARKER);
        let spec = SpecConfig {
            n_propose: 2 + pick(&[17, p], 8) as usize,
            min_match: 1 + pick(&[18, p], 3) as usize,
            draft_policy: if pick(&[19, p], 2) == 0 {
                DraftPolicy::LatestOnly
            } else {
                DraftPolicy::LatestThenEarliest
            },
            ..SpecConfig::default()
        };
        let stop = StopRule::max_tokens(64 + pick(&[20, p], 200) as usize);
        let hits = retrieve_top_k(&prompt, &repo, spec.top_k, None);
        let decoded = build_composite(&session, &prompt, &hits, &repo, &spec)
            .and_then(|mut src| run_decode(&oracle, &mut src, &prompt, stop, &spec));
        let (spec_out, metrics) = match decoded {
            Ok(v) => v,
            Err(e) => return Criterion::failed(2, NAME, e),
        };
        let (greedy_out, _) = greedy_decode(&oracle, &prompt, stop);
        if spec_out != greedy_out {
            let at = spec_out.iter().zip(&greedy_out).take_while(|(a, b)| a == b).count();
            return Criterion::new(2, NAME, false, format!("pair {p}: outputs diverge at token {at}"));
        }
        drafted += metrics.proposed_spec_tokens;
    }
    let secs = start.elapsed().as_secs_f64();
    Criterion::new(
        2,
        NAME,
        secs < 30.0 && drafted > 0,
        format!("100 pairs equal greedy output, {drafted} drafted tokens verified, {secs:.2}s"),
    )
}

fn nondecreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0])
}

pub fn ote_trend() -> Criterion {
    const NAME: &str = "decoding efficiency trend";
    let cfg = match presets::load("ote_sweep") {
        Ok(c) => c,
        Err(e) => return Criterion::failed(3, NAME, e),
    };
    let curve = match ote_vs_context(&cfg, 1, &OteSweep::default()) {
        Ok(c) => c,
        Err(e) => return Criterion::failed(3, NAME, e),
    };
    let sam: Vec<f64> = curve.points.iter().map(|p| p.sam_ote).collect();
    let mem: Vec<f64> = curve.points.iter().map(|p| p.memory_ote).collect();
    let monotone = nondecreasing(&sam) && nondecreasing(&mem);
    let ranked = curve.sam_spearman > 0.8 && curve.memory_spearman > 0.8;
    let dominated = curve.points.iter().all(|p| p.memory_ote >= p.sam_ote);
    let flat = (curve.no_repeat_ote - 1.0).abs() <= 0.05;
    Criterion::new(
        3,
        NAME,
        monotone && ranked && dominated && flat,
        format!(
            "ote {:.3}->{:.3} (memory {:.3}->{:.3}), nondecreasing {monotone}, spearman {:.3}/{:.3}, memory >= session-only {dominated}, non-repeating ote {:.3}",
            sam[0],
            sam[sam.len() - 1],
            mem[0],
            mem[mem.len() - 1],
            curve.sam_spearman,
            curve.memory_spearman,
            curve.no_repeat_ote
        ),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn scheduler_ordering() -> Criterion {
    const NAME: &str = "scheduler ordering";
    let cfg = match presets::load("sched_compare") {
        Ok(c) => c,
        Err(e) => return Criterion::failed(4, NAME, e),
    };
    // [fcfs, sjf, agentsched] per seed
    let mut hits: Vec<[f64; 3]> = Vec::new();
    let mut e2e: Vec<[f64; 3]> = Vec::new();
    for &seed in &SCHED_SEEDS {
        let rs = match sched_compare(&cfg, seed) {
            Ok(r) => r,
            Err(e) => return Criterion::failed(4, NAME, e),
        };
        hits.push([0, 1, 2].map(|i| rs[i].summary.hit_rate));
        e2e.push([0, 1, 2].map(|i| rs[i].summary.mean_task_e2e));
    }
    let col = |rows: &[[f64; 3]], i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
    let med = [0, 1, 2].map(|i| median(col(&hits, i)));
    let mean = [0, 1, 2].map(|i| col(&e2e, i).iter().sum::<f64>() / e2e.len() as f64);
    let ordered_seeds = hits
        .iter()
        .zip(&e2e)
        .filter(|(h, e)| h[2] > h[0] && h[0] > h[1] && e[2] < e[0])
        .count();
    let passed = med[2] > med[0] && med[0] > med[1] && mean[2] < mean[0] && ordered_seeds >= 4;
    Criterion::new(
        4,
        NAME,
        passed,
        format!(
            "median hit agentsched {:.3} fcfs {:.3} sjf {:.3}; mean e2e agentsched {:.1}s fcfs {:.1}s; ordering on {ordered_seeds}/5 seeds",
            med[2], med[0], med[1], mean[2], mean[0]
        ),
    )
}

pub fn lambda_algebra() -> Criterion {
    const NAME: &str = "price algebra";
    let params = SchedulerParams::default();
    let entry = |id: u64, prompt_tok: usize, hit: usize, need: usize, wait: f64| QueueEntry {
        id,
        prompt_tok,
        hit,
        need,
        wait,
        arrival: id,
    };
    // need 40 against 39 free blocks plus epsilon 1 is a pressure of exactly 1
    let balanced = update_lambda(&mut SchedulerState::default(), &[entry(0, 640, 0, 40, 0.0)], 39, &params);
    let half = (balanced - 0.5 * params.lambda_max).abs() < 1e-12
        && (price_for_ratio(1.0, &params) - 0.5 * params.lambda_max).abs() < 1e-12;
    let grid: Vec<f64> = (0..100)
        .map(|d| update_lambda(&mut SchedulerState::default(), &[entry(0, 0, 0, d, 0.0)], 60, &params))
        .collect();
    let monotone = grid.windows(2).all(|w| w[1] > w[0]);
    let sjf_params = SchedulerParams {
        a: 0.0,
        c: 0.0,
        ..params
    };
    let mut mismatches = 0;
    for q in 0..1000u64 {
        let n = 1 + pick(&[30, q], 24) as usize;
        let queue: Vec<QueueEntry> = (0..n as u64)
            .map(|i| {
                let prompt = 1 + pick(&[31, q, i], 40_000) as usize;
                let blocks = prompt.div_ceil(16);
                let hit = pick(&[32, q, i], blocks as u64 + 1) as usize;
                entry(i, prompt, hit, blocks - hit, pick(&[33, q, i], 600) as f64 / 10.0)
            })
            .collect();
        let same_order = order(&queue, Policy::Agentsched, 0.0, &sjf_params) == order(&queue, Policy::Sjf, 0.0, &sjf_params);
        let same_pick = select(&queue, Policy::Agentsched, 0.0, &sjf_params, |_| true) == baseline_sjf(&queue, |_| true);
        if !(same_order && same_pick) {
            mismatches += 1;
        }
    }
    Criterion::new(
        5,
        NAME,
        half && monotone && mismatches == 0,
        format!(
            "unit pressure price {balanced:.15}, strictly increasing over 100 demands {monotone}, sjf-limit mismatches {mismatches}/1000"
        ),
    )
}

pub fn async_build() -> Criterion {
    const NAME: &str = "asynchronous automaton build";
    let cfg = match presets::load("sam_async") {
        Ok(c) => c,
        Err(e) => return Criterion::failed(6, NAME, e),
    };
    let rs = match sam_async(&cfg, 1) {
        Ok(r) => r,
        Err(e) => return Criterion::failed(6, NAME, e),
    };
    let (none, sync, asy) = (&rs[0].summary, &rs[1].summary, &rs[2].summary);
    let prompt = rs[1].requests.iter().map(|r| r.prompt_tokens).sum::<usize>() as f64 / rs[1].requests.len().max(1) as f64;
    let build = prompt * cfg.latency.sam_build_per_token;
    let ttft_async = asy.mean_ttft <= 1.10 * none.mean_ttft;
    let ttft_sync = sync.mean_ttft >= none.mean_ttft + build - 1e-9;
    let tpot = sync.mean_tpot <= asy.mean_tpot && asy.mean_tpot <= none.mean_tpot;
    Criterion::new(
        6,
        NAME,
        ttft_async && ttft_sync && tpot,
        format!(
            "ttft none {:.3}s sync {:.3}s async {:.3}s (build {build:.3}s); tpot sync {:.4}s async {:.4}s none {:.4}s",
            none.mean_ttft, sync.mean_ttft, asy.mean_ttft, sync.mean_tpot, asy.mean_tpot, none.mean_tpot
        ),
    )
}

fn collab_trace(cfg: &CollabConfig, large: ScriptedAdapter, small: ScriptedAdapter) -> Result<CollabTrace, CollabError> {
    match run_collab("task", &mut large.clone(), &mut small.clone(), cfg) {
        Ok(o) => Ok(o.trace),
        Err(CollabError::Truncated { trace, .. }) => Ok(*trace),
        Err(e) => Err(e),
    }
}

pub fn collab_budgets() -> Criterion {
    const NAME: &str = "collaboration budgets";
    let mut problems = Vec::new();
    let mut runs = 0;
    for warmup in 0..4 {
        for per_escalation in 1..4 {
            for final_call in [1, 5, 12] {
                let cfg = CollabConfig {
                    large_warmup_steps: warmup,
                    large_steps_per_escalation: per_escalation,
                    max_total_steps: 64,
                };
                runs += 1;
                let large = ScriptedAdapter::always(Role::Large, false);
                let small_true = ScriptedAdapter::always(Role::Small, true).final_on_call(final_call);
                match collab_trace(&cfg, large.clone(), small_true) {
                    Ok(t) if t.large_steps == warmup && t.escalations == 0 => {}
                    Ok(t) => problems.push(format!("K={warmup} true script: {} large steps", t.large_steps)),
                    Err(e) => problems.push(e.to_string()),
                }
                let small_false = ScriptedAdapter::always(Role::Small, false).final_on_call(final_call);
                match collab_trace(&cfg, large.clone(), small_false) {
                    Ok(t) => {
                        if t.large_steps_per_escalation().iter().any(|&n| n > per_escalation) {
                            problems.push(format!("B={per_escalation}: escalation over budget"));
                        }
                        if t.large_steps > warmup + per_escalation * t.escalations {
                            problems.push(format!("K={warmup} B={per_escalation}: large steps over budget"));
                        }
                    }
                    Err(e) => problems.push(e.to_string()),
                }
                // Without a final answer the run stops at the step cap; a cap
                // at a whole number of small-then-burst cycles makes every
                // escalation spend its full budget.
                let cycles = final_call;
                let capped = CollabConfig {
                    max_total_steps: warmup + cycles * (1 + per_escalation),
                    ..cfg
                };
                let small_false = ScriptedAdapter::always(Role::Small, false);
                match collab_trace(&capped, large.clone(), small_false) {
                    Ok(t) if t.escalations == cycles && t.large_steps == warmup + per_escalation * t.escalations => {}
                    Ok(t) => problems.push(format!(
                        "K={warmup} B={per_escalation}: {} large steps, {} escalations",
                        t.large_steps, t.escalations
                    )),
                    Err(e) => problems.push(e.to_string()),
                }
                let garbled = ScriptedAdapter::new(Role::Small)
                    .with_progress(vec!["no block here".into(), render_progress("ok", true)])
                    .final_on_call(final_call.max(2));
                match collab_trace(&cfg, ScriptedAdapter::always(Role::Large, true), garbled) {
                    Ok(t) => {
                        let first_small = t.events.iter().find(|e| e.role == Role::Small);
                        let escalated = first_small
                            .map(|e| e.malformed && !e.progress && e.transition == Some(Transition::Escalate))
                            .unwrap_or(false);
                        if !escalated || t.malformed_blocks == 0 {
                            problems.push(format!("K={warmup}: malformed block did not escalate"));
                        }
                    }
                    Err(e) => problems.push(e.to_string()),
                }
            }
        }
    }
    let detail = if problems.is_empty() {
        format!("{runs} budget settings x 4 scripts hold all trace identities")
    } else {
        problems.join("; ")
    };
    Criterion::new(7, NAME, problems.is_empty(), detail)
}

pub fn compression_safety() -> Criterion {
    const NAME: &str = "compression safety";
    let cfg = match presets::load("compress") {
        Ok(c) => c,
        Err(e) => return Criterion::failed(8, NAME, e),
    };
    let mut details = Vec::new();
    let mut passed = cfg.workload.loops_per_task == 12;
    for &seed in &SCENARIO_SEEDS {
        let rs = match compress_compare(&cfg, seed) {
            Ok(r) => r,
            Err(e) => return Criterion::failed(8, NAME, e),
        };
        let (off, on) = (&rs[0].summary, &rs[1].summary);
        let cut = 1.0 - on.peak_context_tokens as f64 / off.peak_context_tokens.max(1) as f64;
        passed &= on.reasoning_intact
            && cut >= 0.40
            && on.mid_loop_applies == 0
            && on.distill_stalls == 0
            && on.distill_applies > 0;
        details.push(format!(
            "seed {seed}: peak {}->{} ({:.0}% lower), {} applies, {} mid-loop, {} stalls, reasoning intact {}",
            off.peak_context_tokens,
            on.peak_context_tokens,
            100.0 * cut,
            on.distill_applies,
            on.mid_loop_applies,
            on.distill_stalls,
            on.reasoning_intact
        ));
    }
    Criterion::new(8, NAME, passed, details.join("; "))
}

pub fn composition_gain() -> Criterion {
    const NAME: &str = "feature composition";
    let cfg = match presets::load("composition") {
        Ok(c) => c,
        Err(e) => return Criterion::failed(9, NAME, e),
    };
    let mut passed = cfg.workload.sessions == 4;
    let mut details = Vec::new();
    for &seed in &SCENARIO_SEEDS {
        let rs = match composition(&cfg, seed) {
            Ok(r) => r,
            Err(e) => return Criterion::failed(9, NAME, e),
        };
        let qps: Vec<f64> = rs.iter().map(|r| r.summary.qps).collect();
        let gain = qps[qps.len() - 1] / qps[0];
        passed &= nondecreasing(&qps) && gain >= 1.3;
        let stages: Vec<String> = rs.iter().map(|r| format!("{} {:.5}", r.label, r.summary.qps)).collect();
        details.push(format!("seed {seed}: {} ({gain:.2}x)", stages.join(", ")));
    }
    Criterion::new(9, NAME, passed, details.join("; "))
}

pub fn report_determinism() -> Criterion {
    const NAME: &str = "report determinism";
    let cfg = match presets::load("default") {
        Ok(c) => c,
        Err(e) => return Criterion::failed(10, NAME, e),
    };
    let root = std::env::temp_dir().join(format!("agentinfer-verify-{}", std::process::id()));
    let mut csvs = Vec::new();
    for run in 0..2 {
        let dir = root.join(run.to_string());
        let out = match commands::run(&cfg, 7, &dir) {
            Ok(o) => o,
            Err(e) => return Criterion::failed(10, NAME, e),
        };
        let bytes: Vec<Vec<u8>> = out
            .files
            .iter()
            .filter(|f| f.extension().is_some_and(|e| e == "csv"))
            .map(|f| std::fs::read(f).unwrap_or_default())
            .collect();
        csvs.push(bytes);
    }
    let _ = std::fs::remove_dir_all(&root);
    let size: usize = csvs[0].iter().map(Vec::len).sum();
    let passed = !csvs[0].is_empty() && size > 0 && csvs[0] == csvs[1];
    Criterion::new(10, NAME, passed, format!("two runs at seed 7 wrote identical CSV ({size} bytes): {passed}"))
}
