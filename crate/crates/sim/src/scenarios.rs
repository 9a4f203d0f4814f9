//! Canned experiments built on [`run_scenario`].

use agentinfer_core::collab::Role;
use agentinfer_core::sched::Policy;
use agentinfer_core::specdec::{
    build_composite, greedy_decode, retrieve_top_k, run_decode, DecodeMetrics, MemoryRepository,
    StopRule,
};
use agentinfer_core::TokenId;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{BuildMode, ScenarioConfig};
use crate::engine::{SimError, Simulation};
use crate::hashing::{keyed_rng, mix, ns};
use crate::oracle::{content_token, MockOracle, MARKER};
use crate::presets;
use crate::report::{LambdaSample, MetricsReport, RequestClass};

/// Runs one simulation of `cfg`.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<MetricsReport, SimError> {
    run_labeled(cfg, seed, "run")
}

pub fn run_labeled(cfg: &ScenarioConfig, seed: u64, label: &str) -> Result<MetricsReport, SimError> {
    Simulation::new(cfg, seed, label)?.run()
}

/// The same trace under fcfs, sjf and agentsched, in that order.
pub fn sched_compare(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    [Policy::Fcfs, Policy::Sjf, Policy::Agentsched]
        .into_iter()
        .map(|p| {
            let mut c = cfg.clone();
            c.sched.policy = p;
            run_labeled(&c, seed, p.name())
        })
        .collect()
}

pub fn scenario_sched_compare(seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    sched_compare(&presets::load("sched_compare").expect("bundled preset parses"), seed)
}

/// No speculation, synchronous build and asynchronous build, in that order.
pub fn sam_async(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    let variants = [("none", None), ("sync", Some(BuildMode::Sync)), ("async", Some(BuildMode::Async))];
    variants
        .into_iter()
        .map(|(label, build)| {
            let mut c = cfg.clone();
            c.spec.enabled = build.is_some();
            if let Some(b) = build {
                c.spec.build = b;
            }
            run_labeled(&c, seed, label)
        })
        .collect()
}

pub fn scenario_sam_async(seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    sam_async(&presets::load("sam_async").expect("bundled preset parses"), seed)
}

/// Collaboration, large model only and small model only, in that order.
pub fn collab_compare(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    let mut on = cfg.clone();
    on.collab.enabled = true;
    let mut large = cfg.clone();
    large.collab.enabled = false;
    large.collab.solo_role = Role::Large;
    let mut small = large.clone();
    small.collab.solo_role = Role::Small;
    Ok(vec![
        run_labeled(&on, seed, "collab")?,
        run_labeled(&large, seed, "large_only")?,
        run_labeled(&small, seed, "small_only")?,
    ])
}

pub fn scenario_collab(seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    collab_compare(&presets::load("collab").expect("bundled preset parses"), seed)
}

/// Compression off and on, in that order.
pub fn compress_compare(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    [false, true]
        .into_iter()
        .map(|on| {
            let mut c = cfg.clone();
            c.compress.enabled = on;
            run_labeled(&c, seed, if on { "compress_on" } else { "compress_off" })
        })
        .collect()
}

pub fn scenario_compress(seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    compress_compare(&presets::load("compress").expect("bundled preset parses"), seed)
}

/// Stage names of the cumulative feature build-up.
pub const COMPOSITION_STAGES: [&str; 5] = ["baseline", "+collab", "+compress", "+sched", "+specdec"];

/// Enables collab, compress, agentsched and speculation one after another on
/// top of a baseline with all four off.
pub fn composition(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    let mut c = cfg.clone();
    c.collab.enabled = false;
    c.collab.solo_role = Role::Large;
    c.compress.enabled = false;
    c.sched.policy = Policy::Fcfs;
    c.spec.enabled = false;
    let mut out = Vec::new();
    for (i, label) in COMPOSITION_STAGES.iter().enumerate() {
        match i {
            1 => c.collab.enabled = true,
            2 => c.compress.enabled = true,
            3 => c.sched.policy = Policy::Agentsched,
            4 => c.spec.enabled = true,
            _ => {}
        }
        out.push(run_labeled(&c, seed, label)?);
    }
    Ok(out)
}

pub fn scenario_composition(seed: u64) -> Result<Vec<MetricsReport>, SimError> {
    composition(&presets::load("composition").expect("bundled preset parses"), seed)
}

/// Admissions split by the price at which they happened.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMix {
    pub long: usize,
    pub short: usize,
}

impl PhaseMix {
    pub fn long_share(&self) -> f64 {
        let n = self.long + self.short;
        if n == 0 {
            0.0
        } else {
            self.long as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrace {
    pub samples: Vec<LambdaSample>,
    /// Admissions while the price was below half its maximum.
    pub low_price: PhaseMix,
    /// Admissions while the price was above half its maximum.
    pub high_price: PhaseMix,
    /// Long requests make up a larger share of admissions at high price.
    pub long_share_rises: bool,
}

/// Price time series and admission mix of one run.
pub fn lambda_trace(report: &MetricsReport, lambda_max: f64) -> LambdaTrace {
    let (mut low, mut high) = (PhaseMix::default(), PhaseMix::default());
    for a in &report.admissions {
        let phase = if a.lambda < 0.5 * lambda_max {
            &mut low
        } else if a.lambda > 0.5 * lambda_max {
            &mut high
        } else {
            continue;
        };
        match a.class {
            RequestClass::Long => phase.long += 1,
            RequestClass::Short => phase.short += 1,
        }
    }
    let nonempty = low.long + low.short > 0 && high.long + high.short > 0;
    LambdaTrace {
        samples: report.lambda_series.clone(),
        low_price: low,
        high_price: high,
        long_share_rises: nonempty && high.long_share() > low.long_share(),
    }
}

/// `qps * mean task latency / sessions`; 1 for a closed loop in steady state.
pub fn littles_law_ratio(report: &MetricsReport, sessions: usize) -> f64 {
    report.summary.qps * report.summary.mean_task_e2e / sessions as f64
}

/// Context-length sweep of speculative decoding efficiency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OteSweep {
    pub context_lengths: Vec<usize>,
    pub requests_per_point: usize,
    /// Past requests in the memory repository.
    pub history: usize,
    pub output_tokens: usize,
}

impl Default for OteSweep {
    fn default() -> Self {
        Self {
            context_lengths: vec![1_024, 2_048, 4_096, 8_192, 12_288, 16_384, 24_576, 30_720],
            requests_per_point: 6,
            history: 24,
            output_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtePoint {
    pub context_len: usize,
    /// Session automaton only.
    pub sam_ote: f64,
    pub sam_shr: f64,
    /// Session automaton plus retrieved history.
    pub memory_ote: f64,
    pub memory_shr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OteCurve {
    pub points: Vec<OtePoint>,
    pub sam_spearman: f64,
    pub memory_spearman: f64,
    /// OTE at the longest context with a non-repeating oracle.
    pub no_repeat_ote: f64,
}

fn ratio(m: &DecodeMetrics) -> (f64, f64) {
    let ote = m.generated_tokens as f64 / m.forward_passes.max(1) as f64;
    let shr = if m.proposed_spec_tokens > 0 {
        m.accepted_spec_tokens as f64 / m.proposed_spec_tokens as f64
    } else {
        0.0
    };
    (ote, shr)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn sweep_prompt(corpus: &[TokenId], len: usize, nonce: &[TokenId]) -> Vec<TokenId> {
    let mut p = corpus[..len - nonce.len() - 1].to_vec();
    p.extend_from_slice(nonce);
    p.push(MARKER);
    p
}

fn nonce(seed: u64, tag: u64, i: usize, vocab: u32) -> Vec<TokenId> {
    (0..4)
        .map(|j| content_token(mix(&[seed, ns::TASK, tag, i as u64, j]), vocab))
        .collect()
}

/// Decoding efficiency against context length, with and without retrieved
/// history. Prompts are nested prefixes of one document stream, so longer
/// contexts index more of what the oracle copies.
pub fn ote_vs_context(cfg: &ScenarioConfig, seed: u64, sweep: &OteSweep) -> Result<OteCurve, SimError> {
    cfg.validate().map_err(SimError::Config)?;
    let spec = cfg.spec.core();
    let oracle = MockOracle::new(seed, &cfg.oracle);
    let pool = oracle.pool();
    let mut order: Vec<usize> = (0..pool.n_docs()).collect();
    order.shuffle(&mut keyed_rng(&[seed, ns::DOC, u64::MAX]));
    let corpus: Vec<TokenId> = order.iter().flat_map(|&d| pool.doc(d)).collect();
    let longest = sweep.context_lengths.iter().copied().max().unwrap_or(0);
    if longest >= corpus.len() || sweep.context_lengths.iter().any(|&l| l < 16) {
        return Err(SimError::Contract(format!(
            "sweep lengths must lie in [16, {})",
            corpus.len()
        )));
    }
    let vocab = cfg.oracle.vocab;
    let stop = StopRule::max_tokens(sweep.output_tokens);
    let query_of = |prompt: &[TokenId]| {
        let body = &prompt[..prompt.len() - 1];
        body[body.len().saturating_sub(cfg.spec.retrieval_query_tokens)..].to_vec()
    };
    let mut repo = MemoryRepository::new(cfg.spec.memory_capacity.max(sweep.history));
    for h in 0..sweep.history {
        let len = sweep.context_lengths[h % sweep.context_lengths.len()];
        let prompt = sweep_prompt(&corpus, len, &nonce(seed, 1, h, vocab));
        let (out, _) = greedy_decode(&oracle, &prompt, stop);
        let _ = repo.push(query_of(&prompt), out, 1 + h as u64);
    }
    let contract = |e: agentinfer_core::sam::SamError| SimError::Contract(e.to_string());
    let mut points = Vec::new();
    for &len in &sweep.context_lengths {
        let (mut plain, mut mem) = (DecodeMetrics::default(), DecodeMetrics::default());
        for i in 0..sweep.requests_per_point {
            let prompt = sweep_prompt(&corpus, len, &nonce(seed, 0, i, vocab));
            let mut src = build_composite(&[], &prompt, &[], &repo, &spec).map_err(contract)?;
            let (_, m) = run_decode(&oracle, &mut src, &prompt, stop, &spec).map_err(contract)?;
            plain.merge(&m);
            let hits = retrieve_top_k(&query_of(&prompt), &repo, spec.top_k, Some(0));
            let mut src = build_composite(&[], &prompt, &hits, &repo, &spec).map_err(contract)?;
            let (_, m) = run_decode(&oracle, &mut src, &prompt, stop, &spec).map_err(contract)?;
            mem.merge(&m);
        }
        let (sam_ote, sam_shr) = ratio(&plain);
        let (memory_ote, memory_shr) = ratio(&mem);
        points.push(OtePoint {
            context_len: len,
            sam_ote,
            sam_shr,
            memory_ote,
            memory_shr,
        });
    }
    let mut flat = cfg.oracle.clone();
    flat.rho = 0.0;
    let random = MockOracle::new(seed, &flat);
    let mut m0 = DecodeMetrics::default();
    for i in 0..sweep.requests_per_point {
        let prompt = sweep_prompt(&corpus, longest, &nonce(seed, 0, i, vocab));
        let mut src = build_composite(&[], &prompt, &[], &repo, &spec).map_err(contract)?;
        let (_, m) = run_decode(&random, &mut src, &prompt, stop, &spec).map_err(contract)?;
        m0.merge(&m);
    }
    let lens: Vec<f64> = points.iter().map(|p| p.context_len as f64).collect();
    let sam: Vec<f64> = points.iter().map(|p| p.sam_ote).collect();
    let memv: Vec<f64> = points.iter().map(|p| p.memory_ote).collect();
    Ok(OteCurve {
        sam_spearman: spearman(&lens, &sam),
        memory_spearman: spearman(&lens, &memv),
        no_repeat_ote: ratio(&m0).0,
        points,
    })
}

pub fn scenario_ote_vs_context(seed: u64) -> Result<OteCurve, SimError> {
    ote_vs_context(
        &presets::load("ote_sweep").expect("bundled preset parses"),
        seed,
        &OteSweep::default(),
    )
}
