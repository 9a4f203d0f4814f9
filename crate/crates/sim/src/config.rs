//! Scenario configuration: every tunable of a simulation run.

use std::collections::BTreeMap;

use agentinfer_core::collab::{CollabConfig, Role};
use agentinfer_core::compress::CompressConfig;
use agentinfer_core::sam::DraftPolicy;
use agentinfer_core::sched::{PiCorrection, Policy, SchedulerParams};
use agentinfer_core::specdec::SpecConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Shared preamble plus pool documents and a task query.
    Documents,
    /// One block of `block_tokens` tokens repeated until the prompt length.
    RepeatedBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocQaMode {
    /// Fixed tool latency from `latency.tools.document_qa`.
    Latency,
    /// A short LLM request on the main engine per crawled page.
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Agent sessions running in parallel.
    pub sessions: usize,
    /// Tasks each session runs back to back.
    pub tasks_per_session: usize,
    /// Tool loops per task.
    pub loops_per_task: usize,
    /// Fraction of tasks that start with a long prompt.
    pub long_fraction: f64,
    /// Prompts of at least this many tokens are classed as long.
    pub long_threshold: usize,
    /// Inclusive token range of short initial prompts.
    pub short_prompt_tokens: [usize; 2],
    /// Inclusive token range of long initial prompts.
    pub long_prompt_tokens: [usize; 2],
    /// Shared preamble at the start of every task prompt (tokens).
    pub preamble_tokens: usize,
    pub prompt_style: PromptStyle,
    /// Block length for the repeated-block prompt style (tokens).
    pub block_tokens: usize,
    /// Output tokens of a think step.
    pub think_tokens: usize,
    /// Output tokens of the final answer step.
    pub answer_tokens: usize,
    /// Output tokens of one document QA request.
    pub qa_tokens: usize,
    /// Tokens of a tool-call (act) entry.
    pub act_tokens: usize,
    /// Query keyword tokens per task.
    pub query_tokens: usize,
    pub results_per_search: usize,
    /// Probability that a search result is relevant to the query.
    pub relevant_fraction: f64,
    /// Page tokens kept in context as a tool result.
    pub excerpt_tokens: usize,
    pub doc_qa: DocQaMode,
    /// Extra loops per task when compression is on, as a fraction.
    pub turn_inflation: f64,
    /// Gap between session start times (seconds).
    pub session_stagger_s: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            sessions: 4,
            tasks_per_session: 2,
            loops_per_task: 8,
            long_fraction: 0.3,
            long_threshold: 10_000,
            short_prompt_tokens: [1_000, 3_000],
            long_prompt_tokens: [12_000, 20_000],
            preamble_tokens: 512,
            prompt_style: PromptStyle::Documents,
            block_tokens: 1_000,
            think_tokens: 384,
            answer_tokens: 128,
            qa_tokens: 96,
            act_tokens: 16,
            query_tokens: 8,
            results_per_search: 5,
            relevant_fraction: 0.75,
            excerpt_tokens: 600,
            doc_qa: DocQaMode::Latency,
            turn_inflation: 0.0,
            session_stagger_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Markov,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Tokens of history that seed a fresh token.
    pub order: usize,
    /// Probability that an output segment copies a pool document.
    pub rho: f64,
    pub vocab: u32,
    /// Documents in the shared pool (crawled pages and copy sources).
    pub n_docs: usize,
    pub doc_len: usize,
    /// Output tokens per copy-or-fresh decision.
    pub segment_tokens: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mode: OracleMode::Markov,
            order: 2,
            rho: 0.5,
            vocab: 32_000,
            n_docs: 48,
            doc_len: 1_024,
            segment_tokens: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// KV blocks per engine.
    #[serde(rename = "N")]
    pub n: usize,
    /// Tokens per KV block.
    pub tpb: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { n: 16_384, tpb: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Requests decoded together per forward pass.
    pub max_batch: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { max_batch: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedConfig {
    pub policy: Policy,
    pub lambda_max: f64,
    pub k: f64,
    pub epsilon: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub pi: PiCorrection,
}

impl Default for SchedConfig {
    fn default() -> Self {
        let p = SchedulerParams::default();
        Self {
            policy: Policy::Fcfs,
            lambda_max: p.lambda_max,
            k: p.k,
            epsilon: p.epsilon,
            a: p.a,
            b: p.b,
            c: p.c,
            pi: p.pi,
        }
    }
}

impl SchedConfig {
    pub fn params(&self, tokens_per_block: usize) -> SchedulerParams {
        SchedulerParams {
            lambda_max: self.lambda_max,
            k: self.k,
            epsilon: self.epsilon,
            a: self.a,
            b: self.b,
            c: self.c,
            tokens_per_block,
            pi: self.pi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    /// Construction delays the first token.
    Sync,
    /// Construction runs on a background worker; decoding starts plain.
    Async,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecSection {
    pub enabled: bool,
    pub build: BuildMode,
    pub n_propose: usize,
    /// Retrieved history entries per request; 0 disables cross-request memory.
    pub top_k: usize,
    pub max_context_len: usize,
    pub max_batch_size: usize,
    pub min_match: usize,
    pub session_weight: f64,
    pub draft_policy: DraftPolicy,
    /// Entries kept in the cross-request memory repository.
    pub memory_capacity: usize,
    /// Prompt tail (tokens) used as the retrieval query.
    pub retrieval_query_tokens: usize,
}

impl Default for SpecSection {
    fn default() -> Self {
        let s = SpecConfig::default();
        Self {
            enabled: false,
            build: BuildMode::Async,
            n_propose: s.n_propose,
            top_k: s.top_k,
            max_context_len: s.max_context_len,
            max_batch_size: s.max_batch_size,
            min_match: s.min_match,
            session_weight: s.session_weight,
            draft_policy: DraftPolicy::LatestThenEarliest,
            memory_capacity: 4_096,
            retrieval_query_tokens: 256,
        }
    }
}

impl SpecSection {
    pub fn core(&self) -> SpecConfig {
        SpecConfig {
            n_propose: self.n_propose,
            top_k: self.top_k,
            max_context_len: self.max_context_len,
            max_batch_size: self.max_batch_size,
            min_match: self.min_match,
            session_weight: self.session_weight,
            draft_policy: self.draft_policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollabSection {
    pub enabled: bool,
    pub large_warmup_steps: usize,
    pub large_steps_per_escalation: usize,
    pub max_total_steps: usize,
    /// Probability that the small model reports progress on a loop.
    pub small_skill: f64,
    /// Probability that the large model reports progress on a loop.
    pub large_skill: f64,
    /// Model that runs every step when collaboration is off.
    pub solo_role: Role,
}

impl Default for CollabSection {
    fn default() -> Self {
        let c = CollabConfig::default();
        Self {
            enabled: false,
            large_warmup_steps: c.large_warmup_steps,
            large_steps_per_escalation: c.large_steps_per_escalation,
            max_total_steps: c.max_total_steps,
            small_skill: 0.75,
            large_skill: 1.0,
            solo_role: Role::Large,
        }
    }
}

impl CollabSection {
    pub fn core(&self) -> CollabConfig {
        CollabConfig {
            large_warmup_steps: self.large_warmup_steps,
            large_steps_per_escalation: self.large_steps_per_escalation,
            max_total_steps: self.max_total_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressSection {
    pub enabled: bool,
    pub theta_ctx: usize,
    pub theta_search: f64,
    pub ratio: f64,
    pub latency_s: f64,
}

impl Default for CompressSection {
    fn default() -> Self {
        let c = CompressConfig::default();
        Self {
            enabled: false,
            theta_ctx: c.theta_ctx,
            theta_search: c.theta_search,
            ratio: c.ratio,
            latency_s: c.latency_s,
        }
    }
}

impl CompressSection {
    pub fn core(&self) -> CompressConfig {
        CompressConfig {
            theta_ctx: self.theta_ctx,
            theta_search: self.theta_search,
            ratio: self.ratio,
            latency_s: self.latency_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolLatency {
    /// Mean latency (seconds).
    pub mean: f64,
    /// Uniform spread around the mean (seconds).
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    /// Prefill seconds per token not served from the KV cache.
    pub prefill_per_uncached_token: f64,
    /// Fixed cost of one prefill iteration (seconds).
    pub prefill_overhead: f64,
    /// Fixed cost of one decode forward pass (seconds).
    pub decode_per_forward_pass: f64,
    /// Decode cost per context token across the batch (seconds).
    pub decode_per_context_token: f64,
    /// Verification cost per drafted token (seconds).
    pub draft_verify_overhead_per_token: f64,
    /// Suffix automaton construction cost per token (seconds).
    pub sam_build_per_token: f64,
    /// Cost of checking a pending build before the first token (seconds).
    pub handle_check_overhead: f64,
    /// Progress check after a large-model think step (seconds).
    pub progress_check_large: f64,
    /// Progress check after a small-model think step (seconds).
    pub progress_check_small: f64,
    /// Small-model compute cost relative to the large model.
    pub small_speed_factor: f64,
    /// Tool latencies by tool name: web_search, url_crawler, document_qa.
    pub tools: BTreeMap<String, ToolLatency>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        let tools = [
            ("web_search", 3.27, 1.0),
            ("url_crawler", 10.37, 3.0),
            ("document_qa", 17.55, 5.0),
        ]
        .into_iter()
        .map(|(n, mean, jitter)| (n.to_string(), ToolLatency { mean, jitter }))
        .collect();
        Self {
            prefill_per_uncached_token: 1.0e-4,
            prefill_overhead: 0.005,
            decode_per_forward_pass: 0.0155,
            decode_per_context_token: 2.0e-8,
            draft_verify_overhead_per_token: 0.0005,
            sam_build_per_token: 4.7e-5,
            handle_check_overhead: 0.017,
            progress_check_large: 0.45,
            progress_check_small: 0.18,
            small_speed_factor: 0.4,
            tools,
        }
    }
}

impl LatencyConfig {
    pub fn tool(&self, name: &str) -> ToolLatency {
        self.tools.get(name).copied().unwrap_or(ToolLatency { mean: 0.0, jitter: 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    /// Seed used when none is given on the command line.
    pub default: u64,
    /// Seed set for multi-seed comparisons.
    pub list: Vec<u64>,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        Self {
            default: 1,
            list: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Report directory; the command line and environment take precedence.
    pub dir: String,
    /// Report file stem.
    pub name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "reports".into(),
            name: "report".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// One run of the configured stack.
    #[default]
    Single,
    /// The same trace under fcfs, sjf and agentsched.
    SchedCompare,
    /// No speculation, synchronous and asynchronous automaton builds.
    SamAsync,
    /// Features enabled one at a time on top of a baseline.
    Composition,
    /// Collaboration against each model serving alone.
    CollabCompare,
    /// Context compression off and on.
    CompressCompare,
    /// Decoding efficiency against context length.
    OteSweep,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub workload: WorkloadConfig,
    pub oracle: OracleConfig,
    pub pool: PoolConfig,
    pub engine: EngineConfig,
    pub sched: SchedConfig,
    pub spec: SpecSection,
    pub collab: CollabSection,
    pub compress: CompressSection,
    pub latency: LatencyConfig,
    pub seeds: SeedsConfig,
    pub output: OutputConfig,
}

/// A rejected config value: dotted field path and reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), Vec<ConfigIssue>> {
        let mut issues = Vec::new();
        let mut bad = |path: &str, message: String| {
            issues.push(ConfigIssue {
                path: path.to_string(),
                message,
            })
        };
        let w = &self.workload;
        if w.sessions == 0 {
            bad("workload.sessions", "must be at least 1".into());
        }
        if w.tasks_per_session == 0 {
            bad("workload.tasks_per_session", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&w.long_fraction) {
            bad("workload.long_fraction", "must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&w.relevant_fraction) {
            bad("workload.relevant_fraction", "must lie in [0, 1]".into());
        }
        for (path, r) in [
            ("workload.short_prompt_tokens", w.short_prompt_tokens),
            ("workload.long_prompt_tokens", w.long_prompt_tokens),
        ] {
            if r[0] > r[1] || r[0] <= w.preamble_tokens + w.query_tokens {
                bad(path, "needs min <= max and min above preamble plus query tokens".into());
            }
        }
        if w.think_tokens == 0 || w.answer_tokens == 0 || w.qa_tokens == 0 {
            bad("workload.think_tokens", "output lengths must be positive".into());
        }
        if w.block_tokens == 0 {
            bad("workload.block_tokens", "must be positive".into());
        }
        if !(w.turn_inflation >= 0.0 && w.turn_inflation.is_finite()) {
            bad("workload.turn_inflation", "must be non-negative".into());
        }
        if !(w.session_stagger_s >= 0.0 && w.session_stagger_s.is_finite()) {
            bad("workload.session_stagger_s", "must be non-negative".into());
        }
        let o = &self.oracle;
        if o.vocab < 16 || o.vocab >= agentinfer_core::sam::SENTINEL_BASE {
            bad("oracle.vocab", "must lie in [16, sentinel range)".into());
        }
        if !(0.0..=1.0).contains(&o.rho) {
            bad("oracle.rho", "must lie in [0, 1]".into());
        }
        if o.n_docs == 0 {
            bad("oracle.n_docs", "must be at least 1".into());
        }
        if o.doc_len <= o.segment_tokens || o.segment_tokens == 0 {
            bad("oracle.doc_len", "must exceed oracle.segment_tokens, which must be positive".into());
        }
        if self.pool.n == 0 {
            bad("pool.N", "must be at least 1".into());
        }
        if self.pool.tpb == 0 {
            bad("pool.tpb", "must be at least 1".into());
        }
        if self.engine.max_batch == 0 {
            bad("engine.max_batch", "must be at least 1".into());
        }
        if let Err((field, msg)) = self.sched.params(self.pool.tpb.max(1)).validate() {
            bad(&format!("sched.{field}"), msg);
        }
        if let Err((field, msg)) = self.spec.core().validate() {
            bad(&format!("spec.{field}"), msg);
        }
        if let Err((field, msg)) = self.collab.core().validate() {
            bad(&format!("collab.{field}"), msg);
        }
        for (path, v) in [
            ("collab.small_skill", self.collab.small_skill),
            ("collab.large_skill", self.collab.large_skill),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad(path, "must lie in [0, 1]".into());
            }
        }
        if let Err((field, msg)) = self.compress.core().validate() {
            bad(&format!("compress.{field}"), msg);
        }
        let l = &self.latency;
        for (path, v) in [
            ("latency.prefill_per_uncached_token", l.prefill_per_uncached_token),
            ("latency.prefill_overhead", l.prefill_overhead),
            ("latency.decode_per_forward_pass", l.decode_per_forward_pass),
            ("latency.decode_per_context_token", l.decode_per_context_token),
            ("latency.draft_verify_overhead_per_token", l.draft_verify_overhead_per_token),
            ("latency.sam_build_per_token", l.sam_build_per_token),
            ("latency.handle_check_overhead", l.handle_check_overhead),
            ("latency.progress_check_large", l.progress_check_large),
            ("latency.progress_check_small", l.progress_check_small),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bad(path, format!("must be non-negative, got {v}"));
            }
        }
        if !(l.small_speed_factor.is_finite() && l.small_speed_factor > 0.0) {
            bad("latency.small_speed_factor", "must be positive".into());
        }
        for (name, t) in &l.tools {
            if !(t.mean.is_finite() && t.mean >= 0.0 && t.jitter >= 0.0 && t.jitter <= t.mean) {
                bad(
                    &format!("latency.tools.{name}"),
                    "needs 0 <= jitter <= mean".into(),
                );
            }
        }
        if self.seeds.list.is_empty() {
            bad("seeds.list", "must name at least one seed".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn issues_name_field_paths() {
        let mut c = ScenarioConfig::default();
        c.pool.n = 0;
        c.sched.k = -1.0;
        c.spec.n_propose = 1;
        let issues = c.validate().unwrap_err();
        let paths: Vec<&str> = issues.iter().map(|i| i.path.as_str()).collect();
        assert!(paths.contains(&"pool.N"));
        assert!(paths.contains(&"sched.k"));
        assert!(paths.contains(&"spec.n_propose"));
    }
}
