//! Partitioned agent memory with asynchronous distillation of tool output.
//!
//! The agent's context is a timeline of entries. Prompt, think and act
//! entries form the reasoning partition and are never rewritten. Tool
//! results (and summaries that replaced earlier tool results) form the
//! environment partition. Once the context grows past a threshold at a
//! loop boundary, a snapshot of the environment partition is handed to a
//! distiller off the critical path; the finished summary replaces exactly
//! the snapshot entries at a later loop boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sam::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Prompt,
    Think,
    Act,
    ToolResult,
    /// Distilled replacement of earlier tool results.
    Summary,
}

impl EntryKind {
    pub fn is_reasoning(self) -> bool {
        matches!(self, EntryKind::Prompt | EntryKind::Think | EntryKind::Act)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: u64,
    pub kind: EntryKind,
    /// Search loop during which the entry was appended.
    pub loop_index: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompressError {
    #[error("distillation job is not done")]
    JobNotDone,
    #[error("context replacement attempted in the middle of loop {0}")]
    MidLoop(usize),
    #[error("a distillation job is already in flight")]
    JobInFlight,
    #[error("compression is not due")]
    NotDue,
    #[error("job does not belong to this memory")]
    ForeignJob,
}

#[derive(Debug, Clone, Default)]
pub struct AgentMemory {
    entries: Vec<MemoryEntry>,
    next_id: u64,
    loop_index: usize,
    in_loop: bool,
    loops_completed: usize,
    job_in_flight: Option<u64>,
    next_job: u64,
    reasoning_tokens: usize,
    environment_tokens: usize,
    peak_total: usize,
}

impl AgentMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn reasoning(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter().filter(|e| e.kind.is_reasoning())
    }

    pub fn environment(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter().filter(|e| !e.kind.is_reasoning())
    }

    pub fn reasoning_tokens(&self) -> usize {
        self.reasoning_tokens
    }

    pub fn environment_tokens(&self) -> usize {
        self.environment_tokens
    }

    pub fn total_tokens(&self) -> usize {
        self.reasoning_tokens + self.environment_tokens
    }

    /// Largest total seen so far.
    pub fn peak_tokens(&self) -> usize {
        self.peak_total
    }

    pub fn loops_completed(&self) -> usize {
        self.loops_completed
    }

    pub fn at_boundary(&self) -> bool {
        !self.in_loop
    }

    pub fn job_in_flight(&self) -> bool {
        self.job_in_flight.is_some()
    }

    /// Concatenated tokens of the whole timeline.
    pub fn flatten(&self) -> Vec<TokenId> {
        self.entries.iter().flat_map(|e| e.tokens.iter().copied()).collect()
    }

    pub fn push(&mut self, kind: EntryKind, tokens: Vec<TokenId>) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        if kind.is_reasoning() {
            self.reasoning_tokens += tokens.len();
        } else {
            self.environment_tokens += tokens.len();
        }
        self.entries.push(MemoryEntry {
            id,
            kind,
            loop_index: self.loop_index,
            tokens,
        });
        self.peak_total = self.peak_total.max(self.total_tokens());
        id
    }

    pub fn begin_loop(&mut self) {
        if !self.in_loop {
            self.in_loop = true;
            self.loop_index += 1;
        }
    }

    /// Marks the search-call boundary that closes the current loop.
    pub fn end_loop(&mut self) {
        if self.in_loop {
            self.in_loop = false;
            self.loops_completed += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    pub title: Vec<TokenId>,
    pub snippet: Vec<TokenId>,
    pub relevance: f64,
}

impl SearchResult {
    pub fn token_len(&self) -> usize {
        self.title.len() + self.snippet.len()
    }
}

pub trait Ranker {
    /// Relevance in `[0, 1]`, a pure function of its arguments.
    fn relevance(&self, query: &[TokenId], title: &[TokenId], snippet: &[TokenId]) -> f64;
}

/// Fraction of distinct query tokens that appear in the title or snippet.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapRanker;

impl Ranker for OverlapRanker {
    fn relevance(&self, query: &[TokenId], title: &[TokenId], snippet: &[TokenId]) -> f64 {
        let mut q: Vec<TokenId> = query.to_vec();
        q.sort_unstable();
        q.dedup();
        if q.is_empty() {
            return 0.0;
        }
        let mut doc: Vec<TokenId> = title.iter().chain(snippet).copied().collect();
        doc.sort_unstable();
        doc.dedup();
        let hits = q.iter().filter(|t| doc.binary_search(t).is_ok()).count();
        hits as f64 / q.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressConfig {
    /// Context size (tokens) above which distillation is triggered.
    pub theta_ctx: usize,
    /// Smallest relevance a search result needs to be kept.
    pub theta_search: f64,
    /// Summary length as a fraction of the distilled tokens.
    pub ratio: f64,
    /// Simulated distillation latency (seconds).
    pub latency_s: f64,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            theta_ctx: 5000,
            theta_search: 0.3,
            ratio: 0.5,
            latency_s: 20.0,
        }
    }
}

impl CompressConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.theta_ctx == 0 {
            return Err(("theta_ctx", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.theta_search) {
            return Err(("theta_search", format!("must lie in [0, 1], got {}", self.theta_search)));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(("ratio", format!("must lie in (0, 1], got {}", self.ratio)));
        }
        if !(self.latency_s.is_finite() && self.latency_s >= 0.0) {
            return Err(("latency_s", "must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scores, filters and orders search results; kept results are sorted by
/// descending relevance with ties in input order.
pub fn rank_filter(
    results: Vec<SearchResult>,
    query: &[TokenId],
    ranker: &dyn Ranker,
    cfg: &CompressConfig,
) -> Vec<SearchResult> {
    let mut kept: Vec<SearchResult> = results
        .into_iter()
        .map(|mut r| {
            r.relevance = ranker.relevance(query, &r.title, &r.snippet).clamp(0.0, 1.0);
            r
        })
        .filter(|r| r.relevance >= cfg.theta_search)
        .collect();
    kept.sort_by(|a, b| b.relevance.total_cmp(&a.relevance));
    kept
}

pub fn should_compress(memory: &AgentMemory, loop_completed: bool, cfg: &CompressConfig) -> bool {
    memory.total_tokens() > cfg.theta_ctx && loop_completed && !memory.job_in_flight()
}

pub trait Distiller {
    /// A summary of `tokens` about `target_len` tokens long.
    fn distill(&self, tokens: &[TokenId], target_len: usize) -> Result<Vec<TokenId>, String>;
}

/// Keeps `target_len` tokens sampled at even spacing.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubDistiller;

impl Distiller for StubDistiller {
    fn distill(&self, tokens: &[TokenId], target_len: usize) -> Result<Vec<TokenId>, String> {
        let n = tokens.len();
        let m = target_len.min(n);
        Ok((0..m).map(|i| tokens[i * n / m.max(1)]).collect())
    }
}

/// Distiller that always fails.
#[derive(Debug, Clone, Copy, Default)]
pub struct FailingDistiller;

impl Distiller for FailingDistiller {
    fn distill(&self, _tokens: &[TokenId], _target_len: usize) -> Result<Vec<TokenId>, String> {
        Err("distiller unavailable".into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobStatus {
    Pending,
    Done(Vec<TokenId>),
    Failed(String),
}

/// Distillation of an immutable snapshot of the environment partition.
#[derive(Debug, Clone)]
pub struct DistillJob {
    job_id: u64,
    status: JobStatus,
    snapshot_ids: Vec<u64>,
    snapshot_tokens: Vec<TokenId>,
    /// First and last loop covered by the snapshot.
    pub loops: (usize, usize),
    pub submitted_at: f64,
    pub target_len: usize,
}

impl DistillJob {
    pub fn status(&self) -> &JobStatus {
        &self.status
    }

    pub fn is_pending(&self) -> bool {
        self.status == JobStatus::Pending
    }

    pub fn snapshot_ids(&self) -> &[u64] {
        &self.snapshot_ids
    }

    pub fn snapshot_tokens(&self) -> usize {
        self.snapshot_tokens.len()
    }

    /// Runs the distiller over the snapshot; only a pending job changes.
    pub fn execute(&mut self, distiller: &dyn Distiller) {
        if self.is_pending() {
            self.status = match distiller.distill(&self.snapshot_tokens, self.target_len) {
                Ok(summary) => JobStatus::Done(summary),
                Err(e) => JobStatus::Failed(e),
            };
        }
    }
}

/// Snapshots the environment partition into a new pending job.
pub fn submit_distill(memory: &mut AgentMemory, cfg: &CompressConfig, now: f64) -> Result<DistillJob, CompressError> {
    if memory.job_in_flight() {
        return Err(CompressError::JobInFlight);
    }
    if !should_compress(memory, memory.at_boundary(), cfg) {
        return Err(CompressError::NotDue);
    }
    let env: Vec<&MemoryEntry> = memory.environment().collect();
    let snapshot_ids = env.iter().map(|e| e.id).collect();
    let snapshot_tokens: Vec<TokenId> = env.iter().flat_map(|e| e.tokens.iter().copied()).collect();
    let loops = (
        env.first().map(|e| e.loop_index).unwrap_or(0),
        env.last().map(|e| e.loop_index).unwrap_or(0),
    );
    let target_len = (cfg.ratio * snapshot_tokens.len() as f64).ceil() as usize;
    let job_id = memory.next_job;
    memory.next_job += 1;
    memory.job_in_flight = Some(job_id);
    Ok(DistillJob {
        job_id,
        status: JobStatus::Pending,
        snapshot_ids,
        snapshot_tokens,
        loops,
        submitted_at: now,
        target_len,
    })
}

/// Tokens removed and added by one replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApplyReport {
    pub removed_tokens: usize,
    pub summary_tokens: usize,
    /// Timeline position of the inserted summary.
    pub summary_index: usize,
}

/// Replaces the snapshot entries with the finished summary.
pub fn apply_distill(memory: &mut AgentMemory, job: &DistillJob) -> Result<ApplyReport, CompressError> {
    let JobStatus::Done(summary) = &job.status else {
        return Err(CompressError::JobNotDone);
    };
    if memory.job_in_flight != Some(job.job_id) {
        return Err(CompressError::ForeignJob);
    }
    if !memory.at_boundary() {
        return Err(CompressError::MidLoop(memory.loop_index));
    }
    let last_id = job.snapshot_ids.last().copied();
    let mut removed_tokens = 0;
    let mut summary_index = memory.entries.len();
    let mut out = Vec::with_capacity(memory.entries.len());
    let mut ids = job.snapshot_ids.iter().peekable();
    for e in std::mem::take(&mut memory.entries) {
        if ids.peek() == Some(&&e.id) {
            ids.next();
            removed_tokens += e.tokens.len();
            if Some(e.id) == last_id {
                summary_index = out.len();
                out.push(MemoryEntry {
                    id: memory.next_id,
                    kind: EntryKind::Summary,
                    loop_index: e.loop_index,
                    tokens: summary.clone(),
                });
                memory.next_id += 1;
            }
        } else {
            out.push(e);
        }
    }
    if last_id.is_none() {
        summary_index = out.len();
    }
    memory.entries = out;
    memory.environment_tokens = memory.environment_tokens - removed_tokens + if last_id.is_some() { summary.len() } else { 0 };
    memory.job_in_flight = None;
    Ok(ApplyReport {
        removed_tokens,
        summary_tokens: if last_id.is_some() { summary.len() } else { 0 },
        summary_index,
    })
}

/// Releases the in-flight slot held by a failed job; memory is unchanged.
pub fn discard_distill(memory: &mut AgentMemory, job: &DistillJob) -> Result<(), CompressError> {
    if memory.job_in_flight != Some(job.job_id) {
        return Err(CompressError::ForeignJob);
    }
    if job.is_pending() {
        return Err(CompressError::JobNotDone);
    }
    memory.job_in_flight = None;
    Ok(())
}
