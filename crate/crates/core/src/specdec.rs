//! Lossless speculative decoding driven by suffix-automaton drafts.
//!
//! A decode step drafts up to `n_propose - 1` tokens from a
//! [`CompositeDraftSource`], asks the verifier for its greedy continuation
//! and commits the longest agreeing prefix plus the verifier's next token.
//! Every step costs exactly one forward pass, so the output is always the
//! verifier's own greedy output.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sam::{
    sentinel, CompositeDraftSource, DraftPolicy, FrozenAutomaton, SamError, SuffixAutomaton,
    TokenId, DEFAULT_CAPACITY,
};

pub type SessionId = u64;
pub type RequestId = u64;

/// Deterministic greedy verifier.
pub trait TokenOracle {
    /// The `n` tokens greedy decoding would emit after `context`.
    fn next_tokens(&self, context: &[TokenId], n: usize) -> Vec<TokenId>;
}

impl<T: TokenOracle + ?Sized> TokenOracle for &T {
    fn next_tokens(&self, context: &[TokenId], n: usize) -> Vec<TokenId> {
        (**self).next_tokens(context, n)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SpecConfig {
    /// Tokens per step: drafted tokens plus the verifier's bonus token.
    pub n_propose: usize,
    /// Number of historical entries retrieved into the composite source.
    pub top_k: usize,
    /// Largest context (tokens) at which speculation stays enabled.
    pub max_context_len: usize,
    /// Largest running batch at which speculation stays enabled.
    pub max_batch_size: usize,
    /// Shortest suffix match (tokens) allowed to produce a draft.
    pub min_match: usize,
    /// Weight of the live session automaton.
    pub session_weight: f64,
    /// Occurrence used to read a draft continuation.
    pub draft_policy: DraftPolicy,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            n_propose: 4,
            top_k: 3,
            max_context_len: 32 * 1024,
            max_batch_size: 8,
            min_match: 2,
            session_weight: 1.0,
            draft_policy: DraftPolicy::LatestOnly,
        }
    }
}

impl SpecConfig {
    /// Returns the name of the first invalid field with a reason.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.n_propose < 2 {
            return Err(("n_propose", "must be at least 2".into()));
        }
        if self.max_context_len == 0 {
            return Err(("max_context_len", "must be positive".into()));
        }
        if self.max_batch_size == 0 {
            return Err(("max_batch_size", "must be positive".into()));
        }
        if !(self.session_weight.is_finite() && self.session_weight >= 0.0) {
            return Err(("session_weight", "must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("memory repository is full ({capacity} entries)")]
    RepositoryFull { capacity: usize },
    #[error("no forward passes recorded")]
    NoForwardPasses,
    #[error(transparent)]
    Sam(#[from] SamError),
}

#[derive(Debug, Clone)]
pub struct RepositoryEntry {
    pub query: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub session_id: SessionId,
    bigrams: Vec<u64>,
}

/// Append-only store of past (query, response) pairs.
#[derive(Debug, Clone)]
pub struct MemoryRepository {
    entries: Vec<RepositoryEntry>,
    capacity: usize,
}

impl MemoryRepository {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RepositoryEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &RepositoryEntry {
        &self.entries[index]
    }

    /// Appends an entry and returns its index.
    pub fn push(
        &mut self,
        query: Vec<TokenId>,
        response: Vec<TokenId>,
        session_id: SessionId,
    ) -> Result<usize, SpecError> {
        if self.entries.len() >= self.capacity {
            return Err(SpecError::RepositoryFull {
                capacity: self.capacity,
            });
        }
        let bigrams = bigram_set(&query);
        self.entries.push(RepositoryEntry {
            query,
            response,
            session_id,
            bigrams,
        });
        Ok(self.entries.len() - 1)
    }
}

fn bigram_set(tokens: &[TokenId]) -> Vec<u64> {
    let mut set: Vec<u64> = tokens
        .windows(2)
        .map(|w| (u64::from(w[0]) << 32) | u64::from(w[1]))
        .collect();
    set.sort_unstable();
    set.dedup();
    set
}

fn jaccard_sorted(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Jaccard similarity of the token-bigram sets of two sequences.
///
/// Sequences too short to have a bigram are compared by equality.
pub fn bigram_jaccard(a: &[TokenId], b: &[TokenId]) -> f64 {
    let (sa, sb) = (bigram_set(a), bigram_set(b));
    if sa.is_empty() && sb.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    jaccard_sorted(&sa, &sb)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalResult {
    /// Index into the repository.
    pub entry: usize,
    pub similarity: f64,
}

/// Top-`k` repository entries by bigram Jaccard similarity to `query`,
/// skipping entries of `exclude_session`. Ties keep the older entry first.
pub fn retrieve_top_k(
    query: &[TokenId],
    repo: &MemoryRepository,
    k: usize,
    exclude_session: Option<SessionId>,
) -> Vec<RetrievalResult> {
    if k == 0 {
        return Vec::new();
    }
    let q = bigram_set(query);
    let mut scored: Vec<RetrievalResult> = repo
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| Some(e.session_id) != exclude_session)
        .map(|(i, e)| {
            let similarity = if q.is_empty() && e.bigrams.is_empty() {
                if e.query == query {
                    1.0
                } else {
                    0.0
                }
            } else {
                jaccard_sorted(&q, &e.bigrams)
            };
            RetrievalResult {
                entry: i,
                similarity,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.entry.cmp(&b.entry))
    });
    scored.truncate(k);
    scored
}

/// Builds the frozen automaton indexing one repository entry: the query
/// followed directly by its response, so a match at the end of the query
/// drafts the start of the response.
pub fn entry_automaton(entry: &RepositoryEntry) -> Result<FrozenAutomaton, SamError> {
    let mut sam = SuffixAutomaton::new();
    sam.extend_from_slice(&entry.query)?;
    sam.extend_from_slice(&entry.response)?;
    Ok(sam.freeze())
}

/// Composite source for one request.
///
/// The session automaton indexes `session_ctx` followed by a sentinel and
/// then `prompt`. The prompt is inserted as verified output, so on return
/// every member cursor is synchronized to the prompt's suffix.
pub fn build_composite(
    session_ctx: &[TokenId],
    prompt: &[TokenId],
    retrieved: &[RetrievalResult],
    repo: &MemoryRepository,
    cfg: &SpecConfig,
) -> Result<CompositeDraftSource, SamError> {
    let mut session = SuffixAutomaton::new();
    if !session_ctx.is_empty() {
        session.extend_from_slice(session_ctx)?;
        session.extend(sentinel(0))?;
    }
    let mut src =
        CompositeDraftSource::new(session, cfg.session_weight).with_policy(cfg.draft_policy);
    for r in retrieved {
        src.push_frozen(entry_automaton(repo.entry(r.entry))?, r.similarity);
    }
    src.insert_verified(prompt)?;
    Ok(src)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub generated_tokens: u64,
    pub forward_passes: u64,
    pub proposed_spec_tokens: u64,
    pub accepted_spec_tokens: u64,
    pub nonempty_proposal_steps: u64,
}

impl DecodeMetrics {
    pub fn merge(&mut self, other: &DecodeMetrics) {
        self.generated_tokens += other.generated_tokens;
        self.forward_passes += other.forward_passes;
        self.proposed_spec_tokens += other.proposed_spec_tokens;
        self.accepted_spec_tokens += other.accepted_spec_tokens;
        self.nonempty_proposal_steps += other.nonempty_proposal_steps;
    }
}

/// Generated tokens per forward pass.
pub fn ote(metrics: &DecodeMetrics) -> Result<f64, SpecError> {
    if metrics.forward_passes == 0 {
        return Err(SpecError::NoForwardPasses);
    }
    Ok(metrics.generated_tokens as f64 / metrics.forward_passes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRate {
    pub value: f64,
    /// False when no step carried a non-empty proposal; `value` is then 0.
    pub defined: bool,
}

/// Accepted fraction of proposed draft tokens.
pub fn shr(metrics: &DecodeMetrics) -> HitRate {
    if metrics.proposed_spec_tokens == 0 {
        return HitRate {
            value: 0.0,
            defined: false,
        };
    }
    HitRate {
        value: metrics.accepted_spec_tokens as f64 / metrics.proposed_spec_tokens as f64,
        defined: true,
    }
}

/// Outcome of verifying one draft.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub proposed: usize,
    pub accepted: usize,
    /// Accepted draft prefix followed by the verifier's bonus token.
    pub committed: Vec<TokenId>,
}

/// Greedy verification of `draft` against the verifier's continuation.
pub fn verify_draft<O: TokenOracle + ?Sized>(
    oracle: &O,
    context: &[TokenId],
    draft: &[TokenId],
) -> Verification {
    let greedy = oracle.next_tokens(context, draft.len() + 1);
    let lcp = draft
        .iter()
        .zip(&greedy)
        .take_while(|(d, g)| d == g)
        .count();
    let committed = greedy[..(lcp + 1).min(greedy.len())].to_vec();
    Verification {
        proposed: draft.len(),
        accepted: lcp,
        committed,
    }
}

/// One speculative step: draft, verify, commit.
///
/// Appends the committed tokens to `context`, inserts them into `src` and
/// returns them.
pub fn decode_step<O: TokenOracle + ?Sized>(
    oracle: &O,
    src: &mut CompositeDraftSource,
    context: &mut Vec<TokenId>,
    cfg: &SpecConfig,
    metrics: &mut DecodeMetrics,
) -> Result<Vec<TokenId>, SamError> {
    let draft = src.draft(cfg.n_propose.saturating_sub(1), cfg.min_match);
    let v = verify_draft(oracle, context, &draft.tokens);
    metrics.forward_passes += 1;
    metrics.generated_tokens += v.committed.len() as u64;
    if v.proposed > 0 {
        metrics.proposed_spec_tokens += v.proposed as u64;
        metrics.accepted_spec_tokens += v.accepted as u64;
        metrics.nonempty_proposal_steps += 1;
    }
    src.insert_verified(&v.committed)?;
    context.extend_from_slice(&v.committed);
    Ok(v.committed)
}

/// When decoding stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopRule {
    pub max_new_tokens: usize,
    /// Emitting this token ends decoding; it is part of the output.
    pub stop_token: Option<TokenId>,
}

impl StopRule {
    pub fn max_tokens(n: usize) -> Self {
        Self {
            max_new_tokens: n,
            stop_token: None,
        }
    }

    /// Appends tokens to `out` until the rule fires; returns true when done.
    fn absorb(&self, out: &mut Vec<TokenId>, tokens: &[TokenId]) -> bool {
        for &t in tokens {
            if out.len() >= self.max_new_tokens {
                return true;
            }
            out.push(t);
            if Some(t) == self.stop_token {
                return true;
            }
        }
        out.len() >= self.max_new_tokens
    }
}

/// Reference decoding: one verifier token per forward pass.
pub fn greedy_decode<O: TokenOracle + ?Sized>(
    oracle: &O,
    prompt: &[TokenId],
    stop: StopRule,
) -> (Vec<TokenId>, DecodeMetrics) {
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    let mut metrics = DecodeMetrics::default();
    let mut done = stop.max_new_tokens == 0;
    while !done {
        let next = oracle.next_tokens(&context, 1);
        metrics.forward_passes += 1;
        let before = out.len();
        done = stop.absorb(&mut out, &next) || next.is_empty();
        metrics.generated_tokens += (out.len() - before) as u64;
        context.extend_from_slice(&next);
    }
    (out, metrics)
}

/// Speculative decoding until `stop` fires.
pub fn run_decode<O: TokenOracle + ?Sized>(
    oracle: &O,
    src: &mut CompositeDraftSource,
    prompt: &[TokenId],
    stop: StopRule,
    cfg: &SpecConfig,
) -> Result<(Vec<TokenId>, DecodeMetrics), SamError> {
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    let mut metrics = DecodeMetrics::default();
    let mut done = stop.max_new_tokens == 0;
    while !done {
        let mut step = DecodeMetrics::default();
        let committed = decode_step(oracle, src, &mut context, cfg, &mut step)?;
        let before = out.len();
        done = stop.absorb(&mut out, &committed) || committed.is_empty();
        step.generated_tokens = (out.len() - before) as u64;
        metrics.merge(&step);
    }
    Ok((out, metrics))
}

/// Whether speculation should run at this context length and batch size.
pub fn adaptive_enabled(context_len: usize, batch_size: usize, cfg: &SpecConfig) -> bool {
    context_len <= cfg.max_context_len && batch_size <= cfg.max_batch_size
}

#[derive(Debug, Clone)]
pub enum BuildStatus {
    Pending,
    Ready(FrozenAutomaton),
    Failed(String),
}

impl BuildStatus {
    pub fn is_pending(&self) -> bool {
        matches!(self, BuildStatus::Pending)
    }
}

/// Shared completion slot for one background automaton build.
#[derive(Debug, Clone)]
pub struct SamBuildHandle {
    request_id: RequestId,
    slot: Arc<(Mutex<BuildStatus>, Condvar)>,
}

impl SamBuildHandle {
    fn new(request_id: RequestId) -> Self {
        Self {
            request_id,
            slot: Arc::new((Mutex::new(BuildStatus::Pending), Condvar::new())),
        }
    }

    pub fn request_id(&self) -> RequestId {
        self.request_id
    }

    pub fn poll(&self) -> BuildStatus {
        self.slot.0.lock().expect("build slot poisoned").clone()
    }

    /// Blocks until the build leaves `Pending`.
    pub fn wait(&self) -> BuildStatus {
        let (lock, cvar) = &*self.slot;
        let guard = lock.lock().expect("build slot poisoned");
        let guard = cvar
            .wait_while(guard, |s| s.is_pending())
            .expect("build slot poisoned");
        guard.clone()
    }

    /// Moves `Pending` to a final status; later calls are ignored.
    fn complete(&self, status: BuildStatus) -> bool {
        let (lock, cvar) = &*self.slot;
        let mut guard = lock.lock().expect("build slot poisoned");
        if !guard.is_pending() || status.is_pending() {
            return false;
        }
        *guard = status;
        cvar.notify_all();
        true
    }
}

/// Corpus description for a background build.
#[derive(Debug, Clone)]
pub struct BuildRequest {
    pub request_id: RequestId,
    /// Documents joined by sentinels inside one automaton.
    pub documents: Vec<Vec<TokenId>>,
    pub capacity: usize,
}

impl BuildRequest {
    pub fn new(request_id: RequestId, documents: Vec<Vec<TokenId>>) -> Self {
        Self {
            request_id,
            documents,
            capacity: DEFAULT_CAPACITY,
        }
    }
}

fn build_frozen(req: &BuildRequest) -> BuildStatus {
    let mut sam = SuffixAutomaton::new().with_capacity_limit(req.capacity);
    for (i, doc) in req.documents.iter().enumerate() {
        let step = if i > 0 {
            sam.extend(sentinel((i - 1) as u16))
        } else {
            Ok(())
        };
        if let Err(e) = step.and_then(|_| sam.extend_from_slice(doc)) {
            return BuildStatus::Failed(e.to_string());
        }
    }
    BuildStatus::Ready(sam.freeze())
}

/// Background thread that builds automata in submission order.
pub struct BuildWorker {
    tx: Option<mpsc::Sender<(BuildRequest, SamBuildHandle)>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Default for BuildWorker {
    fn default() -> Self {
        Self::new()
    }
}

impl BuildWorker {
    pub fn new() -> Self {
        let (tx, rx) = mpsc::channel::<(BuildRequest, SamBuildHandle)>();
        let thread = thread::Builder::new()
            .name("sam-build".into())
            .spawn(move || {
                for (req, handle) in rx {
                    handle.complete(build_frozen(&req));
                }
            })
            .expect("spawn build worker");
        Self {
            tx: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn enqueue_build(&self, req: BuildRequest) -> SamBuildHandle {
        let handle = SamBuildHandle::new(req.request_id);
        let sent = self
            .tx
            .as_ref()
            .map(|tx| tx.send((req, handle.clone())).is_ok())
            .unwrap_or(false);
        if !sent {
            handle.complete(BuildStatus::Failed("build worker stopped".into()));
        }
        handle
    }
}

impl Drop for BuildWorker {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Single-threaded FIFO build queue drained explicitly by the caller.
///
/// Used where builds must complete at caller-chosen points, for example in
/// virtual-time simulation.
#[derive(Debug, Default)]
pub struct BuildQueue {
    waiting: VecDeque<(BuildRequest, SamBuildHandle)>,
}

impl BuildQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue_build(&mut self, req: BuildRequest) -> SamBuildHandle {
        let handle = SamBuildHandle::new(req.request_id);
        self.waiting.push_back((req, handle.clone()));
        handle
    }

    pub fn len(&self) -> usize {
        self.waiting.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waiting.is_empty()
    }

    /// Completes the oldest queued build; returns its request id.
    pub fn run_next(&mut self) -> Option<RequestId> {
        let (req, handle) = self.waiting.pop_front()?;
        handle.complete(build_frozen(&req));
        Some(req.request_id)
    }
}

/// Request-level decoder that falls back to plain decoding while its
/// automaton build is pending, after a failed build, or when the adaptive
/// switch is off.
pub struct GatedDecoder {
    context: Vec<TokenId>,
    prompt_len: usize,
    handle: Option<SamBuildHandle>,
    source: Option<CompositeDraftSource>,
    frozen_members: Vec<(FrozenAutomaton, f64)>,
    disabled: bool,
    pub metrics: DecodeMetrics,
}

impl GatedDecoder {
    /// `handle` delivers the automaton over the prompt; `frozen_members`
    /// are retrieved automata joined once the handle is ready.
    pub fn new(
        prompt: &[TokenId],
        handle: SamBuildHandle,
        frozen_members: Vec<(FrozenAutomaton, f64)>,
    ) -> Self {
        Self {
            context: prompt.to_vec(),
            prompt_len: prompt.len(),
            handle: Some(handle),
            source: None,
            frozen_members,
            disabled: false,
            metrics: DecodeMetrics::default(),
        }
    }

    pub fn output(&self) -> &[TokenId] {
        &self.context[self.prompt_len..]
    }

    pub fn speculating(&self) -> bool {
        self.source.is_some()
    }

    pub fn speculation_disabled(&self) -> bool {
        self.disabled
    }

    fn refresh(&mut self, cfg: &SpecConfig) -> Result<(), SamError> {
        let Some(handle) = &self.handle else {
            return Ok(());
        };
        match handle.poll() {
            BuildStatus::Pending => {}
            BuildStatus::Failed(_) => {
                self.handle = None;
                self.disabled = true;
            }
            BuildStatus::Ready(frozen) => {
                self.handle = None;
                // The built automaton covers the prompt and becomes the live
                // session member; tokens decoded meanwhile are inserted on top.
                let session = SuffixAutomaton::clone(&frozen);
                let mut src = CompositeDraftSource::new(session, cfg.session_weight)
                    .with_policy(cfg.draft_policy);
                for (m, w) in self.frozen_members.drain(..) {
                    src.push_frozen(m, w);
                }
                src.sync(&self.context[..self.prompt_len]);
                src.insert_verified(&self.context[self.prompt_len..])?;
                self.source = Some(src);
            }
        }
        Ok(())
    }

    /// One forward pass; returns the committed tokens.
    pub fn step<O: TokenOracle + ?Sized>(
        &mut self,
        oracle: &O,
        cfg: &SpecConfig,
        batch_size: usize,
    ) -> Result<Vec<TokenId>, SamError> {
        self.refresh(cfg)?;
        let speculate = !self.disabled
            && self.source.is_some()
            && adaptive_enabled(self.context.len(), batch_size, cfg);
        if speculate {
            let src = self.source.as_mut().expect("checked above");
            return decode_step(oracle, src, &mut self.context, cfg, &mut self.metrics);
        }
        let next = oracle.next_tokens(&self.context, 1);
        self.metrics.forward_passes += 1;
        self.metrics.generated_tokens += next.len() as u64;
        if let Some(src) = self.source.as_mut() {
            src.insert_verified(&next)?;
        }
        self.context.extend_from_slice(&next);
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a fixed cycle: the next token depends only on context length.
    struct Cycle(Vec<TokenId>);

    impl TokenOracle for Cycle {
        fn next_tokens(&self, context: &[TokenId], n: usize) -> Vec<TokenId> {
            (0..n)
                .map(|i| self.0[(context.len() + i) % self.0.len()])
                .collect()
        }
    }

    /// Emits a fixed script after the prompt, then `fill` forever.
    struct Script {
        prompt_len: usize,
        script: Vec<TokenId>,
        fill: TokenId,
    }

    impl TokenOracle for Script {
        fn next_tokens(&self, context: &[TokenId], n: usize) -> Vec<TokenId> {
            (0..n)
                .map(|i| {
                    let idx = context.len() + i - self.prompt_len;
                    self.script.get(idx).copied().unwrap_or(self.fill)
                })
                .collect()
        }
    }

    fn cfg() -> SpecConfig {
        SpecConfig {
            draft_policy: DraftPolicy::LatestThenEarliest,
            ..SpecConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        assert!(SpecConfig::default().validate().is_ok());
        let bad = SpecConfig {
            n_propose: 1,
            ..SpecConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().0, "n_propose");
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(bigram_jaccard(&[1, 2, 3, 4], &[1, 2, 3, 5]), 0.5);
        assert_eq!(bigram_jaccard(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(bigram_jaccard(&[1, 2, 3], &[7, 8, 9]), 0.0);
    }

    #[test]
    fn retrieval_ranks_and_excludes() {
        let mut repo = MemoryRepository::new(10);
        repo.push(vec![1, 2, 3, 5], vec![9], 1).unwrap();
        repo.push(vec![1, 2, 3, 4], vec![9], 2).unwrap();
        repo.push(vec![1, 2, 3, 4], vec![9], 3).unwrap();
        repo.push(vec![7, 8], vec![9], 4).unwrap();
        let r = retrieve_top_k(&[1, 2, 3, 4], &repo, 3, Some(3));
        assert_eq!(r.len(), 3);
        assert_eq!(r[0], RetrievalResult { entry: 1, similarity: 1.0 });
        assert_eq!(r[1], RetrievalResult { entry: 0, similarity: 0.5 });
        assert_eq!(r[2].similarity, 0.0);
        assert!(retrieve_top_k(&[1, 2], &MemoryRepository::new(1), 3, None).is_empty());
        assert!(retrieve_top_k(&[1, 2], &repo, 0, None).is_empty());
    }

    #[test]
    fn retrieval_ties_prefer_older_entries() {
        let mut repo = MemoryRepository::new(10);
        for s in 0..4 {
            repo.push(vec![5, 6], vec![], s).unwrap();
        }
        let r = retrieve_top_k(&[5, 6], &repo, 2, None);
        assert_eq!(r.iter().map(|x| x.entry).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn repository_rejects_past_capacity() {
        let mut repo = MemoryRepository::new(1);
        repo.push(vec![1], vec![2], 0).unwrap();
        assert_eq!(
            repo.push(vec![1], vec![2], 0),
            Err(SpecError::RepositoryFull { capacity: 1 })
        );
    }

    #[test]
    fn empty_draft_emits_one_token() {
        let oracle = Cycle(vec![10, 11, 12]);
        let mut src = build_composite(&[], &[1, 2], &[], &MemoryRepository::new(0), &cfg()).unwrap();
        let mut ctx = vec![1, 2];
        let mut m = DecodeMetrics::default();
        let out = decode_step(&oracle, &mut src, &mut ctx, &cfg(), &mut m).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(m.forward_passes, 1);
        assert_eq!(m.nonempty_proposal_steps, 0);
    }

    #[test]
    fn fully_accepted_draft_commits_four_tokens() {
        // Corpus "1 2 3 4 5 9 1 2": suffix "1 2" drafts "3 4 5".
        let prompt = vec![1, 2, 3, 4, 5, 9, 1, 2];
        let oracle = Script {
            prompt_len: prompt.len(),
            script: vec![3, 4, 5, 9],
            fill: 0,
        };
        let mut src = build_composite(&[], &prompt, &[], &MemoryRepository::new(0), &cfg()).unwrap();
        let mut ctx = prompt.clone();
        let mut m = DecodeMetrics::default();
        let out = decode_step(&oracle, &mut src, &mut ctx, &cfg(), &mut m).unwrap();
        assert_eq!(out, vec![3, 4, 5, 9]);
        assert_eq!(m.forward_passes, 1);
        assert_eq!(m.accepted_spec_tokens, 3);
        assert_eq!(ote(&m).unwrap(), 4.0);
    }

    #[test]
    fn partial_acceptance_commits_prefix_plus_bonus() {
        let prompt = vec![1, 2, 3, 4, 5, 9, 1, 2];
        let oracle = Script {
            prompt_len: prompt.len(),
            script: vec![3, 7, 7],
            fill: 0,
        };
        let mut src = build_composite(&[], &prompt, &[], &MemoryRepository::new(0), &cfg()).unwrap();
        let mut ctx = prompt.clone();
        let mut m = DecodeMetrics::default();
        let out = decode_step(&oracle, &mut src, &mut ctx, &cfg(), &mut m).unwrap();
        assert_eq!(out, vec![3, 7]);
        assert_eq!(m.proposed_spec_tokens, 3);
        assert_eq!(m.accepted_spec_tokens, 1);
        assert_eq!(src.session().corpus(), &ctx[..]);
    }

    #[test]
    fn ote_and_shr_definitions() {
        let m = DecodeMetrics {
            generated_tokens: 100,
            forward_passes: 25,
            proposed_spec_tokens: 60,
            accepted_spec_tokens: 45,
            nonempty_proposal_steps: 20,
        };
        assert_eq!(ote(&m).unwrap(), 4.0);
        assert_eq!(shr(&m), HitRate { value: 0.75, defined: true });
        assert_eq!(ote(&DecodeMetrics::default()), Err(SpecError::NoForwardPasses));
        assert!(!shr(&DecodeMetrics::default()).defined);
    }

    #[test]
    fn greedy_decode_has_unit_ote() {
        let oracle = Cycle(vec![4, 5, 6]);
        let (out, m) = greedy_decode(&oracle, &[1], StopRule::max_tokens(9));
        assert_eq!(out.len(), 9);
        assert_eq!(ote(&m).unwrap(), 1.0);
    }

    #[test]
    fn stop_token_ends_output() {
        let oracle = Cycle(vec![4, 5, 6, 7]);
        let stop = StopRule {
            max_new_tokens: 100,
            stop_token: Some(6),
        };
        let (g, _) = greedy_decode(&oracle, &[1, 2, 3, 4, 5, 6, 7, 4, 5], stop);
        let mut src = build_composite(
            &[],
            &[1, 2, 3, 4, 5, 6, 7, 4, 5],
            &[],
            &MemoryRepository::new(0),
            &cfg(),
        )
        .unwrap();
        let (s, _) = run_decode(&oracle, &mut src, &[1, 2, 3, 4, 5, 6, 7, 4, 5], stop, &cfg()).unwrap();
        assert_eq!(g, s);
        assert_eq!(g.last(), Some(&6));
    }

    #[test]
    fn replayed_corpus_hits_every_draft() {
        let cycle: Vec<TokenId> = (100..140).collect();
        let oracle = Cycle(cycle.clone());
        // Prompt is two full periods, so the continuation is a verbatim replay.
        let prompt: Vec<TokenId> = cycle.iter().chain(&cycle).copied().collect();
        let mut src = build_composite(&[], &prompt, &[], &MemoryRepository::new(0), &cfg()).unwrap();
        let (out, m) = run_decode(&oracle, &mut src, &prompt, StopRule::max_tokens(60), &cfg()).unwrap();
        assert_eq!(out, greedy_decode(&oracle, &prompt, StopRule::max_tokens(60)).0);
        assert_eq!(shr(&m).value, 1.0);
        assert_eq!(ote(&m).unwrap(), 4.0);
    }

    #[test]
    fn adaptive_switch_is_inclusive() {
        let c = SpecConfig::default();
        assert!(adaptive_enabled(1000, 1, &c));
        assert!(!adaptive_enabled(1000, 9, &c));
        assert!(adaptive_enabled(c.max_context_len, c.max_batch_size, &c));
        assert!(!adaptive_enabled(c.max_context_len + 1, 1, &c));
    }

    #[test]
    fn build_queue_is_fifo_and_completes_once() {
        let mut q = BuildQueue::new();
        let a = q.enqueue_build(BuildRequest::new(1, vec![vec![1, 2, 3]]));
        let b = q.enqueue_build(BuildRequest::new(2, vec![vec![4, 5]]));
        assert!(a.poll().is_pending() && b.poll().is_pending());
        assert_eq!(q.run_next(), Some(1));
        assert!(matches!(a.poll(), BuildStatus::Ready(_)));
        assert!(b.poll().is_pending());
        assert!(!a.complete(BuildStatus::Failed("late".into())));
        assert!(matches!(a.poll(), BuildStatus::Ready(_)));
        assert_eq!(q.run_next(), Some(2));
        assert_eq!(q.run_next(), None);
    }

    #[test]
    fn failed_build_reports_failure() {
        let mut q = BuildQueue::new();
        let mut req = BuildRequest::new(1, vec![vec![1, 2, 3]]);
        req.capacity = 2;
        let h = q.enqueue_build(req);
        q.run_next();
        assert!(matches!(h.poll(), BuildStatus::Failed(_)));
    }

    #[test]
    fn worker_thread_builds_in_order() {
        let worker = BuildWorker::new();
        let handles: Vec<_> = (0..5)
            .map(|i| worker.enqueue_build(BuildRequest::new(i, vec![vec![1, 2, 3, i as u32]])))
            .collect();
        for (i, h) in handles.iter().enumerate() {
            assert_eq!(h.request_id(), i as u64);
            match h.wait() {
                BuildStatus::Ready(sam) => assert_eq!(sam.corpus(), &[1, 2, 3, i as u32]),
                other => panic!("unexpected status {other:?}"),
            }
        }
    }

    #[test]
    fn gated_decoder_plain_until_ready_then_lossless() {
        let cycle: Vec<TokenId> = (200..230).collect();
        let oracle = Cycle(cycle.clone());
        let prompt: Vec<TokenId> = cycle.iter().chain(&cycle).copied().collect();
        let mut q = BuildQueue::new();
        let h = q.enqueue_build(BuildRequest::new(7, vec![prompt.clone()]));
        let mut dec = GatedDecoder::new(&prompt, h, Vec::new());
        let c = cfg();
        for _ in 0..3 {
            assert_eq!(dec.step(&oracle, &c, 1).unwrap().len(), 1);
        }
        assert_eq!(dec.metrics.nonempty_proposal_steps, 0);
        q.run_next();
        while dec.output().len() < 50 {
            dec.step(&oracle, &c, 1).unwrap();
        }
        assert!(dec.speculating());
        let want = greedy_decode(&oracle, &prompt, StopRule::max_tokens(dec.output().len())).0;
        assert_eq!(dec.output(), &want[..]);
        assert!(ote(&dec.metrics).unwrap() > 1.5);
    }

    #[test]
    fn gated_decoder_failure_disables_speculation() {
        let oracle = Cycle(vec![1, 2, 3]);
        let mut q = BuildQueue::new();
        let mut req = BuildRequest::new(1, vec![vec![1, 2, 3, 1, 2, 3]]);
        req.capacity = 1;
        let h = q.enqueue_build(req);
        q.run_next();
        let mut dec = GatedDecoder::new(&[1, 2, 3, 1, 2, 3], h, Vec::new());
        for _ in 0..5 {
            dec.step(&oracle, &cfg(), 1).unwrap();
        }
        assert!(dec.speculation_disabled());
        assert_eq!(ote(&dec.metrics).unwrap(), 1.0);
    }
}
