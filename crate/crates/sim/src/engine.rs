//! The discrete-event simulation: agent sessions driving two serving
//! engines (large and small model) with continuous batching, prefix-cached
//! KV blocks, cache-aware admission and speculative decoding.

use std::collections::HashMap;

use agentinfer_core::collab::{CollabController, ProgressSignal, Role, StepKind};
use agentinfer_core::compress::{
    apply_distill, discard_distill, rank_filter, should_compress, submit_distill, AgentMemory,
    DistillJob, EntryKind, JobStatus, MemoryEntry, OverlapRanker, StubDistiller,
};
use agentinfer_core::kvcache::{block_hashes, blocks_for, BlockHash, BlockPool};
use agentinfer_core::sam::{CompositeDraftSource, FrozenAutomaton, SuffixAutomaton};
use agentinfer_core::sched::{select, update_lambda, QueueEntry, SchedulerParams, SchedulerState};
use agentinfer_core::specdec::{
    adaptive_enabled, entry_automaton, retrieve_top_k, verify_draft, DecodeMetrics,
    MemoryRepository, SpecConfig, TokenOracle,
};
use agentinfer_core::TokenId;
use thiserror::Error;

use crate::clock::SimClock;
use crate::config::{BuildMode, ConfigIssue, DocQaMode, OracleMode, ScenarioConfig};
use crate::oracle::{MockOracle, MARKER};
use crate::report::{
    Admission, LambdaSample, MetricsReport, RequestClass, RequestKind, RequestRecord, Summary,
    TaskRecord,
};
use crate::workload::{TaskPlan, Workload};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigIssue>),
    #[error("contract violation: {0}")]
    Contract(String),
}

const LARGE: usize = 0;
const SMALL: usize = 1;
const ENGINE_NAMES: [&str; 2] = ["large", "small"];

fn engine_of(role: Role) -> usize {
    match role {
        Role::Large => LARGE,
        Role::Small => SMALL,
    }
}

#[derive(Debug)]
enum Event {
    SessionStart(usize),
    EngineDone(usize),
    ProgressDone(usize),
    SearchDone(usize),
    PageCrawled { session: usize, slot: usize },
    QaDone { session: usize, slot: usize, answer: Vec<TokenId> },
    DistillDone { session: usize, task: usize },
}

struct Request {
    id: u64,
    session: usize,
    task: usize,
    kind: RequestKind,
    slot: usize,
    prompt_len: usize,
    hashes: Vec<BlockHash>,
    extra_blocks: usize,
    output_len: usize,
    context: Vec<TokenId>,
    out: Vec<TokenId>,
    arrival: f64,
    arrival_seq: u64,
    first_token_at: f64,
    hit: usize,
    need: usize,
    src: Option<CompositeDraftSource>,
    spec_ready_at: f64,
    metrics: DecodeMetrics,
}

enum Iteration {
    Prefill(Vec<u64>),
    Decode(Vec<u64>),
}

struct Engine {
    pool: BlockPool,
    waiting: Vec<u64>,
    running: Vec<u64>,
    busy: bool,
    sched: SchedulerState,
    speed: f64,
    build_free_at: f64,
    current: Option<Iteration>,
}

#[derive(Clone, Copy)]
struct Step {
    role: Role,
    kind: RequestKind,
}

#[derive(Default)]
struct Session {
    task: usize,
    plan: Option<TaskPlan>,
    memory: AgentMemory,
    ctl: Option<CollabController>,
    loops_done: usize,
    loops_target: usize,
    step: Option<Step>,
    answered: bool,
    pending_progress: Option<(ProgressSignal, bool)>,
    task_start: f64,
    pages: Vec<Option<Vec<TokenId>>>,
    page_docs: Vec<usize>,
    pages_pending: usize,
    job: Option<DistillJob>,
    job_ready: bool,
    sam: Option<SuffixAutomaton>,
    last_engine: usize,
    applies: usize,
    reasoning_intact: bool,
    large_steps: usize,
    small_steps: usize,
}

/// Counters the report needs beyond per-request records.
#[derive(Default)]
struct Counters {
    distill_failures: usize,
    distill_stalls: usize,
    mid_loop_applies: usize,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    seed: u64,
    label: String,
    spec: SpecConfig,
    params: SchedulerParams,
    clock: SimClock<Event>,
    oracle: MockOracle,
    work: Workload,
    engines: Vec<Engine>,
    sessions: Vec<Session>,
    requests: HashMap<u64, Request>,
    next_request: u64,
    repo: MemoryRepository,
    repo_sams: Vec<Option<FrozenAutomaton>>,
    records: Vec<RequestRecord>,
    tasks: Vec<TaskRecord>,
    lambda_series: Vec<LambdaSample>,
    admissions: Vec<Admission>,
    counters: Counters,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, seed: u64, label: impl Into<String>) -> Result<Self, SimError> {
        cfg.validate().map_err(SimError::Config)?;
        let work = Workload::new(seed, cfg);
        let oracle = match cfg.oracle.mode {
            OracleMode::Markov => MockOracle::new(seed, &cfg.oracle),
            OracleMode::Replay => {
                // Replays the first task's prompt: a repetitive prompt keeps repeating.
                let corpus = work.task(0, 0).prompt;
                MockOracle::with_replay(seed, &cfg.oracle, corpus)
            }
        };
        let engines = [1.0, cfg.latency.small_speed_factor]
            .into_iter()
            .map(|speed| Engine {
                pool: BlockPool::new(cfg.pool.n, cfg.pool.tpb),
                waiting: Vec::new(),
                running: Vec::new(),
                busy: false,
                sched: SchedulerState::default(),
                speed,
                build_free_at: 0.0,
                current: None,
            })
            .collect();
        let sessions = (0..cfg.workload.sessions).map(|_| Session::default()).collect();
        Ok(Self {
            spec: cfg.spec.core(),
            params: cfg.sched.params(cfg.pool.tpb),
            cfg: cfg.clone(),
            seed,
            label: label.into(),
            clock: SimClock::new(),
            oracle,
            work,
            engines,
            sessions,
            requests: HashMap::new(),
            next_request: 0,
            repo: MemoryRepository::new(cfg.spec.memory_capacity),
            repo_sams: Vec::new(),
            records: Vec::new(),
            tasks: Vec::new(),
            lambda_series: Vec::new(),
            admissions: Vec::new(),
            counters: Counters::default(),
        })
    }

    pub fn run(mut self) -> Result<MetricsReport, SimError> {
        for s in 0..self.sessions.len() {
            let at = s as f64 * self.cfg.workload.session_stagger_s;
            self.clock.schedule(at, Event::SessionStart(s));
        }
        while let Some((_, event)) = self.clock.pop() {
            self.handle(event)?;
        }
        for (i, e) in self.engines.iter().enumerate() {
            if !e.waiting.is_empty() || !e.running.is_empty() {
                return Err(SimError::Contract(format!(
                    "engine {} stopped with {} waiting and {} running requests",
                    ENGINE_NAMES[i],
                    e.waiting.len(),
                    e.running.len()
                )));
            }
        }
        Ok(self.report())
    }

    fn now(&self) -> f64 {
        self.clock.now()
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::SessionStart(s) => self.start_task(s),
            Event::EngineDone(e) => self.end_iteration(e),
            Event::ProgressDone(s) => self.after_progress(s),
            Event::SearchDone(s) => self.on_search(s),
            Event::PageCrawled { session, slot } => self.on_crawled(session, slot),
            Event::QaDone {
                session,
                slot,
                answer,
            } => self.on_qa(session, slot, answer),
            Event::DistillDone { session, task } => {
                let sess = &mut self.sessions[session];
                if sess.task == task {
                    if let Some(job) = sess.job.as_mut() {
                        job.execute(&StubDistiller);
                        sess.job_ready = true;
                    }
                }
                Ok(())
            }
        }
    }

    // ---- agent loop ----

    fn start_task(&mut self, s: usize) -> Result<(), SimError> {
        let w = &self.cfg.workload;
        if self.sessions[s].task >= w.tasks_per_session {
            return Ok(());
        }
        let plan = self.work.task(s, self.sessions[s].task);
        let inflation = if self.cfg.compress.enabled {
            w.turn_inflation
        } else {
            0.0
        };
        let loops_target = (w.loops_per_task as f64 * (1.0 + inflation)).round() as usize;
        let now = self.now();
        let collab = self.cfg.collab.enabled.then(|| CollabController::new(self.cfg.collab.core()));
        let sess = &mut self.sessions[s];
        let task = sess.task;
        *sess = Session {
            task,
            memory: AgentMemory::new(),
            ctl: collab,
            loops_target,
            task_start: now,
            reasoning_intact: true,
            ..Session::default()
        };
        sess.memory.push(EntryKind::Prompt, plan.prompt.clone());
        sess.plan = Some(plan);
        self.think_next(s)
    }

    fn think_next(&mut self, s: usize) -> Result<(), SimError> {
        let solo_role = self.cfg.collab.solo_role;
        let sess = &mut self.sessions[s];
        let answer_due = sess.loops_done >= sess.loops_target;
        let step = match sess.ctl.as_mut() {
            Some(ctl) => match ctl.next_step(sess.answered) {
                Ok(None) => None,
                Ok(Some(p)) => Some(Step {
                    role: p.role,
                    kind: match p.kind {
                        StepKind::Think => RequestKind::Warmup,
                        StepKind::ThinkAndTools if answer_due => RequestKind::Answer,
                        StepKind::ThinkAndTools => RequestKind::Think,
                    },
                }),
                Err(e) => return Err(SimError::Contract(e.to_string())),
            },
            None if sess.answered => None,
            None => Some(Step {
                role: solo_role,
                kind: if answer_due {
                    RequestKind::Answer
                } else {
                    RequestKind::Think
                },
            }),
        };
        let Some(step) = step else {
            return self.finish_task(s);
        };
        sess.step = Some(step);
        match step.role {
            Role::Large => sess.large_steps += 1,
            Role::Small => sess.small_steps += 1,
        }
        if step.kind == RequestKind::Think {
            sess.memory.begin_loop();
        }
        let mut prompt = sess.memory.flatten();
        prompt.push(MARKER);
        let output_len = match step.kind {
            RequestKind::Answer => self.cfg.workload.answer_tokens,
            _ => self.cfg.workload.think_tokens,
        };
        let engine = engine_of(step.role);
        sess.last_engine = engine;
        self.submit(s, step.kind, 0, engine, prompt, output_len)
    }

    fn on_think_done(&mut self, s: usize, req: Request) -> Result<(), SimError> {
        let collab = self.cfg.collab.clone();
        let (lat_large, lat_small) = (
            self.cfg.latency.progress_check_large,
            self.cfg.latency.progress_check_small,
        );
        let sess = &mut self.sessions[s];
        let step = sess.step.expect("a think step is in flight");
        let mut entry = Vec::with_capacity(req.out.len() + 1);
        entry.push(MARKER);
        entry.extend_from_slice(&req.out);
        sess.memory.push(EntryKind::Think, entry);
        if let Some(src) = req.src {
            sess.sam = Some(src.into_session());
        }
        if sess.ctl.is_none() {
            return self.after_progress(s);
        }
        let plan = sess.plan.as_ref().expect("task is running");
        let is_final = step.kind == RequestKind::Answer;
        let value = match step.kind {
            RequestKind::Answer => true,
            _ => {
                let skill = match step.role {
                    Role::Large => collab.large_skill,
                    Role::Small => collab.small_skill,
                };
                let slot = if step.kind == RequestKind::Warmup {
                    usize::MAX - sess.large_steps
                } else {
                    sess.loops_done
                };
                self.work.difficulty(plan, slot) < skill
            }
        };
        sess.pending_progress = Some((ProgressSignal::of(value), is_final));
        let delay = match step.role {
            Role::Large => lat_large,
            Role::Small => lat_small,
        };
        self.clock.schedule_in(delay, Event::ProgressDone(s));
        Ok(())
    }

    fn after_progress(&mut self, s: usize) -> Result<(), SimError> {
        let sess = &mut self.sessions[s];
        let step = sess.step.expect("a think step is in flight");
        if let (Some(ctl), Some((signal, is_final))) = (sess.ctl.as_mut(), sess.pending_progress.take()) {
            ctl.record(signal, is_final)
                .map_err(|e| SimError::Contract(e.to_string()))?;
        }
        match step.kind {
            RequestKind::Answer => {
                sess.answered = true;
                self.think_next(s)
            }
            RequestKind::Warmup => self.think_next(s),
            RequestKind::Think => {
                let plan = sess.plan.as_ref().expect("task is running");
                let act = self.work.act(plan, sess.loops_done);
                let latency = self.work.tool_latency(
                    "web_search",
                    &[s as u64, sess.task as u64, sess.loops_done as u64],
                );
                sess.memory.push(EntryKind::Act, act);
                self.clock.schedule_in(latency, Event::SearchDone(s));
                Ok(())
            }
            RequestKind::DocQa => unreachable!("document QA is not a think step"),
        }
    }

    fn on_search(&mut self, s: usize) -> Result<(), SimError> {
        let sess = &self.sessions[s];
        let plan = sess.plan.as_ref().expect("task is running");
        let hits = self.work.search(plan, sess.loops_done);
        let docs: Vec<usize> = if self.cfg.compress.enabled {
            let results = hits.iter().map(|h| h.result.clone()).collect();
            rank_filter(results, &plan.query, &OverlapRanker, &self.cfg.compress.core())
                .iter()
                .map(|r| {
                    hits.iter()
                        .find(|h| h.result.url == r.url)
                        .expect("kept results come from the search")
                        .doc
                })
                .collect()
        } else {
            hits.iter().map(|h| h.doc).collect()
        };
        let keys = [s as u64, sess.task as u64, sess.loops_done as u64];
        let sess = &mut self.sessions[s];
        sess.pages = vec![None; docs.len()];
        sess.pages_pending = docs.len();
        sess.page_docs = docs;
        if sess.pages_pending == 0 {
            return self.end_loop(s);
        }
        for slot in 0..sess.page_docs.len() {
            let latency = self
                .work
                .tool_latency("url_crawler", &[keys[0], keys[1], keys[2], slot as u64]);
            self.clock
                .schedule_in(latency, Event::PageCrawled { session: s, slot });
        }
        Ok(())
    }

    fn on_crawled(&mut self, s: usize, slot: usize) -> Result<(), SimError> {
        let sess = &self.sessions[s];
        let doc = sess.page_docs[slot];
        let plan = sess.plan.as_ref().expect("task is running");
        let mut prompt = self.work.pool().doc(doc);
        prompt.extend_from_slice(&plan.query);
        prompt.push(MARKER);
        let qa_tokens = self.cfg.workload.qa_tokens;
        match self.cfg.workload.doc_qa {
            DocQaMode::Llm => self.submit(s, RequestKind::DocQa, slot, LARGE, prompt, qa_tokens),
            DocQaMode::Latency => {
                let answer = self.oracle.next_tokens(&prompt, qa_tokens);
                let keys = [s as u64, sess.task as u64, sess.loops_done as u64, slot as u64];
                let latency = self.work.tool_latency("document_qa", &keys);
                self.clock.schedule_in(
                    latency,
                    Event::QaDone {
                        session: s,
                        slot,
                        answer,
                    },
                );
                Ok(())
            }
        }
    }

    fn on_qa(&mut self, s: usize, slot: usize, answer: Vec<TokenId>) -> Result<(), SimError> {
        let mut page = self.work.excerpt(self.sessions[s].page_docs[slot]);
        page.extend_from_slice(&answer);
        let sess = &mut self.sessions[s];
        sess.pages[slot] = Some(page);
        sess.pages_pending -= 1;
        if sess.pages_pending > 0 {
            return Ok(());
        }
        for page in std::mem::take(&mut sess.pages) {
            sess.memory
                .push(EntryKind::ToolResult, page.expect("every page answered"));
        }
        self.end_loop(s)
    }

    fn end_loop(&mut self, s: usize) -> Result<(), SimError> {
        let sess = &mut self.sessions[s];
        sess.memory.end_loop();
        sess.loops_done += 1;
        if self.cfg.compress.enabled {
            self.compress_boundary(s)?;
        }
        self.think_next(s)
    }

    fn compress_boundary(&mut self, s: usize) -> Result<(), SimError> {
        let cfg = self.cfg.compress.core();
        let now = self.now();
        let sess = &mut self.sessions[s];
        if sess.job_ready {
            let job = sess.job.take().expect("a ready job exists");
            sess.job_ready = false;
            match job.status() {
                JobStatus::Done(_) => {
                    if !sess.memory.at_boundary() {
                        self.counters.mid_loop_applies += 1;
                    }
                    let before: Vec<MemoryEntry> = sess.memory.reasoning().cloned().collect();
                    apply_distill(&mut sess.memory, &job)
                        .map_err(|e| SimError::Contract(e.to_string()))?;
                    let after: Vec<MemoryEntry> = sess.memory.reasoning().cloned().collect();
                    sess.reasoning_intact &= before == after;
                    sess.applies += 1;
                    sess.sam = None;
                    // The compressed context is precomputed off the critical path.
                    let mut context = sess.memory.flatten();
                    context.push(MARKER);
                    let hashes = block_hashes(&context, self.cfg.pool.tpb);
                    self.engines[sess.last_engine].pool.prewarm(&hashes);
                }
                JobStatus::Failed(_) => {
                    self.counters.distill_failures += 1;
                    discard_distill(&mut sess.memory, &job)
                        .map_err(|e| SimError::Contract(e.to_string()))?;
                }
                JobStatus::Pending => unreachable!("ready jobs have executed"),
            }
        }
        if should_compress(&sess.memory, true, &cfg) {
            let job = submit_distill(&mut sess.memory, &cfg, now)
                .map_err(|e| SimError::Contract(e.to_string()))?;
            sess.job = Some(job);
            let task = sess.task;
            self.clock
                .schedule_in(cfg.latency_s, Event::DistillDone { session: s, task });
        }
        Ok(())
    }

    fn finish_task(&mut self, s: usize) -> Result<(), SimError> {
        let now = self.now();
        let sess = &mut self.sessions[s];
        let plan = sess.plan.take().expect("task is running");
        let (large, small, esc) = match &sess.ctl {
            Some(ctl) => {
                let t = ctl.trace();
                (t.large_steps, t.small_steps, t.escalations)
            }
            None => (sess.large_steps, sess.small_steps, 0),
        };
        self.tasks.push(TaskRecord {
            session: s,
            task: sess.task,
            long: plan.long,
            start: sess.task_start,
            end: now,
            e2e: now - sess.task_start,
            loops: sess.loops_done,
            large_steps: large,
            small_steps: small,
            escalations: esc,
            peak_context_tokens: sess.memory.peak_tokens(),
            final_context_tokens: sess.memory.total_tokens(),
            distill_applies: sess.applies,
            reasoning_intact: sess.reasoning_intact,
        });
        sess.task += 1;
        self.start_task(s)
    }

    // ---- serving ----

    fn submit(
        &mut self,
        session: usize,
        kind: RequestKind,
        slot: usize,
        engine: usize,
        prompt: Vec<TokenId>,
        output_len: usize,
    ) -> Result<(), SimError> {
        let tpb = self.cfg.pool.tpb;
        let total = blocks_for(prompt.len() + output_len, tpb);
        if total > self.cfg.pool.n {
            return Err(SimError::Contract(format!(
                "request of {} prompt tokens needs {total} blocks but pool.N is {}",
                prompt.len(),
                self.cfg.pool.n
            )));
        }
        let id = self.next_request;
        self.next_request += 1;
        let req = Request {
            id,
            session,
            task: self.sessions[session].task,
            kind,
            slot,
            prompt_len: prompt.len(),
            hashes: block_hashes(&prompt, tpb),
            extra_blocks: total - blocks_for(prompt.len(), tpb),
            output_len,
            context: prompt,
            out: Vec::new(),
            arrival: self.now(),
            arrival_seq: id,
            first_token_at: 0.0,
            hit: 0,
            need: 0,
            src: None,
            spec_ready_at: f64::INFINITY,
            metrics: DecodeMetrics::default(),
        };
        self.requests.insert(id, req);
        self.engines[engine].waiting.push(id);
        self.kick(engine)
    }

    fn kick(&mut self, e: usize) -> Result<(), SimError> {
        if self.engines[e].busy {
            return Ok(());
        }
        self.start_iteration(e)
    }

    fn class(&self, prompt_len: usize) -> RequestClass {
        RequestClass::of(prompt_len, self.cfg.workload.long_threshold)
    }

    /// Admits waiting requests one scheduling cycle at a time.
    fn admit(&mut self, e: usize) -> Result<Vec<u64>, SimError> {
        let now = self.now();
        let max_batch = self.cfg.engine.max_batch;
        let policy = self.cfg.sched.policy;
        let mut admitted = Vec::new();
        loop {
            let engine = &self.engines[e];
            if engine.waiting.is_empty() || engine.running.len() + admitted.len() >= max_batch {
                break;
            }
            let queue: Vec<QueueEntry> = engine
                .waiting
                .iter()
                .map(|id| {
                    let r = &self.requests[id];
                    let fp = engine.pool.footprint_hashes(&r.hashes, r.prompt_len);
                    QueueEntry {
                        id: r.id,
                        prompt_tok: r.prompt_len,
                        hit: fp.hit,
                        need: fp.need,
                        wait: now - r.arrival,
                        arrival: r.arrival_seq,
                    }
                })
                .collect();
            let free = engine.pool.free_blocks();
            let engine = &mut self.engines[e];
            let lambda = update_lambda(&mut engine.sched, &queue, free, &self.params);
            let (mut long, mut short) = (0, 0);
            for id in engine.running.iter().chain(&admitted) {
                match RequestClass::of(self.requests[id].prompt_len, self.cfg.workload.long_threshold) {
                    RequestClass::Long => long += 1,
                    RequestClass::Short => short += 1,
                }
            }
            self.lambda_series.push(LambdaSample {
                time: now,
                engine: ENGINE_NAMES[e].into(),
                lambda,
                queue_depth: queue.len(),
                running_long: long,
                running_short: short,
                free_blocks: free,
            });
            let requests = &self.requests;
            let pool = &engine.pool;
            let pick = select(&queue, policy, lambda, &self.params, |q| {
                let r = &requests[&q.id];
                pool.can_admit(&r.hashes, r.prompt_len, r.extra_blocks)
            });
            let Some(id) = pick else { break };
            let r = self.requests.get_mut(&id).expect("queued request exists");
            let alloc = engine
                .pool
                .admit(id, &r.hashes, r.prompt_len, r.extra_blocks)
                .map_err(|err| SimError::Contract(err.to_string()))?
                .map_err(|rej| {
                    SimError::Contract(format!(
                        "feasible admission rejected: {} > {}",
                        rej.required, rej.available
                    ))
                })?;
            r.hit = alloc.footprint.hit;
            r.need = alloc.footprint.need;
            engine.waiting.retain(|&w| w != id);
            admitted.push(id);
            let class = self.class(self.requests[&id].prompt_len);
            self.admissions.push(Admission {
                time: now,
                engine: ENGINE_NAMES[e].into(),
                lambda,
                class,
                request_id: id,
            });
        }
        Ok(admitted)
    }

    /// Sets up the draft source of a newly admitted request and returns the
    /// construction cost in seconds and whether it is paid synchronously.
    fn prepare_speculation(&mut self, e: usize, req: &mut Request) -> Result<(f64, bool), SimError> {
        let prompt = &req.context;
        let mut sam = match req.kind {
            RequestKind::DocQa => None,
            _ => self.sessions[req.session].sam.take(),
        }
        .unwrap_or_default();
        let reusable = sam.corpus().len() <= prompt.len() && prompt.starts_with(sam.corpus());
        if !reusable {
            sam = SuffixAutomaton::new();
        }
        let delta = &prompt[sam.corpus().len()..];
        let mut src = CompositeDraftSource::new(sam, self.spec.session_weight)
            .with_policy(self.spec.draft_policy);
        let body = &prompt[..prompt.len().saturating_sub(1)];
        let query = &body[body.len().saturating_sub(self.cfg.spec.retrieval_query_tokens)..];
        let hits = retrieve_top_k(query, &self.repo, self.spec.top_k, Some(req.session as u64));
        for h in hits {
            if self.repo_sams[h.entry].is_none() {
                let frozen = entry_automaton(self.repo.entry(h.entry))
                    .map_err(|err| SimError::Contract(err.to_string()))?;
                self.repo_sams[h.entry] = Some(frozen);
            }
            let frozen = self.repo_sams[h.entry].clone().expect("built above");
            src.push_frozen(frozen, h.similarity);
        }
        let cost = delta.len() as f64 * self.cfg.latency.sam_build_per_token;
        src.insert_verified(delta)
            .map_err(|err| SimError::Contract(err.to_string()))?;
        req.src = Some(src);
        let now = self.now();
        match self.cfg.spec.build {
            BuildMode::Sync => {
                req.spec_ready_at = now;
                Ok((cost, true))
            }
            BuildMode::Async => {
                let engine = &mut self.engines[e];
                let start = engine.build_free_at.max(now);
                engine.build_free_at = start + cost;
                req.spec_ready_at = start + cost;
                Ok((cost, false))
            }
        }
    }

    fn plain_step(&self, req: &mut Request) -> Result<(), SimError> {
        let next = self.oracle.next_tokens(&req.context, 1);
        req.metrics.forward_passes += 1;
        req.metrics.generated_tokens += next.len() as u64;
        if let Some(src) = req.src.as_mut() {
            src.insert_verified(&next)
                .map_err(|err| SimError::Contract(err.to_string()))?;
        }
        req.context.extend_from_slice(&next);
        req.out.extend_from_slice(&next);
        Ok(())
    }

    /// One decode forward pass for `req`; returns the drafted token count.
    fn decode_one(&self, req: &mut Request, batch: usize, now: f64) -> Result<usize, SimError> {
        let remaining = req.output_len - req.out.len();
        let speculate = req.src.is_some()
            && now >= req.spec_ready_at
            && remaining > 1
            && adaptive_enabled(req.context.len(), batch, &self.spec);
        if !speculate {
            self.plain_step(req)?;
            return Ok(0);
        }
        let src = req.src.as_mut().expect("checked above");
        let k = (self.spec.n_propose - 1).min(remaining - 1);
        let draft = src.draft(k, self.spec.min_match);
        let v = verify_draft(&self.oracle, &req.context, &draft.tokens);
        req.metrics.forward_passes += 1;
        req.metrics.generated_tokens += v.committed.len() as u64;
        if v.proposed > 0 {
            req.metrics.proposed_spec_tokens += v.proposed as u64;
            req.metrics.accepted_spec_tokens += v.accepted as u64;
            req.metrics.nonempty_proposal_steps += 1;
        }
        src.insert_verified(&v.committed)
            .map_err(|err| SimError::Contract(err.to_string()))?;
        req.context.extend_from_slice(&v.committed);
        req.out.extend_from_slice(&v.committed);
        Ok(v.proposed)
    }

    fn start_iteration(&mut self, e: usize) -> Result<(), SimError> {
        let admitted = self.admit(e)?;
        let lat = self.cfg.latency.clone();
        let speed = self.engines[e].speed;
        let now = self.now();
        if !admitted.is_empty() {
            let mut duration = lat.prefill_overhead;
            for &id in &admitted {
                let mut req = self.requests.remove(&id).expect("admitted request exists");
                let cached = (req.hit * self.cfg.pool.tpb).min(req.prompt_len);
                duration += (req.prompt_len - cached) as f64 * lat.prefill_per_uncached_token * speed;
                if self.cfg.spec.enabled {
                    let (cost, sync) = self.prepare_speculation(e, &mut req)?;
                    duration += if sync { cost } else { lat.handle_check_overhead };
                }
                self.plain_step(&mut req)?;
                self.requests.insert(id, req);
            }
            let engine = &mut self.engines[e];
            engine.busy = true;
            engine.current = Some(Iteration::Prefill(admitted));
            self.clock.schedule_in(duration, Event::EngineDone(e));
            return Ok(());
        }
        if self.engines[e].running.is_empty() {
            self.engines[e].busy = false;
            return Ok(());
        }
        let ids = self.engines[e].running.clone();
        let batch = ids.len();
        let mut drafted = 0;
        let mut context_tokens = 0;
        for &id in &ids {
            let mut req = self.requests.remove(&id).expect("running request exists");
            context_tokens += req.context.len();
            drafted += self.decode_one(&mut req, batch, now)?;
            self.requests.insert(id, req);
        }
        let duration = (lat.decode_per_forward_pass + lat.decode_per_context_token * context_tokens as f64)
            * speed
            + lat.draft_verify_overhead_per_token * drafted as f64;
        let engine = &mut self.engines[e];
        engine.busy = true;
        engine.current = Some(Iteration::Decode(ids));
        self.clock.schedule_in(duration, Event::EngineDone(e));
        Ok(())
    }

    fn end_iteration(&mut self, e: usize) -> Result<(), SimError> {
        let now = self.now();
        let ids = match self.engines[e].current.take() {
            Some(Iteration::Prefill(ids)) => {
                for &id in &ids {
                    self.requests.get_mut(&id).expect("admitted request exists").first_token_at = now;
                    self.engines[e].running.push(id);
                }
                ids
            }
            Some(Iteration::Decode(ids)) => ids,
            None => unreachable!("an engine only finishes a started iteration"),
        };
        let mut finished = Vec::new();
        for id in ids {
            let r = &self.requests[&id];
            if r.out.len() >= r.output_len {
                finished.push(id);
            }
        }
        self.engines[e].running.retain(|id| !finished.contains(id));
        self.engines[e].busy = false;
        for id in finished {
            let req = self.requests.remove(&id).expect("finished request exists");
            self.complete(e, req)?;
        }
        self.kick(e)
    }

    fn complete(&mut self, e: usize, req: Request) -> Result<(), SimError> {
        let now = self.now();
        let final_hashes = block_hashes(&req.context, self.cfg.pool.tpb);
        self.engines[e]
            .pool
            .release(req.id, &final_hashes)
            .map_err(|err| SimError::Contract(err.to_string()))?;
        let e2e = now - req.arrival;
        let ttft = req.first_token_at - req.arrival;
        let m = req.metrics;
        let ote = m.generated_tokens as f64 / m.forward_passes.max(1) as f64;
        let shr = if m.proposed_spec_tokens > 0 {
            m.accepted_spec_tokens as f64 / m.proposed_spec_tokens as f64
        } else {
            0.0
        };
        self.records.push(RequestRecord {
            request_id: req.id,
            session: req.session,
            task: req.task,
            kind: req.kind,
            engine: ENGINE_NAMES[e].into(),
            class: self.class(req.prompt_len),
            arrival: req.arrival,
            ttft,
            tpot: (e2e - ttft) / (req.out.len().max(2) - 1) as f64,
            e2e,
            prompt_tokens: req.prompt_len,
            output_tokens: req.out.len(),
            hit_blocks: req.hit,
            need_blocks: req.need,
            forward_passes: m.forward_passes,
            proposed_spec_tokens: m.proposed_spec_tokens,
            accepted_spec_tokens: m.accepted_spec_tokens,
            ote,
            shr,
        });
        if self.cfg.spec.enabled {
            let body = &req.context[..req.prompt_len - 1];
            let query = body[body.len().saturating_sub(self.cfg.spec.retrieval_query_tokens)..].to_vec();
            if self.repo.push(query, req.out.clone(), req.session as u64).is_ok() {
                self.repo_sams.push(None);
            }
        }
        match req.kind {
            RequestKind::DocQa => {
                let (s, slot, out) = (req.session, req.slot, req.out.clone());
                self.on_qa(s, slot, out)
            }
            _ => self.on_think_done(req.session, req),
        }
    }

    fn report(self) -> MetricsReport {
        let mut records = self.records;
        records.sort_by_key(|r| r.request_id);
        let mut tasks = self.tasks;
        tasks.sort_by_key(|t| (t.session, t.task));
        let mean = |xs: &mut dyn Iterator<Item = f64>| {
            let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            if n == 0 { 0.0 } else { sum / n as f64 }
        };
        let makespan = tasks.iter().map(|t| t.end).fold(0.0, f64::max);
        let (mut hit, mut prompt, mut evictions) = (0u64, 0u64, 0u64);
        for e in &self.engines {
            let st = e.pool.stats();
            hit += st.hit_blocks;
            prompt += st.prompt_blocks;
            evictions += st.evictions;
        }
        let gen: u64 = records.iter().map(|r| r.output_tokens as u64).sum();
        let passes: u64 = records.iter().map(|r| r.forward_passes).sum();
        let proposed: u64 = records.iter().map(|r| r.proposed_spec_tokens).sum();
        let accepted: u64 = records.iter().map(|r| r.accepted_spec_tokens).sum();
        let large: usize = tasks.iter().map(|t| t.large_steps).sum();
        let small: usize = tasks.iter().map(|t| t.small_steps).sum();
        let summary = Summary {
            completed_tasks: tasks.len(),
            completed_requests: records.len(),
            makespan,
            qps: if makespan > 0.0 { tasks.len() as f64 / makespan } else { 0.0 },
            mean_task_e2e: mean(&mut tasks.iter().map(|t| t.e2e)),
            mean_request_e2e: mean(&mut records.iter().map(|r| r.e2e)),
            mean_ttft: mean(&mut records.iter().map(|r| r.ttft)),
            mean_tpot: mean(&mut records.iter().map(|r| r.tpot)),
            hit_rate: if prompt > 0 { hit as f64 / prompt as f64 } else { 0.0 },
            evictions,
            ote: if passes > 0 { gen as f64 / passes as f64 } else { 0.0 },
            shr: if proposed > 0 { accepted as f64 / proposed as f64 } else { 0.0 },
            large_steps: large,
            small_steps: small,
            large_step_share: if large + small > 0 {
                large as f64 / (large + small) as f64
            } else {
                0.0
            },
            escalations: tasks.iter().map(|t| t.escalations).sum(),
            peak_context_tokens: tasks.iter().map(|t| t.peak_context_tokens).max().unwrap_or(0),
            distill_applies: tasks.iter().map(|t| t.distill_applies).sum(),
            distill_failures: self.counters.distill_failures,
            distill_stalls: self.counters.distill_stalls,
            mid_loop_applies: self.counters.mid_loop_applies,
            reasoning_intact: tasks.iter().all(|t| t.reasoning_intact),
        };
        MetricsReport {
            label: self.label,
            seed: self.seed,
            policy: self.cfg.sched.policy.name().into(),
            summary,
            tasks,
            requests: records,
            lambda_series: self.lambda_series,
            admissions: self.admissions,
        }
    }
}
