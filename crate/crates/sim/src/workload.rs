//! Synthetic agent tasks: prompts, search results, tool latencies and the
//! difficulty of each loop.
//!
//! Everything here is keyed by (seed, session, task, loop, ...), so the trace
//! is identical whatever the serving stack does with it.

use agentinfer_core::compress::SearchResult;
use agentinfer_core::TokenId;
use rand::Rng;

use crate::config::{PromptStyle, ScenarioConfig, ToolLatency};
use crate::hashing::{keyed_rng, mix, ns, unit};
use crate::oracle::{content_token, DocPool};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    pub session: usize,
    pub task: usize,
    pub long: bool,
    pub prompt: Vec<TokenId>,
    pub query: Vec<TokenId>,
}

/// A search hit with the pool document it points at.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub doc: usize,
    pub result: SearchResult,
}

#[derive(Debug, Clone)]
pub struct Workload {
    seed: u64,
    cfg: ScenarioConfig,
    pool: DocPool,
}

const TITLE_TOKENS: usize = 8;
const SNIPPET_TOKENS: usize = 24;

impl Workload {
    pub fn new(seed: u64, cfg: &ScenarioConfig) -> Self {
        Self {
            seed,
            cfg: cfg.clone(),
            pool: DocPool::new(seed, &cfg.oracle),
        }
    }

    pub fn pool(&self) -> &DocPool {
        &self.pool
    }

    fn vocab(&self) -> u32 {
        self.cfg.oracle.vocab
    }

    /// Long tasks are spread evenly over the global task index, rotated by
    /// the seed, so every run gets the configured mix exactly.
    pub fn is_long(&self, session: usize, task: usize) -> bool {
        let w = &self.cfg.workload;
        let total = (w.sessions * w.tasks_per_session) as u64;
        let g = ((task * w.sessions + session) as u64 + self.seed) % total;
        let f = w.long_fraction;
        ((g + 1) as f64 * f).floor() > (g as f64 * f).floor()
    }

    pub fn task(&self, session: usize, task: usize) -> TaskPlan {
        let w = &self.cfg.workload;
        let long = self.is_long(session, task);
        let mut rng = keyed_rng(&[self.seed, ns::TASK, session as u64, task as u64]);
        let range = if long { w.long_prompt_tokens } else { w.short_prompt_tokens };
        let target = rng.gen_range(range[0]..=range[1]);
        match w.prompt_style {
            PromptStyle::RepeatedBlock => {
                let block: Vec<TokenId> = (0..w.block_tokens)
                    .map(|i| content_token(mix(&[self.seed, ns::BLOCK, i as u64]), self.vocab()))
                    .collect();
                let prompt = block.iter().copied().cycle().take(target).collect();
                TaskPlan {
                    session,
                    task,
                    long,
                    prompt,
                    query: Vec::new(),
                }
            }
            PromptStyle::Documents => {
                let query: Vec<TokenId> = (0..w.query_tokens)
                    .map(|_| content_token(rng.gen(), self.vocab()))
                    .collect();
                let mut prompt: Vec<TokenId> = (0..w.preamble_tokens)
                    .map(|i| content_token(mix(&[self.seed, ns::PREAMBLE, i as u64]), self.vocab()))
                    .collect();
                let body = target - w.preamble_tokens - query.len();
                while prompt.len() < w.preamble_tokens + body {
                    let doc = rng.gen_range(0..self.pool.n_docs());
                    let room = w.preamble_tokens + body - prompt.len();
                    prompt.extend((0..self.pool.doc_len().min(room)).map(|p| self.pool.token(doc, p)));
                }
                prompt.extend_from_slice(&query);
                TaskPlan {
                    session,
                    task,
                    long,
                    prompt,
                    query,
                }
            }
        }
    }

    /// Results of the search issued in `loop_index`.
    pub fn search(&self, plan: &TaskPlan, loop_index: usize) -> Vec<SearchHit> {
        let w = &self.cfg.workload;
        let mut rng = keyed_rng(&[
            self.seed,
            ns::SEARCH,
            plan.session as u64,
            plan.task as u64,
            loop_index as u64,
        ]);
        (0..w.results_per_search)
            .map(|_| {
                let doc = rng.gen_range(0..self.pool.n_docs());
                let relevant = rng.gen_bool(w.relevant_fraction);
                let mut words: Vec<TokenId> = (0..TITLE_TOKENS + SNIPPET_TOKENS)
                    .map(|_| content_token(rng.gen(), self.vocab()))
                    .collect();
                if relevant && !plan.query.is_empty() {
                    let lo = plan.query.len().div_ceil(2);
                    let m = rng.gen_range(lo..=plan.query.len());
                    for (slot, &q) in plan.query.iter().take(m).enumerate() {
                        let n = words.len();
                        words[slot * 3 % n] = q;
                    }
                }
                let snippet = words.split_off(TITLE_TOKENS);
                SearchHit {
                    doc,
                    result: SearchResult {
                        url: format!("doc://{doc}"),
                        title: words,
                        snippet,
                        relevance: 0.0,
                    },
                }
            })
            .collect()
    }

    /// Tokens of the act entry that issues the search of `loop_index`.
    pub fn act(&self, plan: &TaskPlan, loop_index: usize) -> Vec<TokenId> {
        let mut rng = keyed_rng(&[
            self.seed,
            ns::ACT,
            plan.session as u64,
            plan.task as u64,
            loop_index as u64,
        ]);
        let mut act: Vec<TokenId> = plan.query.clone();
        while act.len() < self.cfg.workload.act_tokens {
            act.push(content_token(rng.gen(), self.vocab()));
        }
        act.truncate(self.cfg.workload.act_tokens);
        act
    }

    /// Page excerpt kept in context for a crawled document.
    pub fn excerpt(&self, doc: usize) -> Vec<TokenId> {
        let n = self.cfg.workload.excerpt_tokens.min(self.pool.doc_len());
        (0..n).map(|p| self.pool.token(doc, p)).collect()
    }

    /// Latency of one tool call, uniform in mean ± jitter.
    pub fn tool_latency(&self, tool: &str, keys: &[u64]) -> f64 {
        let ToolLatency { mean, jitter } = self.cfg.latency.tool(tool);
        let mut words = vec![self.seed, ns::TOOL, tool.len() as u64];
        words.extend(tool.bytes().map(u64::from));
        words.extend_from_slice(keys);
        let u = unit(mix(&words));
        (mean + jitter * (2.0 * u - 1.0)).max(0.0)
    }

    /// Difficulty of a loop in `[0, 1)`; a model reports progress when its
    /// skill exceeds it.
    pub fn difficulty(&self, plan: &TaskPlan, step: usize) -> f64 {
        unit(mix(&[
            self.seed,
            ns::DIFFICULTY,
            plan.session as u64,
            plan.task as u64,
            step as u64,
        ]))
    }
}
