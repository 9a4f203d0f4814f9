//! Deterministic stand-ins for the target model.

use agentinfer_core::specdec::TokenOracle;
use agentinfer_core::TokenId;

use crate::config::{OracleConfig, OracleMode};
use crate::hashing::{mix, ns, unit};

/// Token that ends every prompt. Generation restarts its position count after
/// the last marker in the context, so one generation never sees another's
/// position.
pub const MARKER: TokenId = 0;

/// Tokens before the marker that salt a generation.
const SALT_TOKENS: usize = 4;

/// Fixed pool of documents shared by crawled pages and oracle copies.
#[derive(Debug, Clone)]
pub struct DocPool {
    seed: u64,
    n_docs: usize,
    doc_len: usize,
    vocab: u32,
}

impl DocPool {
    pub fn new(seed: u64, cfg: &OracleConfig) -> Self {
        Self {
            seed,
            n_docs: cfg.n_docs,
            doc_len: cfg.doc_len,
            vocab: cfg.vocab,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn doc_len(&self) -> usize {
        self.doc_len
    }

    /// Token `pos` of document `doc`; never the marker.
    pub fn token(&self, doc: usize, pos: usize) -> TokenId {
        content_token(mix(&[self.seed, ns::DOC, doc as u64, pos as u64]), self.vocab)
    }

    pub fn doc(&self, doc: usize) -> Vec<TokenId> {
        (0..self.doc_len).map(|p| self.token(doc, p)).collect()
    }
}

/// A non-marker token from a hash.
pub fn content_token(h: u64, vocab: u32) -> TokenId {
    (h % u64::from(vocab - 1)) as TokenId + 1
}

#[derive(Debug, Clone)]
enum Mode {
    Markov {
        order: usize,
        rho: f64,
        segment: usize,
    },
    Replay(Vec<TokenId>),
}

/// Greedy continuation as a pure function of (seed, context).
///
/// Markov mode splits the output into fixed segments. Each segment either
/// copies a span of a pool document (probability `rho`) or emits fresh
/// tokens hashed from the preceding `order` tokens. Replay mode emits the
/// corpus verbatim, cycling.
#[derive(Debug, Clone)]
pub struct MockOracle {
    seed: u64,
    vocab: u32,
    mode: Mode,
    pool: DocPool,
}

impl MockOracle {
    pub fn new(seed: u64, cfg: &OracleConfig) -> Self {
        Self::with_replay(seed, cfg, Vec::new())
    }

    /// Oracle whose replay corpus is `corpus`; the corpus is ignored in
    /// Markov mode.
    pub fn with_replay(seed: u64, cfg: &OracleConfig, corpus: Vec<TokenId>) -> Self {
        let mode = match cfg.mode {
            OracleMode::Markov => Mode::Markov {
                order: cfg.order,
                rho: cfg.rho,
                segment: cfg.segment_tokens,
            },
            OracleMode::Replay => {
                assert!(!corpus.is_empty(), "replay oracle needs a corpus");
                Mode::Replay(corpus)
            }
        };
        Self {
            seed,
            vocab: cfg.vocab,
            mode,
            pool: DocPool::new(seed, cfg),
        }
    }

    pub fn pool(&self) -> &DocPool {
        &self.pool
    }

    fn markov_token(&self, salt: u64, history: &[TokenId], rel: usize) -> TokenId {
        let Mode::Markov { order, rho, segment } = &self.mode else {
            unreachable!()
        };
        let seg = rel / segment;
        let off = rel % segment;
        let h = mix(&[self.seed, ns::ORACLE, salt, seg as u64]);
        if unit(h) < *rho {
            let doc = (mix(&[h, 1]) % self.pool.n_docs as u64) as usize;
            let start = (mix(&[h, 2]) % (self.pool.doc_len - segment) as u64) as usize;
            return self.pool.token(doc, start + off);
        }
        let mut words = vec![self.seed, ns::ORACLE, salt, rel as u64, u64::MAX];
        let take = (*order).min(history.len());
        words.extend(history[history.len() - take..].iter().map(|&t| u64::from(t)));
        content_token(mix(&words), self.vocab)
    }
}

impl TokenOracle for MockOracle {
    fn next_tokens(&self, context: &[TokenId], n: usize) -> Vec<TokenId> {
        let start = context
            .iter()
            .rposition(|&t| t == MARKER)
            .map_or(0, |m| m + 1);
        let mut out = Vec::with_capacity(n);
        match &self.mode {
            Mode::Replay(corpus) => {
                let rel = context.len() - start;
                out.extend((0..n).map(|j| corpus[(rel + j) % corpus.len()]));
            }
            Mode::Markov { order, .. } => {
                let salt_from = start.saturating_sub(1 + SALT_TOKENS);
                let salt_to = start.saturating_sub(1);
                let salt_words: Vec<u64> = context[salt_from..salt_to]
                    .iter()
                    .map(|&t| u64::from(t))
                    .collect();
                let salt = mix(&salt_words);
                let tail_from = context.len().saturating_sub(*order).max(start);
                let mut history: Vec<TokenId> = context[tail_from..].to_vec();
                let base = context.len() - start;
                for j in 0..n {
                    let t = self.markov_token(salt, &history, base + j);
                    out.push(t);
                    history.push(t);
                    if history.len() > *order {
                        history.remove(0);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(rho: f64) -> OracleConfig {
        OracleConfig {
            rho,
            n_docs: 4,
            doc_len: 128,
            ..OracleConfig::default()
        }
    }

    #[test]
    fn continuation_is_consistent_with_single_steps() {
        let o = MockOracle::new(3, &cfg(0.5));
        let mut ctx = vec![5, 6, 7, 8, MARKER];
        let batch = o.next_tokens(&ctx, 50);
        for &t in &batch {
            assert_eq!(o.next_tokens(&ctx, 1), vec![t]);
            ctx.push(t);
        }
    }

    #[test]
    fn tokens_never_equal_marker() {
        let o = MockOracle::new(1, &cfg(0.3));
        assert!(o.next_tokens(&[9, MARKER], 500).iter().all(|&t| t != MARKER));
    }

    #[test]
    fn full_repetition_copies_pool_documents() {
        let o = MockOracle::new(2, &cfg(1.0));
        let out = o.next_tokens(&[1, 2, MARKER], 32);
        let found = (0..4).any(|d| {
            let doc = o.pool().doc(d);
            doc.windows(32).any(|w| w == out.as_slice())
        });
        assert!(found);
    }

    #[test]
    fn replay_emits_corpus_verbatim() {
        let c = OracleConfig {
            mode: OracleMode::Replay,
            ..cfg(1.0)
        };
        let o = MockOracle::with_replay(0, &c, vec![4, 5, 6]);
        assert_eq!(o.next_tokens(&[9, 9, MARKER], 7), vec![4, 5, 6, 4, 5, 6, 4]);
        assert_eq!(o.next_tokens(&[MARKER, 4], 2), vec![5, 6]);
    }

    #[test]
    fn salt_separates_generations() {
        let o = MockOracle::new(2, &cfg(0.0));
        assert_ne!(
            o.next_tokens(&[1, 2, 3, 4, MARKER], 8),
            o.next_tokens(&[1, 2, 3, 5, MARKER], 8)
        );
    }
}
