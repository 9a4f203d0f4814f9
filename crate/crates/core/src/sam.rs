//! Online suffix automaton over token sequences.
//!
//! The automaton is extended one token at a time and accepts exactly the
//! substrings of everything inserted so far. A [`MatchCursor`] tracks the
//! longest suffix of a token stream that is also a substring of the corpus;
//! drafting reads the corpus continuation that follows a recorded occurrence
//! of that suffix.
//!
//! Several automata can be combined into a [`CompositeDraftSource`]: one live
//! session automaton that keeps growing with verified output, plus any number
//! of frozen automata built from retrieved history. Members are queried
//! independently and the candidate with the best `weight * match_len` wins.

use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vocabulary token identifier.
pub type TokenId = u32;

/// First id of the reserved sentinel range. Sentinels join independent
/// documents inside one corpus so that no match spans a document boundary.
pub const SENTINEL_BASE: TokenId = 0xFFFF_0000;

/// Default maximum corpus length of a single automaton.
pub const DEFAULT_CAPACITY: usize = 1 << 26;

const NO_POS: u32 = u32::MAX;

/// Returns the `index`-th reserved sentinel token.
pub fn sentinel(index: u16) -> TokenId {
    SENTINEL_BASE + TokenId::from(index)
}

pub fn is_sentinel(token: TokenId) -> bool {
    token >= SENTINEL_BASE
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamError {
    #[error("suffix automaton capacity exhausted at {limit} tokens")]
    CapacityExhausted { limit: usize },
    #[error("token {token} is outside the vocabulary of {vocab} tokens and is not a sentinel")]
    TokenOutOfRange { token: TokenId, vocab: u32 },
}

/// Index of a state inside one automaton's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct StateId(u32);

impl StateId {
    pub const ROOT: StateId = StateId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Which recorded occurrence of a matched suffix supplies the draft.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftPolicy {
    /// Read only after the most recent occurrence. When that occurrence ends
    /// the corpus there is nothing to read and the draft is empty.
    #[default]
    LatestOnly,
    /// Read after the most recent occurrence, falling back to the earliest
    /// recorded occurrence when the most recent one has no continuation.
    LatestThenEarliest,
}

#[derive(Debug, Clone)]
pub struct SamState {
    len: u32,
    link: Option<StateId>,
    next: BTreeMap<TokenId, StateId>,
    /// Latest corpus index where the substrings of this state end.
    end_pos: u32,
    /// Earliest corpus index where the substrings of this state end.
    first_end: u32,
}

impl SamState {
    fn root() -> Self {
        Self {
            len: 0,
            link: None,
            next: BTreeMap::new(),
            end_pos: NO_POS,
            first_end: NO_POS,
        }
    }

    /// Length of the longest substring recognized at this state.
    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn suffix_link(&self) -> Option<StateId> {
        self.link
    }

    pub fn transitions(&self) -> impl Iterator<Item = (TokenId, StateId)> + '_ {
        self.next.iter().map(|(&t, &s)| (t, s))
    }

    pub fn transition(&self, token: TokenId) -> Option<StateId> {
        self.next.get(&token).copied()
    }

    /// Latest corpus index at which this state's substrings end (`None` for the root).
    pub fn end_pos(&self) -> Option<usize> {
        (self.end_pos != NO_POS).then_some(self.end_pos as usize)
    }

    /// Earliest corpus index at which this state's substrings end (`None` for the root).
    pub fn first_end_pos(&self) -> Option<usize> {
        (self.first_end != NO_POS).then_some(self.first_end as usize)
    }
}

/// Longest-suffix match position of a token stream inside one automaton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCursor {
    state: StateId,
    match_len: u32,
}

impl MatchCursor {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn state(&self) -> StateId {
        self.state
    }

    pub fn match_len(&self) -> usize {
        self.match_len as usize
    }
}

/// Suffix automaton over a growing token corpus.
#[derive(Debug, Clone)]
pub struct SuffixAutomaton {
    states: Vec<SamState>,
    last: StateId,
    corpus: Vec<TokenId>,
    capacity: usize,
    vocab: Option<u32>,
}

impl Default for SuffixAutomaton {
    fn default() -> Self {
        Self::new()
    }
}

impl SuffixAutomaton {
    pub fn new() -> Self {
        Self {
            states: vec![SamState::root()],
            last: StateId::ROOT,
            corpus: Vec::new(),
            capacity: DEFAULT_CAPACITY,
            vocab: None,
        }
    }

    /// Limits the corpus to `capacity` tokens; further extends fail.
    pub fn with_capacity_limit(mut self, capacity: usize) -> Self {
        self.capacity = capacity.min(NO_POS as usize - 1);
        self
    }

    /// Rejects tokens `>= vocab` that are not sentinels.
    pub fn with_vocab(mut self, vocab: u32) -> Self {
        self.vocab = Some(vocab);
        self
    }

    /// Builds an automaton over `tokens` in one pass.
    pub fn from_tokens(tokens: &[TokenId]) -> Result<Self, SamError> {
        let mut sam = Self::new();
        sam.extend_from_slice(tokens)?;
        Ok(sam)
    }

    /// Builds an automaton over several documents joined by distinct sentinels.
    pub fn from_documents<'a, I>(documents: I) -> Result<Self, SamError>
    where
        I: IntoIterator<Item = &'a [TokenId]>,
    {
        let mut sam = Self::new();
        for (i, doc) in documents.into_iter().enumerate() {
            if i > 0 {
                sam.extend(sentinel((i - 1) as u16))?;
            }
            sam.extend_from_slice(doc)?;
        }
        Ok(sam)
    }

    pub fn corpus(&self) -> &[TokenId] {
        &self.corpus
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, id: StateId) -> &SamState {
        &self.states[id.index()]
    }

    pub fn states(&self) -> &[SamState] {
        &self.states
    }

    /// State reached by the whole corpus.
    pub fn last(&self) -> StateId {
        self.last
    }

    pub fn extend_from_slice(&mut self, tokens: &[TokenId]) -> Result<(), SamError> {
        tokens.iter().try_for_each(|&t| self.extend(t))
    }

    /// Appends one token to the corpus and restores the automaton.
    pub fn extend(&mut self, token: TokenId) -> Result<(), SamError> {
        if self.corpus.len() >= self.capacity {
            return Err(SamError::CapacityExhausted {
                limit: self.capacity,
            });
        }
        if let Some(vocab) = self.vocab {
            if token >= vocab && !is_sentinel(token) {
                return Err(SamError::TokenOutOfRange { token, vocab });
            }
        }

        let pos = self.corpus.len() as u32;
        self.corpus.push(token);

        let cur = self.push_state(SamState {
            len: self.states[self.last.index()].len + 1,
            link: None,
            next: BTreeMap::new(),
            end_pos: pos,
            first_end: pos,
        });

        let mut p = Some(self.last);
        while let Some(pid) = p {
            let st = &mut self.states[pid.index()];
            if st.next.contains_key(&token) {
                break;
            }
            st.next.insert(token, cur);
            p = st.link;
        }

        let link = match p {
            None => StateId::ROOT,
            Some(pid) => {
                let q = self.states[pid.index()].next[&token];
                let p_len = self.states[pid.index()].len;
                if p_len + 1 == self.states[q.index()].len {
                    q
                } else {
                    let q_state = &self.states[q.index()];
                    let clone = SamState {
                        len: p_len + 1,
                        link: q_state.link,
                        next: q_state.next.clone(),
                        end_pos: q_state.end_pos,
                        first_end: q_state.first_end,
                    };
                    let clone = self.push_state(clone);
                    let mut p = Some(pid);
                    while let Some(pid) = p {
                        let st = &mut self.states[pid.index()];
                        match st.next.get_mut(&token) {
                            Some(target) if *target == q => *target = clone,
                            _ => break,
                        }
                        p = st.link;
                    }
                    self.states[q.index()].link = Some(clone);
                    clone
                }
            }
        };
        self.states[cur.index()].link = Some(link);
        self.last = cur;

        // Every state on the suffix path of the new last state now has an
        // occurrence ending at `pos`.
        let mut s = link;
        while s != StateId::ROOT {
            let st = &mut self.states[s.index()];
            st.end_pos = pos;
            s = st.link.unwrap_or(StateId::ROOT);
        }
        Ok(())
    }

    fn push_state(&mut self, state: SamState) -> StateId {
        let id = StateId(self.states.len() as u32);
        self.states.push(state);
        id
    }

    /// Whether `seq` is a substring of the corpus.
    pub fn accepts(&self, seq: &[TokenId]) -> bool {
        let mut s = StateId::ROOT;
        for t in seq {
            match self.states[s.index()].next.get(t) {
                Some(&n) => s = n,
                None => return false,
            }
        }
        true
    }

    /// Moves a cursor whose state was split by later extensions back onto
    /// the state that currently recognizes its matched suffix.
    pub fn normalize(&self, cursor: MatchCursor) -> MatchCursor {
        let mut c = cursor;
        while c.state != StateId::ROOT {
            match self.states[c.state.index()].link {
                Some(link) if c.match_len <= self.states[link.index()].len => c.state = link,
                _ => break,
            }
        }
        if c.state == StateId::ROOT {
            c.match_len = 0;
        }
        c
    }

    /// Feeds one token to the cursor.
    pub fn advance(&self, cursor: MatchCursor, token: TokenId) -> MatchCursor {
        let mut c = self.normalize(cursor);
        loop {
            let st = &self.states[c.state.index()];
            if let Some(&next) = st.next.get(&token) {
                return MatchCursor {
                    state: next,
                    match_len: c.match_len + 1,
                };
            }
            match st.link {
                Some(link) => {
                    c.state = link;
                    c.match_len = self.states[link.index()].len;
                }
                None => return MatchCursor::empty(),
            }
        }
    }

    /// Cursor after feeding `tokens` from an empty match.
    pub fn match_stream(&self, tokens: &[TokenId]) -> MatchCursor {
        tokens
            .iter()
            .fold(MatchCursor::empty(), |c, &t| self.advance(c, t))
    }

    /// Corpus tokens that follow an occurrence of the cursor's matched suffix.
    ///
    /// Returns at most `k` tokens, stopping early at the corpus end or at a
    /// sentinel. Matches shorter than `min_match` draft nothing.
    pub fn draft(
        &self,
        cursor: MatchCursor,
        k: usize,
        min_match: usize,
        policy: DraftPolicy,
    ) -> Vec<TokenId> {
        let c = self.normalize(cursor);
        if k == 0 || c.match_len == 0 || c.match_len() < min_match.max(1) {
            return Vec::new();
        }
        let st = &self.states[c.state.index()];
        let n = self.corpus.len();
        let mut start = st.end_pos as usize + 1;
        if start >= n && policy == DraftPolicy::LatestThenEarliest {
            start = st.first_end as usize + 1;
        }
        if start >= n {
            return Vec::new();
        }
        let end = (start + k).min(n);
        self.corpus[start..end]
            .iter()
            .copied()
            .take_while(|&t| !is_sentinel(t))
            .collect()
    }

    /// Consumes the automaton into an immutable, shareable value.
    pub fn freeze(self) -> FrozenAutomaton {
        FrozenAutomaton(Arc::new(self))
    }
}

/// Read-only automaton that can be shared across threads.
#[derive(Debug, Clone)]
pub struct FrozenAutomaton(Arc<SuffixAutomaton>);

impl Deref for FrozenAutomaton {
    type Target = SuffixAutomaton;

    fn deref(&self) -> &SuffixAutomaton {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub enum MemberAutomaton {
    Live(SuffixAutomaton),
    Frozen(FrozenAutomaton),
}

impl MemberAutomaton {
    pub fn automaton(&self) -> &SuffixAutomaton {
        match self {
            MemberAutomaton::Live(s) => s,
            MemberAutomaton::Frozen(f) => f,
        }
    }

    pub fn is_live(&self) -> bool {
        matches!(self, MemberAutomaton::Live(_))
    }
}

#[derive(Debug, Clone)]
pub struct CompositeMember {
    automaton: MemberAutomaton,
    weight: f64,
    cursor: MatchCursor,
}

impl CompositeMember {
    pub fn automaton(&self) -> &SuffixAutomaton {
        self.automaton.automaton()
    }

    pub fn is_live(&self) -> bool {
        self.automaton.is_live()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn cursor(&self) -> MatchCursor {
        self.cursor
    }
}

/// Winning candidate of a composite query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompositeDraft {
    pub tokens: Vec<TokenId>,
    /// Index of the member that produced `tokens`; `None` when empty.
    pub member: Option<usize>,
    pub match_len: usize,
}

/// Ensemble of one live session automaton (member 0) and frozen automata
/// built from retrieved history.
#[derive(Debug, Clone)]
pub struct CompositeDraftSource {
    members: Vec<CompositeMember>,
    policy: DraftPolicy,
}

impl CompositeDraftSource {
    pub fn new(session: SuffixAutomaton, session_weight: f64) -> Self {
        assert!(
            session_weight.is_finite() && session_weight >= 0.0,
            "member weight must be finite and non-negative"
        );
        Self {
            members: vec![CompositeMember {
                automaton: MemberAutomaton::Live(session),
                weight: session_weight,
                cursor: MatchCursor::empty(),
            }],
            policy: DraftPolicy::default(),
        }
    }

    pub fn with_policy(mut self, policy: DraftPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn policy(&self) -> DraftPolicy {
        self.policy
    }

    pub fn push_frozen(&mut self, automaton: FrozenAutomaton, weight: f64) {
        assert!(
            weight.is_finite() && weight >= 0.0,
            "member weight must be finite and non-negative"
        );
        self.members.push(CompositeMember {
            automaton: MemberAutomaton::Frozen(automaton),
            weight,
            cursor: MatchCursor::empty(),
        });
    }

    pub fn members(&self) -> &[CompositeMember] {
        &self.members
    }

    pub fn session(&self) -> &SuffixAutomaton {
        self.members[0].automaton()
    }

    /// Consumes the source, returning the live session automaton.
    pub fn into_session(self) -> SuffixAutomaton {
        match self.members.into_iter().next().map(|m| m.automaton) {
            Some(MemberAutomaton::Live(s)) => s,
            _ => unreachable!("member 0 is always the live session automaton"),
        }
    }

    /// Advances every cursor over `tokens` without touching any corpus.
    pub fn sync(&mut self, tokens: &[TokenId]) {
        for m in &mut self.members {
            let sam = m.automaton.automaton();
            m.cursor = tokens.iter().fold(m.cursor, |c, &t| sam.advance(c, t));
        }
    }

    /// Best draft of at most `k` tokens across members.
    pub fn draft(&self, k: usize, min_match: usize) -> CompositeDraft {
        let mut best: Option<(f64, usize, usize, Vec<TokenId>)> = None;
        for (i, m) in self.members.iter().enumerate() {
            let sam = m.automaton();
            let cursor = sam.normalize(m.cursor);
            let tokens = sam.draft(cursor, k, min_match, self.policy);
            if tokens.is_empty() {
                continue;
            }
            let len = cursor.match_len();
            let score = m.weight * len as f64;
            let better = match &best {
                None => true,
                Some((bs, bl, _, _)) => score > *bs || (score == *bs && len > *bl),
            };
            if better {
                best = Some((score, len, i, tokens));
            }
        }
        match best {
            Some((_, match_len, member, tokens)) => CompositeDraft {
                tokens,
                member: Some(member),
                match_len,
            },
            None => CompositeDraft::default(),
        }
    }

    /// Commits verified output: cursors advance over each token before the
    /// live automaton absorbs it, so the session cursor keeps tracking a
    /// suffix that also occurred earlier in the corpus.
    pub fn insert_verified(&mut self, tokens: &[TokenId]) -> Result<(), SamError> {
        for &t in tokens {
            for m in &mut self.members {
                m.cursor = m.automaton.automaton().advance(m.cursor, t);
            }
            if let MemberAutomaton::Live(sam) = &mut self.members[0].automaton {
                sam.extend(t)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn brute_substrings(corpus: &[TokenId]) -> HashSet<Vec<TokenId>> {
        let mut out = HashSet::new();
        for i in 0..corpus.len() {
            for j in i + 1..=corpus.len() {
                out.insert(corpus[i..j].to_vec());
            }
        }
        out
    }

    fn accepted_set(sam: &SuffixAutomaton) -> HashSet<Vec<TokenId>> {
        let mut out = HashSet::new();
        let mut stack = vec![(StateId::ROOT, Vec::new())];
        while let Some((s, path)) = stack.pop() {
            for (t, n) in sam.state(s).transitions() {
                let mut p = path.clone();
                p.push(t);
                out.insert(p.clone());
                stack.push((n, p));
            }
        }
        out
    }

    fn toks(s: &str) -> Vec<TokenId> {
        s.bytes().map(TokenId::from).collect()
    }

    #[test]
    fn new_automaton_is_a_single_root() {
        let sam = SuffixAutomaton::new();
        assert_eq!(sam.state_count(), 1);
        assert!(sam.accepts(&[]));
        assert!(!sam.accepts(&[1]));
        assert_eq!(sam.state(StateId::ROOT).suffix_link(), None);
    }

    #[test]
    fn single_token_gives_two_states() {
        let mut sam = SuffixAutomaton::new();
        sam.extend(7).unwrap();
        assert_eq!(sam.state_count(), 2);
    }

    #[test]
    fn aba_accepts_exactly_its_substrings() {
        let sam = SuffixAutomaton::from_tokens(&toks("aba")).unwrap();
        let expected: HashSet<_> = ["a", "b", "ab", "ba", "aba"].iter().map(|s| toks(s)).collect();
        assert_eq!(accepted_set(&sam), expected);
    }

    #[test]
    fn abcbc_matches_brute_force() {
        let corpus = toks("abcbc");
        let sam = SuffixAutomaton::from_tokens(&corpus).unwrap();
        let brute = brute_substrings(&corpus);
        assert_eq!(brute.len(), 12);
        assert_eq!(accepted_set(&sam), brute);
    }

    #[test]
    fn unary_corpus_has_n_plus_one_states() {
        let sam = SuffixAutomaton::from_tokens(&[3; 50]).unwrap();
        assert_eq!(sam.state_count(), 51);
    }

    #[test]
    fn suffix_links_shorten() {
        let sam = SuffixAutomaton::from_tokens(&toks("abracadabra")).unwrap();
        for st in sam.states().iter().skip(1) {
            let link = st.suffix_link().expect("non-root has a link");
            assert!(st.len() > sam.state(link).len());
        }
    }

    #[test]
    fn capacity_limit_reports_error() {
        let mut sam = SuffixAutomaton::new().with_capacity_limit(3);
        sam.extend_from_slice(&[1, 2, 3]).unwrap();
        assert_eq!(
            sam.extend(4),
            Err(SamError::CapacityExhausted { limit: 3 })
        );
        assert_eq!(sam.corpus(), &[1, 2, 3]);
    }

    #[test]
    fn vocab_check_allows_sentinels() {
        let mut sam = SuffixAutomaton::new().with_vocab(10);
        sam.extend(9).unwrap();
        sam.extend(sentinel(0)).unwrap();
        assert!(matches!(
            sam.extend(10),
            Err(SamError::TokenOutOfRange { token: 10, .. })
        ));
    }

    #[test]
    fn cursor_extends_match() {
        let sam = SuffixAutomaton::from_tokens(&toks("abcab")).unwrap();
        let c = sam.match_stream(&toks("ab"));
        assert_eq!(c.match_len(), 2);
        let c = sam.advance(c, b'c'.into());
        assert_eq!(c.match_len(), 3);
        assert!(sam.accepts(&toks("abc")));
    }

    #[test]
    fn cursor_resets_on_absent_token() {
        let sam = SuffixAutomaton::from_tokens(&toks("abcab")).unwrap();
        let c = sam.match_stream(&toks("ab"));
        let c = sam.advance(c, b'z'.into());
        assert_eq!(c, MatchCursor::empty());
    }

    #[test]
    fn empty_cursor_advances_to_one() {
        let sam = SuffixAutomaton::from_tokens(&toks("abcab")).unwrap();
        let c = sam.advance(MatchCursor::empty(), b'c'.into());
        assert_eq!(c.match_len(), 1);
    }

    #[test]
    fn cursor_falls_back_through_suffix_links() {
        let sam = SuffixAutomaton::from_tokens(&toks("abcab")).unwrap();
        // "cab" then 'c': "cabc" and "abc" absent? "abc" present.
        let c = sam.match_stream(&toks("cab"));
        assert_eq!(c.match_len(), 3);
        let c = sam.advance(c, b'c'.into());
        assert_eq!(c.match_len(), 3); // "abc"
    }

    #[test]
    fn latest_occurrence_at_corpus_end_drafts_nothing() {
        let sam = SuffixAutomaton::from_tokens(&toks("abcab")).unwrap();
        let c = sam.match_stream(&toks("ab"));
        assert!(sam.draft(c, 1, 2, DraftPolicy::LatestOnly).is_empty());
        assert_eq!(
            sam.draft(c, 1, 2, DraftPolicy::LatestThenEarliest),
            toks("c")
        );
    }

    #[test]
    fn draft_respects_min_match() {
        let sam = SuffixAutomaton::from_tokens(&toks("abcabd")).unwrap();
        let c = sam.match_stream(&toks("b"));
        assert!(sam.draft(c, 3, 2, DraftPolicy::LatestThenEarliest).is_empty());
        assert!(!sam.draft(c, 3, 1, DraftPolicy::LatestThenEarliest).is_empty());
    }

    #[test]
    fn xyxyxy_draft_reads_earliest_continuation() {
        let corpus = toks("xyxyxy");
        let sam = SuffixAutomaton::from_tokens(&corpus).unwrap();
        let c = sam.match_stream(&toks("xy"));
        assert_eq!(c.match_len(), 2);
        // Occurrences of "xy" end at 1, 3 and 5; only the one ending at 1
        // leaves three tokens of continuation.
        assert_eq!(
            sam.draft(c, 3, 2, DraftPolicy::LatestThenEarliest),
            toks("xyx")
        );
        assert!(sam.draft(c, 3, 2, DraftPolicy::LatestOnly).is_empty());
    }

    #[test]
    fn latest_occurrence_is_tracked_across_extensions() {
        let sam = SuffixAutomaton::from_tokens(&toks("abXabYab")).unwrap();
        let c = sam.match_stream(&toks("ab"));
        let st = sam.state(c.state());
        assert_eq!(st.end_pos(), Some(7));
        assert_eq!(st.first_end_pos(), Some(1));
        let c = sam.match_stream(&toks("abY"));
        assert_eq!(sam.draft(c, 2, 2, DraftPolicy::LatestOnly), toks("ab"));
    }

    #[test]
    fn drafts_stop_at_sentinels() {
        let docs: Vec<Vec<TokenId>> = vec![toks("abc"), toks("xyz")];
        let sam = SuffixAutomaton::from_documents(docs.iter().map(|d| d.as_slice())).unwrap();
        let c = sam.match_stream(&toks("ab"));
        assert_eq!(sam.draft(c, 4, 2, DraftPolicy::LatestOnly), toks("c"));
        assert!(!sam.accepts(&toks("cx")));
    }

    #[test]
    fn stale_cursor_is_normalized_after_clone() {
        // Build "ab", match "b", then extend so that the "b" state is split.
        let mut sam = SuffixAutomaton::from_tokens(&toks("ab")).unwrap();
        let c = sam.match_stream(&toks("b"));
        sam.extend_from_slice(&toks("cb")).unwrap();
        let n = sam.normalize(c);
        assert!(n.match_len() <= sam.state(n.state()).len());
        let after = sam.advance(c, b'c'.into());
        assert_eq!(after.match_len(), 2); // "bc"
    }

    fn member_sam(s: &str) -> FrozenAutomaton {
        SuffixAutomaton::from_tokens(&toks(s)).unwrap().freeze()
    }

    #[test]
    fn composite_single_candidate_from_session() {
        let session = SuffixAutomaton::from_tokens(&toks("hello world")).unwrap();
        let mut src = CompositeDraftSource::new(session, 1.0)
            .with_policy(DraftPolicy::LatestThenEarliest);
        src.push_frozen(member_sam("zzzz"), 0.9);
        src.sync(&toks("hel"));
        let d = src.draft(3, 2);
        assert_eq!(d.member, Some(0));
        assert_eq!(d.tokens, toks("lo "));
    }

    #[test]
    fn composite_prefers_weight_times_length() {
        // Member A: weight 1.0, match "yz" (2). Member B: weight 0.4, match "uvwxyz" (6).
        let a = SuffixAutomaton::from_tokens(&toks("yzA")).unwrap();
        let mut src = CompositeDraftSource::new(a, 1.0);
        src.push_frozen(member_sam("uvwxyzB"), 0.4);
        src.sync(&toks("uvwxyz"));
        let d = src.draft(1, 2);
        assert_eq!(d.member, Some(1));
        assert_eq!(d.match_len, 6);
        assert_eq!(d.tokens, toks("B"));
    }

    #[test]
    fn composite_ties_go_to_lower_index() {
        let a = SuffixAutomaton::from_tokens(&toks("qrA")).unwrap();
        let mut src = CompositeDraftSource::new(a, 0.5);
        src.push_frozen(member_sam("qrB"), 0.5);
        src.push_frozen(member_sam("qrC"), 0.5);
        src.sync(&toks("qr"));
        let d = src.draft(1, 2);
        assert_eq!(d.member, Some(0));
        assert_eq!(d.tokens, toks("A"));
    }

    #[test]
    fn composite_empty_when_nothing_matches() {
        let a = SuffixAutomaton::from_tokens(&toks("abc")).unwrap();
        let src = CompositeDraftSource::new(a, 1.0);
        assert_eq!(src.draft(3, 2), CompositeDraft::default());
    }

    #[test]
    fn insert_verified_only_extends_session() {
        let a = SuffixAutomaton::from_tokens(&toks("abc")).unwrap();
        let mut src = CompositeDraftSource::new(a, 1.0);
        let frozen = member_sam("abcd");
        src.push_frozen(frozen.clone(), 0.5);
        src.insert_verified(&toks("ab")).unwrap();
        assert_eq!(src.session().corpus(), toks("abcab").as_slice());
        assert_eq!(src.members()[1].automaton().corpus(), toks("abcd").as_slice());
        assert_eq!(src.members()[1].cursor().match_len(), 2);
        // Session cursor was advanced before each extension, so it matches
        // the earlier "ab" and drafts the continuation "c".
        let d = src
            .clone()
            .with_policy(DraftPolicy::LatestThenEarliest)
            .draft(1, 2);
        assert_eq!(d.tokens, toks("c"));
    }

    #[test]
    fn insert_verified_propagates_capacity_error() {
        let a = SuffixAutomaton::new().with_capacity_limit(2);
        let mut src = CompositeDraftSource::new(a, 1.0);
        assert!(src.insert_verified(&[1, 2, 3]).is_err());
    }
}
