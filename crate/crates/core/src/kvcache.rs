//! Paged KV-cache block pool with prefix caching.
//!
//! Prompts are split into blocks of `tokens_per_block` tokens. Each full
//! block is identified by a chained hash that commits to every token before
//! it, so a block can only be reused when the whole prefix up to and
//! including it matches. Blocks carry a reference count; unreferenced blocks
//! keep their hash and stay reusable until they are evicted in LRU order.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sam::TokenId;

pub type BlockHash = u64;
pub type RequestId = u64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn finalize(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash of one block given the hash of the block before it.
pub fn chain_hash(parent: Option<BlockHash>, block: &[TokenId]) -> BlockHash {
    let mut h = FNV_OFFSET ^ parent.map(finalize).unwrap_or(0);
    for &t in block {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    finalize(h)
}

/// Chained hashes of every full block of `tokens`.
pub fn block_hashes(tokens: &[TokenId], tokens_per_block: usize) -> Vec<BlockHash> {
    let mut out = Vec::with_capacity(tokens.len() / tokens_per_block.max(1));
    let mut parent = None;
    for block in tokens.chunks_exact(tokens_per_block.max(1)) {
        let h = chain_hash(parent, block);
        out.push(h);
        parent = Some(h);
    }
    out
}

/// Number of blocks holding `tokens` tokens.
pub fn blocks_for(tokens: usize, tokens_per_block: usize) -> usize {
    tokens.div_ceil(tokens_per_block.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RequestFootprint {
    /// Leading prompt blocks already cached.
    pub hit: usize,
    /// Prompt blocks that must be newly allocated.
    pub need: usize,
    pub prompt_tok: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("request {0} released twice")]
    DoubleRelease(RequestId),
    #[error("request {0} was never admitted")]
    UnknownRequest(RequestId),
    #[error("request {0} is already admitted")]
    AlreadyAdmitted(RequestId),
}

/// Why an admission did not fit; the pool is left unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejection {
    pub required: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub footprint: RequestFootprint,
    /// Block ids in token order: cached prefix blocks first.
    pub blocks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub admissions: u64,
    pub rejections: u64,
    pub evictions: u64,
    pub hit_blocks: u64,
    pub prompt_blocks: u64,
}

/// Fraction of admitted prompt blocks served from cache.
pub fn hit_rate(stats: &PoolStats) -> Option<f64> {
    (stats.admissions > 0 && stats.prompt_blocks > 0)
        .then(|| stats.hit_blocks as f64 / stats.prompt_blocks as f64)
}

#[derive(Debug, Clone, Default)]
struct Block {
    hash: Option<BlockHash>,
    refcount: u32,
    last_use: u64,
}

#[derive(Debug, Clone)]
enum Lease {
    Active(Allocation),
    Released,
}

#[derive(Debug, Clone)]
pub struct BlockPool {
    tokens_per_block: usize,
    blocks: Vec<Block>,
    hash_index: HashMap<BlockHash, usize>,
    /// Unreferenced blocks without a hash, reused lowest id first.
    empty: BTreeSet<usize>,
    /// Unreferenced cached blocks ordered by last use.
    evictable: BTreeSet<(u64, usize)>,
    leases: HashMap<RequestId, Lease>,
    stats: PoolStats,
    tick: u64,
    epoch: u64,
}

impl BlockPool {
    pub fn new(total_blocks: usize, tokens_per_block: usize) -> Self {
        assert!(tokens_per_block >= 1, "tokens_per_block must be positive");
        Self {
            tokens_per_block,
            blocks: vec![Block::default(); total_blocks],
            hash_index: HashMap::new(),
            empty: (0..total_blocks).collect(),
            evictable: BTreeSet::new(),
            leases: HashMap::new(),
            stats: PoolStats::default(),
            tick: 0,
            epoch: 0,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn tokens_per_block(&self) -> usize {
        self.tokens_per_block
    }

    /// Blocks with a positive reference count.
    pub fn allocated_blocks(&self) -> usize {
        self.blocks.len() - self.free_blocks()
    }

    /// Blocks that an admission could claim: empty plus evictable.
    pub fn free_blocks(&self) -> usize {
        self.empty.len() + self.evictable.len()
    }

    pub fn evictable_blocks(&self) -> usize {
        self.evictable.len()
    }

    pub fn cached_blocks(&self) -> usize {
        self.hash_index.len()
    }

    pub fn stats(&self) -> &PoolStats {
        &self.stats
    }

    pub fn hit_rate(&self) -> Option<f64> {
        hit_rate(&self.stats)
    }

    /// Changes whenever a footprint computed earlier may have become stale.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_admitted(&self, request: RequestId) -> bool {
        matches!(self.leases.get(&request), Some(Lease::Active(_)))
    }

    pub fn refcount(&self, block: usize) -> u32 {
        self.blocks[block].refcount
    }

    pub fn block_hash(&self, block: usize) -> Option<BlockHash> {
        self.blocks[block].hash
    }

    pub fn contains(&self, hash: BlockHash) -> bool {
        self.hash_index.contains_key(&hash)
    }

    pub fn block_hashes(&self, tokens: &[TokenId]) -> Vec<BlockHash> {
        block_hashes(tokens, self.tokens_per_block)
    }

    /// Footprint from precomputed full-block hashes of a `prompt_tok`-token prompt.
    pub fn footprint_hashes(&self, hashes: &[BlockHash], prompt_tok: usize) -> RequestFootprint {
        let hit = hashes
            .iter()
            .take_while(|h| self.hash_index.contains_key(h))
            .count();
        let total = blocks_for(prompt_tok, self.tokens_per_block);
        RequestFootprint {
            hit,
            need: total - hit,
            prompt_tok,
        }
    }

    pub fn footprint(&self, prompt: &[TokenId]) -> RequestFootprint {
        self.footprint_hashes(&self.block_hashes(prompt), prompt.len())
    }

    fn claimable_after_pinning(&self, hashes: &[BlockHash], hit: usize) -> usize {
        let pinned_from_evictable = hashes[..hit]
            .iter()
            .filter(|h| self.blocks[self.hash_index[*h]].refcount == 0)
            .count();
        self.free_blocks() - pinned_from_evictable
    }

    /// Whether `admit` would succeed with these arguments.
    pub fn can_admit(&self, hashes: &[BlockHash], prompt_tok: usize, extra_blocks: usize) -> bool {
        let fp = self.footprint_hashes(hashes, prompt_tok);
        fp.need + extra_blocks <= self.claimable_after_pinning(hashes, fp.hit)
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn claim_block(&mut self) -> usize {
        if let Some(id) = self.empty.pop_first() {
            return id;
        }
        let (_, id) = self
            .evictable
            .pop_first()
            .expect("claim_block called without capacity");
        if let Some(h) = self.blocks[id].hash.take() {
            self.hash_index.remove(&h);
        }
        self.stats.evictions += 1;
        id
    }

    fn pin(&mut self, id: usize) {
        let b = &mut self.blocks[id];
        if b.refcount == 0 {
            self.evictable.remove(&(b.last_use, id));
        }
        b.refcount += 1;
    }

    fn set_hash(&mut self, id: usize, hash: BlockHash) {
        if self.blocks[id].hash.is_none() && !self.hash_index.contains_key(&hash) {
            self.blocks[id].hash = Some(hash);
            self.hash_index.insert(hash, id);
        }
    }

    /// Pins the cached prefix, allocates the remaining prompt blocks plus
    /// `extra_blocks` for decode growth, and registers the prompt's full
    /// blocks as cached.
    pub fn admit(
        &mut self,
        request: RequestId,
        hashes: &[BlockHash],
        prompt_tok: usize,
        extra_blocks: usize,
    ) -> Result<Result<Allocation, Rejection>, KvError> {
        if self.leases.contains_key(&request) {
            return Err(KvError::AlreadyAdmitted(request));
        }
        let fp = self.footprint_hashes(hashes, prompt_tok);
        let required = fp.need + extra_blocks;
        let available = self.claimable_after_pinning(hashes, fp.hit);
        if required > available {
            self.stats.rejections += 1;
            return Ok(Err(Rejection {
                required,
                available,
            }));
        }
        self.epoch += 1;
        let tick = self.next_tick();
        let mut blocks = Vec::with_capacity(fp.hit + required);
        for h in &hashes[..fp.hit] {
            let id = self.hash_index[h];
            self.pin(id);
            self.blocks[id].last_use = tick;
            blocks.push(id);
        }
        for i in 0..required {
            let id = self.claim_block();
            let b = &mut self.blocks[id];
            b.refcount = 1;
            b.last_use = tick;
            if let Some(&h) = hashes.get(fp.hit + i) {
                self.set_hash(id, h);
            }
            blocks.push(id);
        }
        self.stats.admissions += 1;
        self.stats.hit_blocks += fp.hit as u64;
        self.stats.prompt_blocks += (fp.hit + fp.need) as u64;
        let alloc = Allocation {
            footprint: fp,
            blocks,
        };
        self.leases.insert(request, Lease::Active(alloc.clone()));
        Ok(Ok(alloc))
    }

    /// Drops the request's references. `final_hashes` are the full-block
    /// hashes of its prompt plus output; blocks not yet cached take them so
    /// later requests extending this conversation can hit.
    pub fn release(&mut self, request: RequestId, final_hashes: &[BlockHash]) -> Result<(), KvError> {
        let alloc = match self.leases.get_mut(&request) {
            None => return Err(KvError::UnknownRequest(request)),
            Some(Lease::Released) => return Err(KvError::DoubleRelease(request)),
            Some(lease) => match std::mem::replace(lease, Lease::Released) {
                Lease::Active(a) => a,
                Lease::Released => unreachable!(),
            },
        };
        self.epoch += 1;
        for (i, &id) in alloc.blocks.iter().enumerate() {
            if let Some(&h) = final_hashes.get(i) {
                self.set_hash(id, h);
            }
        }
        // Walk back to front so the prefix ends up most recently used and the
        // tail is evicted first.
        for &id in alloc.blocks.iter().rev() {
            let tick = self.next_tick();
            let b = &mut self.blocks[id];
            b.refcount -= 1;
            b.last_use = tick;
            if b.refcount == 0 {
                if b.hash.is_some() {
                    self.evictable.insert((tick, id));
                } else {
                    self.empty.insert(id);
                }
            }
        }
        Ok(())
    }

    /// Caches the chain `hashes` without a request reference, as when a
    /// context is precomputed off the critical path. Stops when no block can
    /// be claimed. Returns the number of newly cached blocks.
    pub fn prewarm(&mut self, hashes: &[BlockHash]) -> usize {
        let mut added = 0;
        for &h in hashes {
            if let Some(&id) = self.hash_index.get(&h) {
                if self.blocks[id].refcount == 0 {
                    let tick = self.next_tick();
                    let b = &mut self.blocks[id];
                    self.evictable.remove(&(b.last_use, id));
                    b.last_use = tick;
                    self.evictable.insert((tick, id));
                }
                continue;
            }
            if self.free_blocks() == 0 {
                break;
            }
            self.epoch += 1;
            let id = self.claim_block();
            let tick = self.next_tick();
            self.blocks[id].last_use = tick;
            self.set_hash(id, h);
            self.evictable.insert((tick, id));
            added += 1;
        }
        added
    }
}
