//! Cache-aware hybrid request scheduler.
//!
//! A shadow price `lambda` measures KV-cache pressure: queued block demand
//! against the free capacity left after cached prefixes are counted. Low
//! pressure makes the score behave like shortest-job-first on prompt length;
//! high pressure switches the penalty to newly needed blocks so requests
//! with large cached prefixes go first.

use serde::{Deserialize, Serialize};

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiCorrection {
    pub enabled: bool,
    pub k_p: f64,
    pub k_i: f64,
    /// Bound on the magnitude of the correction added to lambda.
    pub limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerParams {
    /// Largest shadow price (score units per block).
    pub lambda_max: f64,
    /// Steepness of the pressure-to-price sigmoid.
    pub k: f64,
    /// Denominator guard when no capacity is left (blocks).
    pub epsilon: f64,
    /// Reward per cached prefix block.
    pub a: f64,
    /// Base penalty per needed block.
    pub b: f64,
    /// Reward per second of waiting.
    pub c: f64,
    /// Tokens per KV block; taken from the pool.
    #[serde(skip)]
    pub tokens_per_block: usize,
    /// Proportional-integral correction on top of the sigmoid price.
    pub pi: PiCorrection,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            lambda_max: 2.0,
            k: 4.0,
            epsilon: 1.0,
            a: 1.0,
            b: 0.5,
            c: 0.05,
            tokens_per_block: 16,
            pi: PiCorrection::default(),
        }
    }
}

impl SchedulerParams {
    /// Returns the name of the first invalid field with a reason.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let positive = [
            ("lambda_max", self.lambda_max),
            ("k", self.k),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err((name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err((name, format!("must be non-negative, got {v}")));
            }
        }
        if self.tokens_per_block == 0 {
            return Err(("tokens_per_block", "must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SchedulerState {
    pub lambda: f64,
    /// Accumulated demand gap for the PI correction.
    pub integral: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueEntry {
    pub id: RequestId,
    pub prompt_tok: usize,
    pub hit: usize,
    pub need: usize,
    /// Seconds since arrival.
    pub wait: f64,
    /// Arrival order; smaller is older.
    pub arrival: u64,
}

/// Queue-wide cache pressure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pressure {
    pub hits: f64,
    pub unreserved: f64,
    pub demand: f64,
    pub ratio: f64,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn pressure(queue: &[QueueEntry], free_blocks: usize, epsilon: f64) -> Pressure {
    let hits: f64 = queue.iter().map(|e| e.hit as f64).sum();
    let demand: f64 = queue.iter().map(|e| e.need as f64).sum();
    let unreserved = (free_blocks as f64 - hits).max(0.0);
    Pressure {
        hits,
        unreserved,
        demand,
        ratio: demand / (unreserved + epsilon),
    }
}

/// Shadow price for a pressure ratio, before any PI correction.
pub fn price_for_ratio(ratio: f64, params: &SchedulerParams) -> f64 {
    params.lambda_max * logistic(params.k * (ratio - 1.0))
}

/// Recomputes the shadow price from the current queue and free capacity.
pub fn update_lambda(
    state: &mut SchedulerState,
    queue: &[QueueEntry],
    free_blocks: usize,
    params: &SchedulerParams,
) -> f64 {
    let p = pressure(queue, free_blocks, params.epsilon);
    let mut lambda = price_for_ratio(p.ratio, params);
    if params.pi.enabled {
        let gap = p.demand - p.unreserved;
        state.integral += gap;
        let limit = params.pi.limit.abs();
        let correction = (params.pi.k_p * gap + params.pi.k_i * state.integral).clamp(-limit, limit);
        lambda = (lambda + correction).clamp(0.0, params.lambda_max);
    }
    state.lambda = lambda;
    lambda
}

/// Weight on prompt length versus needed blocks at price `lambda`.
pub fn sjf_mix(lambda: f64, params: &SchedulerParams) -> f64 {
    (1.0 - lambda / params.lambda_max).clamp(0.0, 1.0)
}

pub fn score(entry: &QueueEntry, lambda: f64, params: &SchedulerParams) -> f64 {
    let need_tok = entry.prompt_tok as f64 / params.tokens_per_block as f64;
    let mix = sjf_mix(lambda, params);
    let need_eff = mix * need_tok + (1.0 - mix) * entry.need as f64;
    params.a * entry.hit as f64 - (params.b + lambda) * need_eff + params.c * entry.wait
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Fcfs,
    Sjf,
    #[default]
    #[serde(alias = "agent_sched")]
    Agentsched,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Fcfs => "fcfs",
            Policy::Sjf => "sjf",
            Policy::Agentsched => "agentsched",
        }
    }
}

/// Queue indices in the order `policy` would try them.
pub fn order(queue: &[QueueEntry], policy: Policy, lambda: f64, params: &SchedulerParams) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..queue.len()).collect();
    match policy {
        Policy::Fcfs => idx.sort_by_key(|&i| queue[i].arrival),
        Policy::Sjf => idx.sort_by_key(|&i| (queue[i].prompt_tok, queue[i].arrival)),
        Policy::Agentsched => {
            let scores: Vec<f64> = queue.iter().map(|e| score(e, lambda, params)).collect();
            idx.sort_by(|&x, &y| {
                scores[y]
                    .total_cmp(&scores[x])
                    .then(queue[x].arrival.cmp(&queue[y].arrival))
            });
        }
    }
    idx
}

/// First request in policy order for which `feasible` holds.
pub fn select<F>(
    queue: &[QueueEntry],
    policy: Policy,
    lambda: f64,
    params: &SchedulerParams,
    mut feasible: F,
) -> Option<RequestId>
where
    F: FnMut(&QueueEntry) -> bool,
{
    order(queue, policy, lambda, params)
        .into_iter()
        .map(|i| &queue[i])
        .find(|e| feasible(e))
        .map(|e| e.id)
}

pub fn baseline_fcfs<F: FnMut(&QueueEntry) -> bool>(queue: &[QueueEntry], feasible: F) -> Option<RequestId> {
    select(queue, Policy::Fcfs, 0.0, &SchedulerParams::default(), feasible)
}

pub fn baseline_sjf<F: FnMut(&QueueEntry) -> bool>(queue: &[QueueEntry], feasible: F) -> Option<RequestId> {
    select(queue, Policy::Sjf, 0.0, &SchedulerParams::default(), feasible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: u64, prompt_tok: usize, hit: usize, need: usize, wait: f64) -> QueueEntry {
        QueueEntry {
            id,
            prompt_tok,
            hit,
            need,
            wait,
            arrival: id,
        }
    }

    #[test]
    fn balanced_pressure_gives_half_price() {
        let p = SchedulerParams::default();
        // 40 hit, 100 free: unreserved 60, so demand 61 balances with epsilon 1.
        let q = [entry(0, 0, 40, 61, 0.0)];
        let mut s = SchedulerState::default();
        let l = update_lambda(&mut s, &q, 100, &p);
        assert!((l - 0.5 * p.lambda_max).abs() < 1e-12);
    }

    #[test]
    fn empty_queue_gives_low_price() {
        let p = SchedulerParams::default();
        let mut s = SchedulerState::default();
        let l = update_lambda(&mut s, &[], 100, &p);
        assert!((l - p.lambda_max * logistic(-p.k)).abs() < 1e-15);
        assert!(l < 0.04);
    }

    #[test]
    fn worked_pressure_example() {
        let p = SchedulerParams {
            lambda_max: 2.0,
            k: 4.0,
            epsilon: 1.0,
            ..SchedulerParams::default()
        };
        let q = [entry(0, 0, 25, 70, 0.0), entry(1, 0, 15, 50, 0.0)];
        let pr = pressure(&q, 100, 1.0);
        assert_eq!(pr.unreserved, 60.0);
        assert!((pr.ratio - 1.967_213_114_754_098_4).abs() < 1e-12);
        let mut s = SchedulerState::default();
        let l = update_lambda(&mut s, &q, 100, &p);
        // 2 * logistic(4 * (120 / 61 - 1)), evaluated independently.
        assert!((l - 1.959_089_664_676_71).abs() < 1e-12, "lambda {l}");
    }

    #[test]
    fn worked_score_example() {
        let p = SchedulerParams {
            lambda_max: 2.0,
            a: 1.0,
            b: 0.5,
            c: 0.2,
            tokens_per_block: 16,
            ..SchedulerParams::default()
        };
        let e = entry(0, 160, 8, 2, 3.0);
        assert!((score(&e, 1.0, &p) - (-0.4)).abs() < 1e-12);
    }

    #[test]
    fn zero_price_is_pure_sjf_penalty() {
        let p = SchedulerParams {
            a: 0.0,
            c: 0.0,
            ..SchedulerParams::default()
        };
        let e = entry(0, 320, 5, 1, 9.0);
        assert_eq!(score(&e, 0.0, &p), -p.b * 20.0);
    }

    #[test]
    fn full_price_penalizes_needed_blocks() {
        let p = SchedulerParams::default();
        let e = entry(0, 320, 5, 3, 0.0);
        let want = p.a * 5.0 - (p.b + p.lambda_max) * 3.0;
        assert!((score(&e, p.lambda_max, &p) - want).abs() < 1e-12);
    }

    #[test]
    fn baselines_follow_definitions() {
        let q = [entry(0, 10_000, 0, 1, 0.0), entry(1, 1_000, 0, 1, 0.0)];
        assert_eq!(baseline_fcfs(&q, |_| true), Some(0));
        assert_eq!(baseline_sjf(&q, |_| true), Some(1));
        let tie = [entry(0, 500, 0, 1, 0.0), entry(1, 500, 0, 1, 0.0)];
        assert_eq!(baseline_sjf(&tie, |_| true), Some(0));
    }

    #[test]
    fn select_skips_infeasible_and_handles_empty() {
        let p = SchedulerParams::default();
        let q = [entry(0, 100, 0, 7, 0.0), entry(1, 200, 0, 13, 0.0)];
        assert_eq!(select(&q, Policy::Agentsched, 0.0, &p, |e| e.need > 10), Some(1));
        assert_eq!(select(&q, Policy::Agentsched, 0.0, &p, |_| false), None);
        assert_eq!(select(&[], Policy::Fcfs, 0.0, &p, |_| true), None);
    }

    #[test]
    fn score_ties_go_to_older_arrival() {
        let p = SchedulerParams::default();
        let mut a = entry(5, 100, 1, 1, 0.0);
        a.arrival = 9;
        let mut b = a;
        b.id = 6;
        b.arrival = 3;
        assert_eq!(select(&[a, b], Policy::Agentsched, 1.0, &p, |_| true), Some(6));
    }

    #[test]
    fn pi_correction_is_disabled_by_default_and_bounded() {
        let q = [entry(0, 0, 0, 300, 0.0)];
        let plain = update_lambda(&mut SchedulerState::default(), &q, 100, &SchedulerParams::default());
        let p = SchedulerParams {
            pi: PiCorrection {
                enabled: true,
                k_p: -1.0,
                k_i: 0.0,
                limit: 0.25,
            },
            ..SchedulerParams::default()
        };
        let corrected = update_lambda(&mut SchedulerState::default(), &q, 100, &p);
        assert!((plain - corrected - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lambda_monotone_over_grid() {
        let p = SchedulerParams::default();
        let lambdas: Vec<f64> = (0..100)
            .map(|d| update_lambda(&mut SchedulerState::default(), &[entry(0, 0, 20, d, 0.0)], 80, &p))
            .collect();
        assert!(lambdas.windows(2).all(|w| w[0] < w[1]));
        let by_free: Vec<f64> = (0..100)
            .map(|n| update_lambda(&mut SchedulerState::default(), &[entry(0, 0, 0, 5, 0.0)], n, &p))
            .collect();
        assert!(by_free.windows(2).all(|w| w[0] > w[1]));
    }

    fn queue_strategy() -> impl Strategy<Value = Vec<QueueEntry>> {
        proptest::collection::vec((1usize..20_000, 0usize..50, 0usize..50, 0.0f64..100.0), 1..12).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (t, h, n, w))| entry(i as u64, t, h, n, w))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn lambda_stays_in_open_range(q in queue_strategy(), free in 0usize..500) {
            let p = SchedulerParams::default();
            let l = update_lambda(&mut SchedulerState::default(), &q, free, &p);
            // The logistic saturates to exactly 1.0 in f64 for very large ratios.
            prop_assert!(l > 0.0 && l <= p.lambda_max);
            let ratio = pressure(&q, free, p.epsilon).ratio;
            if p.k * (ratio - 1.0) < 30.0 {
                prop_assert!(l < p.lambda_max);
            }
        }

        #[test]
        fn sjf_limit_matches_sjf_order(q in queue_strategy()) {
            let p = SchedulerParams { a: 0.0, c: 0.0, ..SchedulerParams::default() };
            prop_assert_eq!(order(&q, Policy::Agentsched, 0.0, &p), order(&q, Policy::Sjf, 0.0, &p));
        }

        #[test]
        fn kv_limit_prefers_hits(need in 0usize..40, h1 in 0usize..40, h2 in 0usize..40, w in 0.0f64..50.0) {
            prop_assume!(h1 != h2);
            let p = SchedulerParams::default();
            let x = entry(0, 1234, h1, need, w);
            let y = entry(1, 999, h2, need, w);
            let (sx, sy) = (score(&x, p.lambda_max, &p), score(&y, p.lambda_max, &p));
            prop_assert_eq!(h1 > h2, sx > sy);
        }

        #[test]
        fn waiting_eventually_wins(prompt in 1usize..20_000, need in 0usize..100, rival in -1000.0f64..1000.0) {
            let p = SchedulerParams::default();
            let mut e = entry(0, prompt, 0, need, 0.0);
            let mut t = 0.0;
            while score(&e, p.lambda_max, &p) <= rival {
                t += 1000.0;
                e.wait = t;
                prop_assert!(t < 1e9);
            }
        }
    }
}
