//! Run metrics and their JSON and CSV encodings.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestClass {
    Long,
    Short,
}

impl RequestClass {
    pub fn of(prompt_tokens: usize, threshold: usize) -> Self {
        if prompt_tokens >= threshold {
            RequestClass::Long
        } else {
            RequestClass::Short
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RequestClass::Long => "long",
            RequestClass::Short => "short",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    /// Planning step without tools.
    Warmup,
    /// Think step followed by tool calls.
    Think,
    /// Final answer.
    Answer,
    /// Question answering over one crawled page.
    DocQa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub session: usize,
    pub task: usize,
    pub kind: RequestKind,
    pub engine: String,
    pub class: RequestClass,
    pub arrival: f64,
    pub ttft: f64,
    pub tpot: f64,
    pub e2e: f64,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub hit_blocks: usize,
    pub need_blocks: usize,
    pub forward_passes: u64,
    pub proposed_spec_tokens: u64,
    pub accepted_spec_tokens: u64,
    pub ote: f64,
    pub shr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub session: usize,
    pub task: usize,
    pub long: bool,
    pub start: f64,
    pub end: f64,
    pub e2e: f64,
    pub loops: usize,
    pub large_steps: usize,
    pub small_steps: usize,
    pub escalations: usize,
    pub peak_context_tokens: usize,
    pub final_context_tokens: usize,
    pub distill_applies: usize,
    /// True when every reasoning entry survived all applies unchanged.
    pub reasoning_intact: bool,
}

/// One scheduling cycle on one engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSample {
    pub time: f64,
    pub engine: String,
    pub lambda: f64,
    pub queue_depth: usize,
    pub running_long: usize,
    pub running_short: usize,
    pub free_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub time: f64,
    pub engine: String,
    pub lambda: f64,
    pub class: RequestClass,
    pub request_id: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub completed_tasks: usize,
    pub completed_requests: usize,
    pub makespan: f64,
    /// Completed tasks per simulated second.
    pub qps: f64,
    pub mean_task_e2e: f64,
    pub mean_request_e2e: f64,
    pub mean_ttft: f64,
    pub mean_tpot: f64,
    /// Cached fraction of admitted prompt blocks, all engines.
    pub hit_rate: f64,
    pub evictions: u64,
    /// Generated tokens per forward pass, all requests.
    pub ote: f64,
    /// Accepted fraction of drafted tokens; 0 when nothing was drafted.
    pub shr: f64,
    pub large_steps: usize,
    pub small_steps: usize,
    pub large_step_share: f64,
    pub escalations: usize,
    pub peak_context_tokens: usize,
    pub distill_applies: usize,
    pub distill_failures: usize,
    /// Times an agent waited on a pending distillation job.
    pub distill_stalls: usize,
    /// Applies attempted inside a loop.
    pub mid_loop_applies: usize,
    pub reasoning_intact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub seed: u64,
    pub policy: String,
    pub summary: Summary,
    pub tasks: Vec<TaskRecord>,
    pub requests: Vec<RequestRecord>,
    pub lambda_series: Vec<LambdaSample>,
    pub admissions: Vec<Admission>,
}

/// Column order of the per-request CSV.
pub const CSV_COLUMNS: [&str; 10] = [
    "request_id",
    "class",
    "arrival",
    "ttft",
    "tpot",
    "e2e",
    "hit_blocks",
    "need_blocks",
    "ote",
    "shr",
];

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.requests {
            w.write_record([
                r.request_id.to_string(),
                r.class.as_str().to_string(),
                format!("{:.6}", r.arrival),
                format!("{:.6}", r.ttft),
                format!("{:.6}", r.tpot),
                format!("{:.6}", r.e2e),
                r.hit_blocks.to_string(),
                r.need_blocks.to_string(),
                format!("{:.6}", r.ote),
                format!("{:.6}", r.shr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
