//! Bodies of `run` and `sam`, kept free of argument parsing so tests and
//! `verify` can call them directly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use agentinfer_core::sam::{DraftPolicy, MatchCursor, SuffixAutomaton, TokenId};
use agentinfer_sim::config::{ScenarioConfig, ScenarioKind};
use agentinfer_sim::report::MetricsReport;
use agentinfer_sim::scenarios::{
    collab_compare, composition, compress_compare, ote_vs_context, run_scenario, sam_async,
    sched_compare, OteCurve, OteSweep,
};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    /// Human-readable digest printed after the run.
    pub summary: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path.display(), e))
}

fn file_label(label: &str) -> String {
    label.trim_start_matches('+').replace(|c: char| !c.is_ascii_alphanumeric() && c != '_', "_")
}

fn write_reports(
    reports: &[MetricsReport],
    dir: &Path,
    stem: &str,
    suffixed: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for r in reports {
        let base = if suffixed {
            format!("{stem}_{}", file_label(&r.label))
        } else {
            stem.to_string()
        };
        let json = dir.join(format!("{base}.json"));
        write_file(&json, r.to_json().as_bytes())?;
        let csv = dir.join(format!("{base}.csv"));
        write_file(&csv, r.csv_string().as_bytes())?;
        files.push(json);
        files.push(csv);
    }
    Ok(files)
}

/// One line per report with the headline metrics.
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let mut s = format!(
        "{:<12} {:>9} {:>10} {:>8} {:>8} {:>7} {:>6}\n",
        "label", "qps", "task_e2e", "ttft", "tpot", "hit", "ote"
    );
    for r in reports {
        let m = &r.summary;
        let _ = writeln!(
            s,
            "{:<12} {:>9.5} {:>10.2} {:>8.4} {:>8.5} {:>7.3} {:>6.3}",
            r.label, m.qps, m.mean_task_e2e, m.mean_ttft, m.mean_tpot, m.hit_rate, m.ote
        );
    }
    s
}

/// Policies ranked by hit rate and by mean task latency.
pub fn ordering_summary(reports: &[MetricsReport]) -> String {
    let mut by_hit: Vec<&MetricsReport> = reports.iter().collect();
    by_hit.sort_by(|a, b| b.summary.hit_rate.total_cmp(&a.summary.hit_rate));
    let mut by_e2e: Vec<&MetricsReport> = reports.iter().collect();
    by_e2e.sort_by(|a, b| a.summary.mean_task_e2e.total_cmp(&b.summary.mean_task_e2e));
    let hit: Vec<String> = by_hit
        .iter()
        .map(|r| format!("{} {:.3}", r.label, r.summary.hit_rate))
        .collect();
    let e2e: Vec<String> = by_e2e
        .iter()
        .map(|r| format!("{} {:.2}s", r.label, r.summary.mean_task_e2e))
        .collect();
    let rate = |label: &str| {
        reports
            .iter()
            .find(|r| r.label == label)
            .map(|r| (r.summary.hit_rate, r.summary.mean_task_e2e))
    };
    let mut s = format!("hit rate:      {}\nmean task e2e: {}\n", hit.join(" > "), e2e.join(" < "));
    if let (Some(f), Some(j), Some(a)) = (rate("fcfs"), rate("sjf"), rate("agentsched")) {
        let _ = writeln!(
            s,
            "agentsched > fcfs > sjf on hit rate: {}\nagentsched e2e below fcfs: {}",
            a.0 > f.0 && f.0 > j.0,
            a.1 < f.1
        );
    }
    s
}

fn ote_csv(curve: &OteCurve) -> String {
    let mut s = String::from("context_len,sam_ote,sam_shr,memory_ote,memory_shr\n");
    for p in &curve.points {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            p.context_len, p.sam_ote, p.sam_shr, p.memory_ote, p.memory_shr
        );
    }
    s
}

/// Runs the scenario selected by `cfg.scenario` and writes its reports
/// under `dir`, named after `cfg.output.name`.
pub fn run(cfg: &ScenarioConfig, seed: u64, dir: &Path) -> Result<RunOutcome, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    let stem = cfg.output.name.as_str();
    let multi = |reports: Vec<MetricsReport>, extra: String| -> Result<RunOutcome, CliError> {
        let files = write_reports(&reports, dir, stem, true)?;
        Ok(RunOutcome {
            files,
            summary: summary_table(&reports) + &extra,
        })
    };
    match cfg.scenario {
        ScenarioKind::Single => {
            let r = run_scenario(cfg, seed)?;
            let files = write_reports(std::slice::from_ref(&r), dir, stem, false)?;
            Ok(RunOutcome {
                files,
                summary: summary_table(&[r]),
            })
        }
        ScenarioKind::SchedCompare => {
            let reports = sched_compare(cfg, seed)?;
            let order = ordering_summary(&reports);
            multi(reports, order)
        }
        ScenarioKind::SamAsync => multi(sam_async(cfg, seed)?, String::new()),
        ScenarioKind::CollabCompare => multi(collab_compare(cfg, seed)?, String::new()),
        ScenarioKind::CompressCompare => {
            let reports = compress_compare(cfg, seed)?;
            let (off, on) = (&reports[0].summary, &reports[1].summary);
            let extra = format!(
                "peak context tokens: {} -> {} ({:.1}% lower), applies {}, reasoning intact {}\n",
                off.peak_context_tokens,
                on.peak_context_tokens,
                100.0 * (1.0 - on.peak_context_tokens as f64 / off.peak_context_tokens.max(1) as f64),
                on.distill_applies,
                on.reasoning_intact
            );
            multi(reports, extra)
        }
        ScenarioKind::Composition => {
            let reports = composition(cfg, seed)?;
            let base = reports[0].summary.qps;
            let last = reports.last().expect("five stages").summary.qps;
            let extra = format!("total qps gain: {:.3}x\n", last / base);
            multi(reports, extra)
        }
        ScenarioKind::OteSweep => {
            let curve = ote_vs_context(cfg, seed, &OteSweep::default())?;
            let json = dir.join(format!("{stem}.json"));
            let csv = dir.join(format!("{stem}.csv"));
            let body = serde_json::to_string_pretty(&curve).expect("curve serializes");
            write_file(&json, body.as_bytes())?;
            let table = ote_csv(&curve);
            write_file(&csv, table.as_bytes())?;
            let summary = format!(
                "{table}spearman sam {:.3} memory {:.3}; non-repeating oracle ote {:.3}\n",
                curve.sam_spearman, curve.memory_spearman, curve.no_repeat_ote
            );
            Ok(RunOutcome {
                files: vec![json, csv],
                summary,
            })
        }
    }
}

/// Reads whitespace- or comma-separated token ids; `#` starts a comment.
pub fn parse_tokens(text: &str) -> Result<Vec<TokenId>, String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split(|c: char| c.is_whitespace() || c == ','))
        .filter(|w| !w.is_empty())
        .map(|w| w.parse::<TokenId>().map_err(|e| format!("bad token `{w}`: {e}")))
        .collect()
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenId>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    parse_tokens(&text).map_err(|m| CliError::Io(format!("{}: {m}", path.display())))
}

pub fn build_automaton(tokens: &[TokenId]) -> Result<SuffixAutomaton, CliError> {
    SuffixAutomaton::from_tokens(tokens).map_err(|e| CliError::Contract(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamStats {
    pub corpus_tokens: usize,
    pub distinct_tokens: usize,
    pub states: usize,
    pub transitions: usize,
    pub state_bound: usize,
    pub build_seconds: f64,
}

pub fn sam_stats(tokens: &[TokenId]) -> Result<SamStats, CliError> {
    let start = Instant::now();
    let sam = build_automaton(tokens)?;
    let build_seconds = start.elapsed().as_secs_f64();
    let mut distinct = tokens.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(SamStats {
        corpus_tokens: tokens.len(),
        distinct_tokens: distinct.len(),
        states: sam.state_count(),
        transitions: sam.states().iter().map(|s| s.transitions().count()).sum(),
        state_bound: crate::verify::state_bound(tokens.len()),
        build_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct StateDump {
    len: usize,
    link: Option<usize>,
    next: Vec<(TokenId, usize)>,
}

/// JSON dump of every state: length, suffix link and transitions.
pub fn sam_dump(sam: &SuffixAutomaton) -> String {
    let states: Vec<StateDump> = sam
        .states()
        .iter()
        .map(|s| StateDump {
            len: s.len(),
            link: s.suffix_link().map(|l| l.index()),
            next: s.transitions().map(|(t, n)| (t, n.index())).collect(),
        })
        .collect();
    serde_json::to_string(&states).expect("states serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchStep {
    pub token: TokenId,
    pub match_len: usize,
}

/// Match length after each context token, then the draft that follows.
pub fn sam_draft(
    sam: &SuffixAutomaton,
    context: &[TokenId],
    k: usize,
    min_match: usize,
    policy: DraftPolicy,
) -> (Vec<MatchStep>, Vec<TokenId>) {
    let mut cursor = MatchCursor::empty();
    let mut trace = Vec::with_capacity(context.len());
    for &t in context {
        cursor = sam.advance(cursor, t);
        trace.push(MatchStep {
            token: t,
            match_len: cursor.match_len(),
        });
    }
    (trace, sam.draft(cursor, k, min_match, policy))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_files_allow_commas_and_comments() {
        assert_eq!(parse_tokens("1 2,3\n# note\n4 # tail\n").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_tokens("1 x").is_err());
    }

    #[test]
    fn draft_follows_the_latest_occurrence() {
        let sam = build_automaton(&[1, 2, 3, 1, 2, 4]).unwrap();
        let (trace, draft) = sam_draft(&sam, &[9, 1, 2], 3, 1, DraftPolicy::LatestOnly);
        assert_eq!(trace.iter().map(|m| m.match_len).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(draft, vec![4]);
    }

    #[test]
    fn stats_count_states_of_a_unary_string() {
        let s = sam_stats(&[7; 50]).unwrap();
        assert_eq!(s.states, 51);
        assert_eq!(s.transitions, 50);
        assert!(s.states <= s.state_bound);
    }
}
