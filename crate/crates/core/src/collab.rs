//! Dual-model escalation controller.
//!
//! A large model plans for up to `large_warmup_steps` think steps, then a
//! small model takes over. After every think step the active model emits a
//! PROGRESS block; a small-model FALSE escalates to the large model, and
//! the large model hands control back once it reports TRUE or has used
//! `large_steps_per_escalation` consecutive steps.
//!
//! [`CollabController`] is the bare state machine so that callers with
//! their own notion of time (the simulator) can drive it step by step;
//! [`run_collab`] drives it synchronously over two [`ModelAdapter`]s.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROGRESS_OPEN: &str = "===PROGRESS===";
pub const PROGRESS_CLOSE: &str = "===END_PROGRESS===";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Large,
    Small,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Large => "large",
            Role::Small => "small",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Planning without tool calls.
    Think,
    ThinkAndTools,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressBlock {
    pub reason: String,
    pub value: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgressParseError {
    #[error("missing {PROGRESS_OPEN} marker")]
    MissingOpen,
    #[error("missing {PROGRESS_CLOSE} marker after {PROGRESS_OPEN}")]
    MissingClose,
    #[error("missing <{tag}> tag in block {fragment:?}")]
    MissingTag { tag: &'static str, fragment: String },
    #[error("progress value must be TRUE or FALSE, got {fragment:?}")]
    BadValue { fragment: String },
}

fn tagged<'a>(body: &'a str, tag: &'static str) -> Result<&'a str, ProgressParseError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let missing = || ProgressParseError::MissingTag {
        tag,
        fragment: body.to_string(),
    };
    let start = body.find(&open).ok_or_else(missing)? + open.len();
    let len = body[start..].find(&close).ok_or_else(missing)?;
    Ok(&body[start..start + len])
}

/// Parses the first PROGRESS block in `text`; surrounding text is ignored.
pub fn parse_progress(text: &str) -> Result<ProgressBlock, ProgressParseError> {
    let start = text.find(PROGRESS_OPEN).ok_or(ProgressParseError::MissingOpen)? + PROGRESS_OPEN.len();
    let len = text[start..]
        .find(PROGRESS_CLOSE)
        .ok_or(ProgressParseError::MissingClose)?;
    let body = &text[start..start + len];
    let reason = tagged(body, "reason")?.trim().to_string();
    let raw = tagged(body, "value")?;
    let value = match raw.trim() {
        "TRUE" => true,
        "FALSE" => false,
        _ => {
            return Err(ProgressParseError::BadValue {
                fragment: raw.to_string(),
            })
        }
    };
    Ok(ProgressBlock { reason, value })
}

/// Formats a PROGRESS block in the canonical wire layout.
pub fn render_progress(reason: &str, value: bool) -> String {
    format!(
        "{PROGRESS_OPEN}\n<reason> {reason} </reason>\n<value> {} </value>\n{PROGRESS_CLOSE}\n",
        if value { "TRUE" } else { "FALSE" }
    )
}

/// Progress signal after the malformed-block policy has been applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgressSignal {
    pub value: bool,
    /// The block did not parse and was read as FALSE.
    pub malformed: bool,
}

impl ProgressSignal {
    pub fn from_text(text: &str) -> Self {
        match parse_progress(text) {
            Ok(b) => Self {
                value: b.value,
                malformed: false,
            },
            Err(_) => Self {
                value: false,
                malformed: true,
            },
        }
    }

    pub fn of(value: bool) -> Self {
        Self {
            value,
            malformed: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollabConfig {
    /// Large-model think steps before the small model takes over.
    pub large_warmup_steps: usize,
    /// Consecutive large-model steps allowed per escalation.
    pub large_steps_per_escalation: usize,
    /// Hard cap on think steps of one run.
    pub max_total_steps: usize,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            large_warmup_steps: 2,
            large_steps_per_escalation: 2,
            max_total_steps: 64,
        }
    }
}

impl CollabConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.large_steps_per_escalation == 0 {
            return Err(("large_steps_per_escalation", "must be at least 1".into()));
        }
        if self.max_total_steps == 0 {
            return Err(("max_total_steps", "must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// Warm-up over; the small model takes over.
    HandOff,
    Escalate,
    /// Large model reported progress.
    DeEscalate,
    /// Large model used its whole per-escalation budget.
    BudgetExhausted,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollabEvent {
    pub step: usize,
    pub role: Role,
    pub kind: StepKind,
    pub progress: bool,
    pub malformed: bool,
    pub transition: Option<Transition>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollabTrace {
    pub events: Vec<CollabEvent>,
    pub large_steps: usize,
    pub small_steps: usize,
    pub escalations: usize,
    pub de_escalations: usize,
    pub malformed_blocks: usize,
}

impl CollabTrace {
    /// Large-model steps taken inside each escalation, in order.
    pub fn large_steps_per_escalation(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut current: Option<usize> = None;
        for e in &self.events {
            if e.transition == Some(Transition::Escalate) {
                if let Some(n) = current.take() {
                    out.push(n);
                }
                current = Some(0);
                continue;
            }
            if e.role == Role::Large {
                if let Some(n) = current.as_mut() {
                    *n += 1;
                }
            } else if let Some(n) = current.take() {
                out.push(n);
            }
        }
        out.extend(current);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CollabError {
    #[error("run exceeded {limit} think steps without a final answer")]
    Truncated { limit: usize, trace: Box<CollabTrace> },
    #[error("no step is pending; call next_step first")]
    NoPendingStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Warmup,
    Collaborate,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedStep {
    pub role: Role,
    pub kind: StepKind,
}

/// Step-by-step escalation state machine.
#[derive(Debug, Clone)]
pub struct CollabController {
    cfg: CollabConfig,
    phase: Phase,
    mode: Role,
    large_steps_used: usize,
    pending: Option<PlannedStep>,
    trace: CollabTrace,
}

impl CollabController {
    pub fn new(cfg: CollabConfig) -> Self {
        Self {
            cfg,
            phase: Phase::Warmup,
            mode: Role::Large,
            large_steps_used: 0,
            pending: None,
            trace: CollabTrace::default(),
        }
    }

    pub fn trace(&self) -> &CollabTrace {
        &self.trace
    }

    pub fn into_trace(self) -> CollabTrace {
        self.trace
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// The model that acts next, or `None` once the run has finished.
    /// `is_final` reports whether the context already holds a final answer.
    pub fn next_step(&mut self, is_final: bool) -> Result<Option<PlannedStep>, CollabError> {
        if self.phase == Phase::Warmup && self.large_steps_used >= self.cfg.large_warmup_steps {
            self.phase = Phase::Collaborate;
            self.mode = Role::Small;
            if let Some(last) = self.trace.events.last_mut() {
                last.transition.get_or_insert(Transition::HandOff);
            }
        }
        if self.phase == Phase::Collaborate && is_final {
            self.phase = Phase::Done;
        }
        if self.phase == Phase::Done {
            self.pending = None;
            return Ok(None);
        }
        if self.trace.events.len() >= self.cfg.max_total_steps {
            return Err(CollabError::Truncated {
                limit: self.cfg.max_total_steps,
                trace: Box::new(self.trace.clone()),
            });
        }
        let step = match self.phase {
            Phase::Warmup => PlannedStep {
                role: Role::Large,
                kind: StepKind::Think,
            },
            _ => PlannedStep {
                role: self.mode,
                kind: StepKind::ThinkAndTools,
            },
        };
        self.pending = Some(step);
        Ok(Some(step))
    }

    /// Records the progress check that followed the pending step.
    pub fn record(&mut self, progress: ProgressSignal, is_final: bool) -> Result<(), CollabError> {
        let step = self.pending.take().ok_or(CollabError::NoPendingStep)?;
        let mut transition = None;
        match step.role {
            Role::Large => self.trace.large_steps += 1,
            Role::Small => self.trace.small_steps += 1,
        }
        if progress.malformed {
            self.trace.malformed_blocks += 1;
        }
        match (self.phase, step.role) {
            (Phase::Warmup, _) => {
                self.large_steps_used += 1;
                if progress.value && is_final {
                    self.phase = Phase::Done;
                    transition = Some(Transition::Finish);
                }
            }
            (Phase::Collaborate, Role::Small) => {
                if !progress.value {
                    self.mode = Role::Large;
                    self.large_steps_used = 0;
                    self.trace.escalations += 1;
                    transition = Some(Transition::Escalate);
                }
            }
            (Phase::Collaborate, Role::Large) => {
                self.large_steps_used += 1;
                if progress.value {
                    if is_final {
                        self.phase = Phase::Done;
                        transition = Some(Transition::Finish);
                    } else {
                        self.mode = Role::Small;
                        self.trace.de_escalations += 1;
                        transition = Some(Transition::DeEscalate);
                    }
                } else if self.large_steps_used >= self.cfg.large_steps_per_escalation {
                    self.mode = Role::Small;
                    self.trace.de_escalations += 1;
                    transition = Some(Transition::BudgetExhausted);
                }
            }
            (Phase::Done, _) => unreachable!("no step is planned after completion"),
        }
        self.trace.events.push(CollabEvent {
            step: self.trace.events.len(),
            role: step.role,
            kind: step.kind,
            progress: progress.value,
            malformed: progress.malformed,
            transition,
        });
        Ok(())
    }
}

/// Output of one think step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepOutput {
    pub text: String,
    /// Terminal event: the step produced the final answer.
    pub final_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextEntry {
    pub role: Role,
    pub kind: StepKind,
    pub text: String,
}

/// Conversation state shared by both models.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollabContext {
    pub query: String,
    pub entries: Vec<ContextEntry>,
    pub final_answer: Option<String>,
}

impl CollabContext {
    pub fn new(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            ..Self::default()
        }
    }

    pub fn is_final(&self) -> bool {
        self.final_answer.is_some()
    }

    /// Final answer if one was produced, else the latest step text.
    pub fn extract_answer(&self) -> String {
        self.final_answer
            .clone()
            .or_else(|| self.entries.last().map(|e| e.text.clone()))
            .unwrap_or_default()
    }

    fn push(&mut self, role: Role, kind: StepKind, out: StepOutput) {
        self.entries.push(ContextEntry {
            role,
            kind,
            text: out.text,
        });
        if out.final_answer.is_some() {
            self.final_answer = out.final_answer;
        }
    }
}

pub trait ModelAdapter {
    fn role(&self) -> Role;
    fn think(&mut self, ctx: &CollabContext) -> StepOutput;
    fn think_and_tools(&mut self, ctx: &CollabContext) -> StepOutput;
    /// Raw text expected to contain a PROGRESS block.
    fn progress_check(&mut self, ctx: &CollabContext) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollabOutcome {
    pub answer: String,
    pub trace: CollabTrace,
}

/// Runs the escalation controller to completion over two adapters.
pub fn run_collab(
    query: &str,
    large: &mut dyn ModelAdapter,
    small: &mut dyn ModelAdapter,
    cfg: &CollabConfig,
) -> Result<CollabOutcome, CollabError> {
    debug_assert_eq!(large.role(), Role::Large);
    debug_assert_eq!(small.role(), Role::Small);
    let mut ctx = CollabContext::new(query);
    let mut ctl = CollabController::new(*cfg);
    while let Some(step) = ctl.next_step(ctx.is_final())? {
        let model: &mut dyn ModelAdapter = match step.role {
            Role::Large => &mut *large,
            Role::Small => &mut *small,
        };
        let out = match step.kind {
            StepKind::Think => model.think(&ctx),
            StepKind::ThinkAndTools => model.think_and_tools(&ctx),
        };
        ctx.push(step.role, step.kind, out);
        let progress = ProgressSignal::from_text(&model.progress_check(&ctx));
        ctl.record(progress, ctx.is_final())?;
    }
    Ok(CollabOutcome {
        answer: ctx.extract_answer(),
        trace: ctl.into_trace(),
    })
}

/// Deterministic adapter replaying scripted progress reports.
#[derive(Debug, Clone)]
pub struct ScriptedAdapter {
    role: Role,
    /// Raw progress texts, repeated from the last one when exhausted.
    progress: Vec<String>,
    /// The n-th think call (1-based) returns the final answer.
    final_on_call: Option<usize>,
    calls: usize,
    checks: usize,
}

impl ScriptedAdapter {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            progress: vec![render_progress("scripted", true)],
            final_on_call: None,
            calls: 0,
            checks: 0,
        }
    }

    pub fn always(role: Role, value: bool) -> Self {
        Self::new(role).with_progress(vec![render_progress("scripted", value)])
    }

    pub fn with_progress(mut self, progress: Vec<String>) -> Self {
        assert!(!progress.is_empty(), "progress script must not be empty");
        self.progress = progress;
        self
    }

    pub fn with_values(self, values: &[bool]) -> Self {
        let texts = values.iter().map(|&v| render_progress("scripted", v)).collect();
        self.with_progress(texts)
    }

    pub fn final_on_call(mut self, call: usize) -> Self {
        self.final_on_call = Some(call);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    fn step(&mut self, kind: &str) -> StepOutput {
        self.calls += 1;
        let text = format!("{} {kind} #{}", self.role, self.calls);
        let final_answer = (self.final_on_call == Some(self.calls)).then(|| format!("answer from {}", self.role));
        StepOutput { text, final_answer }
    }
}

impl ModelAdapter for ScriptedAdapter {
    fn role(&self) -> Role {
        self.role
    }

    fn think(&mut self, _ctx: &CollabContext) -> StepOutput {
        self.step("think")
    }

    fn think_and_tools(&mut self, _ctx: &CollabContext) -> StepOutput {
        self.step("think_and_tools")
    }

    fn progress_check(&mut self, _ctx: &CollabContext) -> String {
        let i = self.checks.min(self.progress.len() - 1);
        self.checks += 1;
        self.progress[i].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, b: usize) -> CollabConfig {
        CollabConfig {
            large_warmup_steps: k,
            large_steps_per_escalation: b,
            max_total_steps: 64,
        }
    }

    #[test]
    fn parses_true_and_false_blocks() {
        let text = format!("thinking...\n{}trailing", render_progress("found the page", true));
        assert_eq!(
            parse_progress(&text).unwrap(),
            ProgressBlock {
                reason: "found the page".into(),
                value: true
            }
        );
        let f = "===PROGRESS===\n<reason> stuck </reason>\n<value> FALSE </value>\n===END_PROGRESS===";
        assert!(!parse_progress(f).unwrap().value);
    }

    #[test]
    fn rejects_malformed_blocks() {
        let bad = "===PROGRESS===\n<reason> r </reason>\n<value> maybe </value>\n===END_PROGRESS===";
        assert_eq!(
            parse_progress(bad),
            Err(ProgressParseError::BadValue {
                fragment: " maybe ".into()
            })
        );
        let lower = bad.replace("maybe", "true");
        assert!(matches!(parse_progress(&lower), Err(ProgressParseError::BadValue { .. })));
        assert_eq!(parse_progress("no block"), Err(ProgressParseError::MissingOpen));
        assert_eq!(
            parse_progress("===PROGRESS===\n<value> TRUE </value>"),
            Err(ProgressParseError::MissingClose)
        );
        assert!(matches!(
            parse_progress("===PROGRESS===\n<value> TRUE </value>\n===END_PROGRESS==="),
            Err(ProgressParseError::MissingTag { tag: "reason", .. })
        ));
    }

    #[test]
    fn only_first_block_counts() {
        let text = format!("{}{}", render_progress("a", false), render_progress("b", true));
        assert!(!parse_progress(&text).unwrap().value);
    }

    #[test]
    fn small_always_true_uses_only_warmup() {
        let mut large = ScriptedAdapter::always(Role::Large, false);
        let mut small = ScriptedAdapter::always(Role::Small, true).final_on_call(5);
        let out = run_collab("q", &mut large, &mut small, &cfg(3, 2)).unwrap();
        assert_eq!(out.trace.large_steps, 3);
        assert_eq!(out.trace.small_steps, 5);
        assert_eq!(out.trace.escalations, 0);
        assert_eq!(out.answer, "answer from small");
    }

    #[test]
    fn early_exit_in_warmup() {
        let mut large = ScriptedAdapter::always(Role::Large, true).final_on_call(1);
        let mut small = ScriptedAdapter::always(Role::Small, true);
        let out = run_collab("q", &mut large, &mut small, &cfg(3, 2)).unwrap();
        assert_eq!(out.trace.large_steps, 1);
        assert_eq!(out.trace.small_steps, 0);
        assert_eq!(out.answer, "answer from large");
    }

    #[test]
    fn warmup_final_without_progress_does_not_exit() {
        let mut large = ScriptedAdapter::always(Role::Large, false).final_on_call(1);
        let mut small = ScriptedAdapter::always(Role::Small, true);
        let out = run_collab("q", &mut large, &mut small, &cfg(3, 2)).unwrap();
        // Warm-up runs all three steps; the second phase sees the answer and stops.
        assert_eq!(out.trace.large_steps, 3);
        assert_eq!(out.trace.small_steps, 0);
    }

    #[test]
    fn always_false_alternates_with_full_budgets() {
        let (k, b, m) = (2, 3, 4);
        let mut large = ScriptedAdapter::always(Role::Large, false).final_on_call(k + b * m);
        let mut small = ScriptedAdapter::always(Role::Small, false);
        let out = run_collab("q", &mut large, &mut small, &cfg(k, b)).unwrap();
        let t = &out.trace;
        assert_eq!(t.escalations, m);
        assert_eq!(t.large_steps, k + b * t.escalations);
        assert_eq!(t.large_steps_per_escalation(), vec![b; m]);
        assert_eq!(t.small_steps, m);
        let roles: Vec<Role> = t.events.iter().map(|e| e.role).collect();
        let mut want = vec![Role::Large; k];
        for _ in 0..m {
            want.push(Role::Small);
            want.extend(std::iter::repeat(Role::Large).take(b));
        }
        assert_eq!(roles, want);
    }

    #[test]
    fn malformed_progress_escalates() {
        let mut large = ScriptedAdapter::always(Role::Large, true).final_on_call(2);
        let mut small = ScriptedAdapter::new(Role::Small).with_progress(vec!["garbled".into()]);
        let out = run_collab("q", &mut large, &mut small, &cfg(1, 2)).unwrap();
        assert_eq!(out.trace.escalations, 1);
        assert_eq!(out.trace.malformed_blocks, 1);
        assert!(out.trace.events[1].malformed);
        assert_eq!(out.trace.events[1].transition, Some(Transition::Escalate));
    }

    #[test]
    fn large_progress_de_escalates() {
        let mut large = ScriptedAdapter::always(Role::Large, true);
        let mut small = ScriptedAdapter::new(Role::Small)
            .with_values(&[false, true, true])
            .final_on_call(3);
        let out = run_collab("q", &mut large, &mut small, &cfg(1, 5)).unwrap();
        let t = &out.trace;
        assert_eq!(t.escalations, 1);
        assert_eq!(t.de_escalations, 1);
        assert_eq!(t.events[2].transition, Some(Transition::DeEscalate));
        assert_eq!(t.large_steps, 2);
    }

    #[test]
    fn runaway_run_is_truncated_with_trace() {
        let mut large = ScriptedAdapter::always(Role::Large, false);
        let mut small = ScriptedAdapter::always(Role::Small, false);
        let c = CollabConfig {
            max_total_steps: 10,
            ..cfg(1, 2)
        };
        match run_collab("q", &mut large, &mut small, &c) {
            Err(CollabError::Truncated { limit, trace }) => {
                assert_eq!(limit, 10);
                assert_eq!(trace.events.len(), 10);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn zero_warmup_starts_small() {
        let mut large = ScriptedAdapter::always(Role::Large, true);
        let mut small = ScriptedAdapter::always(Role::Small, true).final_on_call(1);
        let out = run_collab("q", &mut large, &mut small, &cfg(0, 1)).unwrap();
        assert_eq!(out.trace.large_steps, 0);
        assert_eq!(out.trace.small_steps, 1);
    }

    #[test]
    fn record_without_plan_is_rejected() {
        let mut c = CollabController::new(cfg(1, 1));
        assert_eq!(c.record(ProgressSignal::of(true), false), Err(CollabError::NoPendingStep));
    }
}
