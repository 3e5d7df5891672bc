//! Linearizability checking of recorded histories against [`RestModel`].
//!
//! The search follows Wing and Gong as refined by Lowe: operations are
//! linearized one at a time, always choosing among those whose invocation
//! precedes the earliest pending completion, and backtracking when the
//! model rejects a choice. Configurations already explored, identified by
//! the set of linearized operations and the model state, are cached.
//!
//! Operations with unknown outcome may take effect at any point after
//! their invocation or not at all. A lost create may take effect under
//! any id that later responses reveal and no determinate create explains.

mod brute;
mod spans;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::hash::{BuildHasher, Hash};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::history::{edn, render_event, History, HistoryError};
use crate::model::{Effect, ModelState, ObservedOp, RestModel};
use crate::spec_model::ServiceSpec;

pub use brute::{brute_force, BRUTE_FORCE_MAX_DETERMINATE, BRUTE_FORCE_MAX_INDETERMINATE};
pub use spans::{spans, unattributed_ids, OpSpan};
use spans::{moves_for, Moves};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error("history references unknown operation \"{0}\"")]
    UnknownOperation(String),
    #[error("history too large for exhaustive search: {determinate} determinate and {indeterminate} indeterminate operations")]
    TooLarge {
        determinate: usize,
        indeterminate: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Cache entries before giving up.
    pub max_states: usize,
    pub timeout: Duration,
    pub memoize: bool,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_states: 10_000_000,
            timeout: Duration::from_secs(60),
            memoize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitHit {
    MaxStates(usize),
    Timeout(Duration),
}

impl fmt::Display for LimitHit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LimitHit::MaxStates(n) => write!(f, "state limit of {n} reached"),
            LimitHit::Timeout(t) => write!(f, "timeout of {:.1}s reached", t.as_secs_f64()),
        }
    }
}

/// One linearized operation. `assigned_id` is set when a lost create was
/// assumed to take effect under that id.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessStep {
    pub span: OpSpan,
    pub assigned_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    /// Longest linearizable prefix found.
    pub witness: Vec<WitnessStep>,
    /// The operation no position after the prefix accepts.
    pub offender: OpSpan,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Linearizable,
    NonLinearizable(Box<Counterexample>),
    Inconclusive(LimitHit),
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Linearizable => "linearizable",
            Outcome::NonLinearizable(_) => "non-linearizable",
            Outcome::Inconclusive(_) => "inconclusive",
        }
    }

    /// Same verdict class, ignoring the counterexample.
    pub fn same_class(&self, other: &Outcome) -> bool {
        self.label() == other.label()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    /// Candidate linearizations attempted.
    pub states_explored: u64,
    pub cache_entries: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub outcome: Outcome,
    pub stats: Stats,
}

impl Verdict {
    pub fn is_linearizable(&self) -> bool {
        matches!(self.outcome, Outcome::Linearizable)
    }

    /// Process exit code for this verdict.
    pub fn exit_code(&self) -> i32 {
        match self.outcome {
            Outcome::Linearizable => 0,
            Outcome::NonLinearizable(_) => 1,
            Outcome::Inconclusive(_) => 2,
        }
    }
}

/// Decides whether `history` is linearizable with respect to the REST model
/// of `spec`.
pub fn check(history: &History, spec: &ServiceSpec, limits: Limits) -> Result<Verdict, CheckError> {
    let started = Instant::now();
    let model = RestModel::new(spec);
    let spans = spans(history, spec)?;
    let mut search = Search::new(&model, spans, limits, started);
    let outcome = search.run();
    Ok(Verdict {
        outcome,
        stats: Stats {
            states_explored: search.explored,
            cache_entries: search.cache.len(),
            elapsed: started.elapsed(),
        },
    })
}

/// Applies one way of taking effect for `span`.
pub(crate) fn apply_move(
    model: &RestModel,
    state: &ModelState,
    span: &OpSpan,
    observed: Option<&ObservedOp>,
    moves: &Moves,
    index: usize,
) -> Result<(Effect, Option<String>), String> {
    match moves {
        Moves::Observed => model
            .apply(state, observed.expect("determinate span has an observation"))
            .map(|e| (e, None)),
        Moves::Unobserved(ids) => {
            let id = ids[index].as_deref();
            model
                .apply_unobserved(
                    state,
                    span.semantics,
                    &span.resource,
                    id,
                    span.body.as_ref(),
                )
                .map(|e| (e, id.filter(|_| span.semantics == crate::spec_model::Semantics::Create).map(str::to_string)))
        }
    }
}

/// Interned model states.
#[derive(Default)]
struct StateTable {
    states: Vec<ModelState>,
    by_hash: HashMap<u64, Vec<u32>>,
    hasher: std::collections::hash_map::RandomState,
}

impl StateTable {
    fn intern(&mut self, state: ModelState) -> u32 {
        let hash = self.hasher.hash_one(&state);
        let bucket = self.by_hash.entry(hash).or_default();
        if let Some(&id) = bucket.iter().find(|&&id| self.states[id as usize] == state) {
            return id;
        }
        let id = self.states.len() as u32;
        self.states.push(state);
        bucket.push(id);
        id
    }

    fn get(&self, id: u32) -> &ModelState {
        &self.states[id as usize]
    }
}

/// Identifies a set of linearized spans compactly: everything below
/// `frontier` is linearized except `holes`, nothing at or above it is.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct LinearizedKey {
    frontier: u32,
    holes: Box<[u32]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    linearized: LinearizedKey,
    state: u32,
}

struct Frame {
    span: usize,
    move_index: usize,
    previous_state: u32,
    assigned_id: Option<String>,
}

const NIL: usize = usize::MAX;

/// Doubly linked list of call and return entries, in history order.
/// Entry `2 * s` is the call of span `s`, `2 * s + 1` its return.
struct EntryList {
    next: Vec<usize>,
    prev: Vec<usize>,
    head: usize,
}

impl EntryList {
    fn new(spans: &[OpSpan]) -> Self {
        let n = spans.len() * 2;
        let mut order: Vec<(u64, u64, usize)> = Vec::with_capacity(n);
        for (s, span) in spans.iter().enumerate() {
            order.push((span.invoke_index, 0, 2 * s));
            // lost completions sit after every real event, in invocation order
            match span.complete_index {
                Some(c) if span.determinate() => order.push((c, 0, 2 * s + 1)),
                _ => order.push((u64::MAX, span.invoke_index, 2 * s + 1)),
            }
        }
        order.sort_unstable();
        // slot n is the head sentinel
        let mut next = vec![NIL; n + 1];
        let mut prev = vec![NIL; n + 1];
        let mut last = n;
        for &(_, _, e) in &order {
            next[last] = e;
            prev[e] = last;
            last = e;
        }
        EntryList { next, prev, head: n }
    }

    fn first(&self) -> usize {
        self.next[self.head]
    }

    fn unlink(&mut self, e: usize) {
        let (p, n) = (self.prev[e], self.next[e]);
        self.next[p] = n;
        if n != NIL {
            self.prev[n] = p;
        }
    }

    fn relink(&mut self, e: usize) {
        let (p, n) = (self.prev[e], self.next[e]);
        self.next[p] = e;
        if n != NIL {
            self.prev[n] = e;
        }
    }

    fn lift(&mut self, span: usize) {
        self.unlink(2 * span);
        self.unlink(2 * span + 1);
    }

    fn unlift(&mut self, span: usize) {
        self.relink(2 * span + 1);
        self.relink(2 * span);
    }
}

struct Best {
    depth: usize,
    witness: Vec<(usize, Option<String>)>,
    offender: usize,
    state: u32,
}

struct Search<'a> {
    model: &'a RestModel,
    spans: Vec<OpSpan>,
    observed: Vec<Option<ObservedOp>>,
    moves: Vec<Moves>,
    limits: Limits,
    started: Instant,
    states: StateTable,
    cache: HashSet<CacheKey>,
    linearized: BTreeSet<u32>,
    pending: BTreeSet<u32>,
    explored: u64,
}

impl<'a> Search<'a> {
    fn new(model: &'a RestModel, spans: Vec<OpSpan>, limits: Limits, started: Instant) -> Self {
        let candidates = unattributed_ids(&spans, model);
        let observed = spans.iter().map(OpSpan::observed).collect();
        let moves = spans.iter().map(|s| moves_for(s, &candidates)).collect();
        let pending = (0..spans.len() as u32).collect();
        Search {
            model,
            spans,
            observed,
            moves,
            limits,
            started,
            states: StateTable::default(),
            cache: HashSet::new(),
            linearized: BTreeSet::new(),
            pending,
            explored: 0,
        }
    }

    fn key(&self, state: u32) -> CacheKey {
        let frontier = self.linearized.last().map_or(0, |m| m + 1);
        CacheKey {
            linearized: LinearizedKey {
                frontier,
                holes: self.pending.range(..frontier).copied().collect(),
            },
            state,
        }
    }

    fn mark(&mut self, span: usize, linearized: bool) {
        let s = span as u32;
        if linearized {
            self.pending.remove(&s);
            self.linearized.insert(s);
        } else {
            self.linearized.remove(&s);
            self.pending.insert(s);
        }
    }

    fn run(&mut self) -> Outcome {
        let mut entries = EntryList::new(&self.spans);
        let mut remaining = self.spans.iter().filter(|s| s.determinate()).count();
        let mut state = self.states.intern(self.model.init_state());
        let mut stack: Vec<Frame> = Vec::new();
        let mut best: Option<Best> = None;
        let mut curr = entries.first();
        let mut move_index = 0;

        loop {
            if remaining == 0 {
                return Outcome::Linearizable;
            }
            if self.explored % 1024 == 0 && self.started.elapsed() > self.limits.timeout {
                return Outcome::Inconclusive(LimitHit::Timeout(self.limits.timeout));
            }
            if self.cache.len() >= self.limits.max_states {
                return Outcome::Inconclusive(LimitHit::MaxStates(self.limits.max_states));
            }
            debug_assert_ne!(curr, NIL, "a determinate return is always pending");
            let span = curr / 2;

            if curr % 2 == 0 {
                if move_index >= self.moves[span].len() {
                    curr = entries.next[curr];
                    move_index = 0;
                    continue;
                }
                self.explored += 1;
                let current = self.states.get(state);
                let applied = apply_move(
                    self.model,
                    current,
                    &self.spans[span],
                    self.observed[span].as_ref(),
                    &self.moves[span],
                    move_index,
                );
                if let Ok((effect, assigned_id)) = applied {
                    let next_state = match effect {
                        Effect::Unchanged => state,
                        Effect::Changed(s) => self.states.intern(s),
                    };
                    self.mark(span, true);
                    let fresh = !self.limits.memoize || self.cache.insert(self.key(next_state));
                    if fresh {
                        stack.push(Frame {
                            span,
                            move_index,
                            previous_state: state,
                            assigned_id,
                        });
                        entries.lift(span);
                        if self.spans[span].determinate() {
                            remaining -= 1;
                        }
                        state = next_state;
                        curr = entries.first();
                        move_index = 0;
                        continue;
                    }
                    self.mark(span, false);
                }
                move_index += 1;
                continue;
            }

            // the earliest pending completion: nothing after it may go first
            if best.as_ref().map_or(true, |b| stack.len() > b.depth) {
                best = Some(Best {
                    depth: stack.len(),
                    witness: stack.iter().map(|f| (f.span, f.assigned_id.clone())).collect(),
                    offender: span,
                    state,
                });
            }
            let Some(frame) = stack.pop() else {
                return Outcome::NonLinearizable(Box::new(self.counterexample(best.expect("recorded above"))));
            };
            entries.unlift(frame.span);
            self.mark(frame.span, false);
            if self.spans[frame.span].determinate() {
                remaining += 1;
            }
            state = frame.previous_state;
            curr = 2 * frame.span;
            move_index = frame.move_index + 1;
        }
    }

    fn counterexample(&self, best: Best) -> Counterexample {
        let offender = self.spans[best.offender].clone();
        let end_state = self.states.get(best.state);
        let observed = self.observed[best.offender].as_ref();
        let reason = rejection_reason(self.model, end_state, observed);
        Counterexample {
            witness: best
                .witness
                .into_iter()
                .map(|(s, assigned_id)| WitnessStep {
                    span: self.spans[s].clone(),
                    assigned_id,
                })
                .collect(),
            offender,
            reason,
        }
    }
}

pub(crate) fn rejection_reason(
    model: &RestModel,
    state: &ModelState,
    observed: Option<&ObservedOp>,
) -> String {
    match observed.map(|op| model.apply(state, op)) {
        Some(Err(reason)) => reason,
        _ => "no order of the remaining operations is consistent with the model".into(),
    }
}

/// Replays a witness from the initial state, returning the final state or
/// the first rejection.
pub fn replay(spec: &ServiceSpec, witness: &[WitnessStep]) -> Result<ModelState, String> {
    let model = RestModel::new(spec);
    let mut state = model.init_state();
    for step in witness {
        let effect = match step.span.observed() {
            Some(op) => model.apply(&state, &op)?,
            None => {
                let id = if step.span.semantics == crate::spec_model::Semantics::Create {
                    step.assigned_id.as_deref()
                } else {
                    step.span.id.as_deref()
                };
                model.apply_unobserved(&state, step.span.semantics, &step.span.resource, id, step.span.body.as_ref())?
            }
        };
        state = effect.resolve(&state);
    }
    Ok(state)
}

fn span_lines(history: &History, span: &OpSpan, out: &mut String) {
    let event = span
        .complete_event
        .map(|p| &history.events[p])
        .unwrap_or(&history.events[span.invoke_event]);
    let _ = writeln!(out, "  {}", render_event(event));
}

/// Human-readable account of a verdict: the linearizable prefix, the
/// offending operation and why it cannot be placed.
pub fn explain(verdict: &Verdict, history: &History) -> String {
    let mut out = String::new();
    match &verdict.outcome {
        Outcome::Linearizable => {
            let _ = writeln!(out, "linearizable");
        }
        Outcome::Inconclusive(limit) => {
            let _ = writeln!(out, "inconclusive: {limit}");
        }
        Outcome::NonLinearizable(cx) => {
            let _ = writeln!(out, "non-linearizable");
            let _ = writeln!(out, "linearizable prefix ({} operations):", cx.witness.len());
            for step in &cx.witness {
                span_lines(history, &step.span, &mut out);
                if let Some(id) = &step.assigned_id {
                    let _ = writeln!(out, "    (response lost; assumed created as {id:?})");
                }
            }
            let _ = writeln!(out, "offending operation {} ({}):", cx.offender.op_id, cx.offender.semantics);
            span_lines(history, &cx.offender, &mut out);
            let observed = match &cx.offender.result {
                Some(crate::model::OpResult::Ok(v)) => format!("output {}", abbreviated(&edn(v))),
                Some(crate::model::OpResult::Error(s)) => format!("status {s}"),
                None => "an unknown outcome".into(),
            };
            let _ = writeln!(out, "reason: no linearization point admits {observed}; after the prefix: {}", cx.reason);
        }
    }
    out
}

const REASON_OUTPUT_MAX: usize = 160;

fn abbreviated(text: &str) -> String {
    match text.char_indices().nth(REASON_OUTPUT_MAX) {
        Some((cut, _)) => format!("{}...", &text[..cut]),
        None => text.to_string(),
    }
}

/// Deterministic summary used by the CLI.
pub fn summary(verdict: &Verdict) -> String {
    let stats = &verdict.stats;
    let mut line = verdict.outcome.label().to_string();
    if let Outcome::NonLinearizable(cx) = &verdict.outcome {
        let _ = write!(line, ": {} {} ({})", cx.offender.op_id, cx.offender.id.as_deref().unwrap_or("-"), cx.reason);
    }
    if let Outcome::Inconclusive(limit) = &verdict.outcome {
        let _ = write!(line, ": {limit}");
    }
    let _ = write!(
        line,
        " [{} states, {} cached, {:.3}s]",
        stats.states_explored,
        stats.cache_entries,
        stats.elapsed.as_secs_f64()
    );
    line
}

#[cfg(test)]
mod tests;
