//! Exhaustive reference search for small histories.
//!
//! Enumerates every order of the spans that respects real-time precedence,
//! with every subset of indeterminate spans (and every id a lost create
//! may have received), replaying each order through the model. A prefix
//! the model rejects is not extended. No caching, no entry lists.

use std::time::Instant;

use crate::history::History;
use crate::model::{ModelState, RestModel};
use crate::spec_model::ServiceSpec;

use super::spans::{moves_for, Moves};
use super::{
    apply_move, rejection_reason, spans, unattributed_ids, CheckError, Counterexample, OpSpan,
    Outcome, Stats, Verdict, WitnessStep,
};

pub const BRUTE_FORCE_MAX_DETERMINATE: usize = 10;
pub const BRUTE_FORCE_MAX_INDETERMINATE: usize = 3;

struct Enumeration<'a> {
    model: &'a RestModel,
    spans: Vec<OpSpan>,
    moves: Vec<Moves>,
    placed: Vec<bool>,
    order: Vec<(usize, Option<String>)>,
    explored: u64,
    deepest: Option<(Vec<(usize, Option<String>)>, ModelState)>,
}

impl Enumeration<'_> {
    fn placeable(&self, s: usize) -> bool {
        let target = &self.spans[s];
        self.spans
            .iter()
            .enumerate()
            .all(|(p, other)| p == s || self.placed[p] || !other.precedes(target))
    }

    fn all_determinate_placed(&self) -> bool {
        self.spans
            .iter()
            .zip(&self.placed)
            .all(|(span, placed)| *placed || !span.determinate())
    }

    fn search(&mut self, state: &ModelState) -> bool {
        if self.all_determinate_placed() {
            return true;
        }
        if self.deepest.as_ref().map_or(true, |(o, _)| self.order.len() > o.len()) {
            self.deepest = Some((self.order.clone(), state.clone()));
        }
        for s in 0..self.spans.len() {
            if self.placed[s] || !self.placeable(s) {
                continue;
            }
            for m in 0..self.moves[s].len() {
                self.explored += 1;
                let observed = self.spans[s].observed();
                let Ok((effect, assigned)) =
                    apply_move(self.model, state, &self.spans[s], observed.as_ref(), &self.moves[s], m)
                else {
                    continue;
                };
                let next = effect.resolve(state);
                self.placed[s] = true;
                self.order.push((s, assigned));
                let found = self.search(&next);
                self.order.pop();
                self.placed[s] = false;
                if found {
                    return true;
                }
            }
        }
        false
    }
}

/// Reference verdict by exhaustive enumeration. Refuses histories with more
/// than [`BRUTE_FORCE_MAX_DETERMINATE`] determinate or
/// [`BRUTE_FORCE_MAX_INDETERMINATE`] indeterminate operations.
pub fn brute_force(history: &History, spec: &ServiceSpec) -> Result<Verdict, CheckError> {
    let started = Instant::now();
    let model = RestModel::new(spec);
    let spans = spans(history, spec)?;
    let determinate = spans.iter().filter(|s| s.determinate()).count();
    let indeterminate = spans.len() - determinate;
    if determinate > BRUTE_FORCE_MAX_DETERMINATE || indeterminate > BRUTE_FORCE_MAX_INDETERMINATE {
        return Err(CheckError::TooLarge {
            determinate,
            indeterminate,
        });
    }
    let candidates = unattributed_ids(&spans, &model);
    let moves = spans.iter().map(|s| moves_for(s, &candidates)).collect();
    let mut e = Enumeration {
        model: &model,
        placed: vec![false; spans.len()],
        spans,
        moves,
        order: Vec::new(),
        explored: 0,
        deepest: None,
    };
    let init = model.init_state();
    let outcome = if e.search(&init) {
        Outcome::Linearizable
    } else {
        let (order, state) = e.deepest.take().expect("an empty prefix is always recorded");
        let placed: Vec<usize> = order.iter().map(|(s, _)| *s).collect();
        // the unplaced determinate span that completed first
        let offender = e
            .spans
            .iter()
            .enumerate()
            .filter(|(s, span)| span.determinate() && !placed.contains(s))
            .min_by_key(|(_, span)| span.complete_index)
            .map(|(_, span)| span.clone())
            .expect("some determinate span is unplaced");
        let observed = offender.observed();
        let reason = rejection_reason(&model, &state, observed.as_ref());
        Outcome::NonLinearizable(Box::new(Counterexample {
            witness: order
                .into_iter()
                .map(|(s, assigned_id)| WitnessStep {
                    span: e.spans[s].clone(),
                    assigned_id,
                })
                .collect(),
            offender,
            reason,
        }))
    };
    Ok(Verdict {
        outcome,
        stats: Stats {
            states_explored: e.explored,
            cache_entries: 0,
            elapsed: started.elapsed(),
        },
    })
}
