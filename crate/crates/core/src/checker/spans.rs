use std::collections::{BTreeMap, BTreeSet};

use serde_json::{Map, Value};

use crate::history::{ClientId, EventKind, History};
use crate::model::{id_key, ObservedOp, OpResult, RestModel};
use crate::spec_model::{Semantics, ServiceSpec};

use super::CheckError;

/// One operation of the history, from invocation to completion.
///
/// Spans without a determinate result (lost responses, server errors on
/// writes, requests still outstanding) have no `complete_index`: their
/// effect may land at any point after the invocation, or never.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSpan {
    pub client: ClientId,
    pub op_id: String,
    pub semantics: Semantics,
    pub resource: String,
    pub id: Option<String>,
    pub body: Option<Map<String, Value>>,
    pub result: Option<OpResult>,
    pub invoke_index: u64,
    pub complete_index: Option<u64>,
    /// Positions of the invoke and completion in `History::events`.
    pub invoke_event: usize,
    pub complete_event: Option<usize>,
}

impl OpSpan {
    pub fn determinate(&self) -> bool {
        self.result.is_some()
    }

    pub fn observed(&self) -> Option<ObservedOp> {
        Some(ObservedOp {
            semantics: self.semantics,
            resource: self.resource.clone(),
            id: self.id.clone(),
            body: self.body.clone(),
            result: self.result.clone()?,
        })
    }

    /// Whether `self` finished before `other` started.
    pub fn precedes(&self, other: &OpSpan) -> bool {
        self.result.is_some() && self.complete_index.is_some_and(|c| c < other.invoke_index)
    }
}

/// Builds the spans the search works on, in invocation order.
/// Indeterminate reads are dropped: they can neither change nor
/// constrain the state.
pub fn spans(history: &History, spec: &ServiceSpec) -> Result<Vec<OpSpan>, CheckError> {
    history.validate()?;
    let model = RestModel::new(spec);
    let mut out = Vec::new();
    for (invoke_pos, complete_pos) in history.pairs() {
        let invoke = &history.events[invoke_pos];
        let op = spec
            .operation(&invoke.op_id)
            .ok_or_else(|| CheckError::UnknownOperation(invoke.op_id.clone()))?;
        let completion = complete_pos.map(|p| &history.events[p]);
        let result = completion.and_then(|c| match c.kind {
            EventKind::Ok => Some(OpResult::Ok(c.output.clone().unwrap_or(Value::Null))),
            EventKind::Error => match c.status {
                Some(s) if s >= 500 && !op.semantics.is_read() => None,
                Some(s) => Some(OpResult::Error(s)),
                None => Some(OpResult::Error(0)),
            },
            EventKind::Info | EventKind::Invoke => None,
        });
        if result.is_none() && op.semantics.is_read() {
            continue;
        }
        let id = match (op.semantics, &result) {
            (Semantics::Create, Some(OpResult::Ok(output))) => model
                .id_field(&op.resource)
                .and_then(|f| output.get(f))
                .and_then(id_key),
            _ => invoke.id.clone(),
        };
        out.push(OpSpan {
            client: invoke.client,
            op_id: invoke.op_id.clone(),
            semantics: op.semantics,
            resource: op.resource.clone(),
            id,
            body: invoke.body.clone(),
            complete_index: result.as_ref().and(completion.map(|c| c.index)),
            result,
            invoke_index: invoke.index,
            invoke_event: invoke_pos,
            complete_event: complete_pos,
        });
    }
    out.sort_by_key(|s| s.invoke_index);
    Ok(out)
}

/// Ids a lost create may have received: ids seen in successful responses
/// that no determinate create of the same resource produced.
pub fn unattributed_ids(spans: &[OpSpan], model: &RestModel) -> BTreeMap<String, Vec<String>> {
    let mut created: BTreeSet<(&str, String)> = BTreeSet::new();
    let mut seen: BTreeSet<(&str, String)> = BTreeSet::new();
    for span in spans {
        let Some(OpResult::Ok(output)) = &span.result else {
            continue;
        };
        let resource = span.resource.as_str();
        let id_field = model.id_field(resource).unwrap_or("id");
        match span.semantics {
            Semantics::Create => {
                if let Some(id) = &span.id {
                    created.insert((resource, id.clone()));
                }
            }
            Semantics::ReadAll => {
                for item in output.as_array().into_iter().flatten() {
                    if let Some(id) = item.get(id_field).and_then(id_key) {
                        seen.insert((resource, id));
                    }
                }
            }
            _ => {
                if let Some(id) = &span.id {
                    seen.insert((resource, id.clone()));
                }
                if let Some(id) = output.get(id_field).and_then(id_key) {
                    seen.insert((resource, id));
                }
            }
        }
    }
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (resource, id) in seen.difference(&created) {
        out.entry(resource.to_string()).or_default().push(id.clone());
    }
    out
}

/// The ways an indeterminate span can take effect. A determinate span has
/// exactly one way, described by its observed result.
#[derive(Debug, Clone)]
pub(crate) enum Moves {
    Observed,
    Unobserved(Vec<Option<String>>),
}

pub(crate) fn moves_for(span: &OpSpan, candidates: &BTreeMap<String, Vec<String>>) -> Moves {
    if span.determinate() {
        return Moves::Observed;
    }
    match span.semantics {
        Semantics::Create => Moves::Unobserved(
            candidates
                .get(&span.resource)
                .into_iter()
                .flatten()
                .map(|id| Some(id.clone()))
                .collect(),
        ),
        Semantics::ReadOne | Semantics::ReadAll => Moves::Unobserved(vec![]),
        _ => Moves::Unobserved(vec![span.id.clone()]),
    }
}

impl Moves {
    pub(crate) fn len(&self) -> usize {
        match self {
            Moves::Observed => 1,
            Moves::Unobserved(ids) => ids.len(),
        }
    }
}
