//! Helpers for building histories by hand and for generating small random
//! histories, used by the test suites.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde_json::{json, Map, Value};

use crate::datagen::Rng;
use crate::history::{ClientId, EventKind, History, HistoryEvent};
use crate::spec_model::{Semantics, ServiceSpec};

/// Appends events with consecutive indices. Completions look up the
/// client's outstanding invoke for operation, method and resource.
pub struct HistoryBuilder<'a> {
    spec: &'a ServiceSpec,
    events: Vec<HistoryEvent>,
    pending: HashMap<ClientId, usize>,
}

impl<'a> HistoryBuilder<'a> {
    pub fn new(spec: &'a ServiceSpec) -> Self {
        HistoryBuilder {
            spec,
            events: Vec::new(),
            pending: HashMap::new(),
        }
    }

    fn push(&mut self, mut event: HistoryEvent) -> &mut Self {
        event.index = self.events.len() as u64;
        event.wall_time = format!("2024-01-01T12:30:17.{:03}+00:00", event.index % 1000);
        self.events.push(event);
        self
    }

    pub fn invoke(&mut self, client: ClientId, op_id: &str, id: Option<&str>, body: Option<Value>) -> &mut Self {
        let op = self
            .spec
            .operation(op_id)
            .unwrap_or_else(|| panic!("unknown operation {op_id}"));
        self.pending.insert(client, self.events.len());
        let event = HistoryEvent {
            index: 0,
            wall_time: String::new(),
            client,
            kind: EventKind::Invoke,
            op_id: op_id.to_string(),
            method: op.method,
            resource: op.resource.clone(),
            id: id.map(str::to_string),
            body: body.map(|b| b.as_object().expect("body is an object").clone()),
            output: None,
            status: None,
        };
        self.push(event)
    }

    fn complete(&mut self, client: ClientId, kind: EventKind, output: Option<Value>, status: Option<u16>) -> &mut Self {
        let invoke = self
            .pending
            .remove(&client)
            .unwrap_or_else(|| panic!("client {client} has no outstanding invoke"));
        let invoke = self.events[invoke].clone();
        let op = self.spec.operation(&invoke.op_id).expect("known operation");
        let id = match (op.semantics, &output) {
            (Semantics::Create, Some(out)) => self
                .spec
                .resource(&op.resource)
                .and_then(|r| out.get(&r.id_field))
                .and_then(crate::model::id_key),
            _ => invoke.id.clone(),
        };
        let event = HistoryEvent {
            kind,
            id,
            body: None,
            output,
            status,
            ..invoke
        };
        self.push(event)
    }

    pub fn ok(&mut self, client: ClientId, output: Value) -> &mut Self {
        self.complete(client, EventKind::Ok, Some(output), Some(200))
    }

    pub fn error(&mut self, client: ClientId, status: u16) -> &mut Self {
        self.complete(client, EventKind::Error, None, Some(status))
    }

    pub fn info(&mut self, client: ClientId) -> &mut Self {
        self.complete(client, EventKind::Info, None, None)
    }

    pub fn build(&self) -> History {
        History::new(self.events.clone())
    }
}

/// Operation ids of the bundled student spec, by semantics.
pub fn student_op(semantics: Semantics) -> &'static str {
    match semantics {
        Semantics::Create => "createStudent",
        Semantics::ReadAll => "getAllStudents",
        Semantics::ReadOne => "getStudent",
        Semantics::Replace => "updateStudent",
        Semantics::Merge => "patchStudent",
        Semantics::Delete => "deleteStudent",
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RandomHistoryParams {
    pub max_determinate: usize,
    pub max_indeterminate: usize,
    pub clients: u32,
    /// Probability of corrupting one observed result.
    pub corrupt: f64,
}

impl Default for RandomHistoryParams {
    fn default() -> Self {
        RandomHistoryParams {
            max_determinate: 8,
            max_indeterminate: 2,
            clients: 3,
            corrupt: 0.5,
        }
    }
}

const IDS: [&str; 2] = ["A", "B"];

struct PlannedOp {
    client: ClientId,
    semantics: Semantics,
    id: Option<String>,
    body: Option<Value>,
    lost: bool,
}

enum Phase {
    Invoked(usize),
    Applied(usize, Option<(EventKind, Option<Value>, Option<u16>)>),
}

/// A small concurrent history over the student spec with at most two ids.
///
/// Operations run against an in-memory store at a random point between
/// invocation and completion, so the uncorrupted history is linearizable.
/// With probability `params.corrupt` one observed result is then altered,
/// which usually, but not always, breaks linearizability.
pub fn random_history(spec: &ServiceSpec, rng: &mut Rng, params: RandomHistoryParams) -> History {
    let determinate = rng.gen_range(1..=params.max_determinate);
    let lost = rng.gen_range(0..=params.max_indeterminate);
    let mut planned: Vec<PlannedOp> = Vec::new();
    for i in 0..determinate + lost {
        let is_lost = i >= determinate;
        let semantics = if is_lost {
            *[Semantics::Create, Semantics::Replace, Semantics::Merge, Semantics::Delete]
                .choose(rng)
                .unwrap()
        } else {
            *Semantics::ALL.choose(rng).unwrap()
        };
        let body = match semantics {
            Semantics::Create | Semantics::Replace => Some(json!({"age": rng.gen_range(0..3)})),
            Semantics::Merge => {
                let name = ["Ada", "Bob"][rng.gen_range(0..2)];
                Some(json!({ "firstName": name }))
            },
            _ => None,
        };
        planned.push(PlannedOp {
            client: rng.gen_range(0..params.clients),
            semantics,
            id: semantics.takes_id().then(|| IDS[rng.gen_range(0..2)].to_string()),
            body,
            lost: is_lost,
        });
    }
    planned.shuffle(rng);

    let mut queues: BTreeMap<ClientId, Vec<usize>> = BTreeMap::new();
    for (i, op) in planned.iter().enumerate().rev() {
        queues.entry(op.client).or_default().push(i);
    }
    let mut store: BTreeMap<String, Value> = BTreeMap::new();
    let mut phases: HashMap<ClientId, Phase> = HashMap::new();
    let mut builder = HistoryBuilder::new(spec);
    let mut completions: Vec<usize> = Vec::new();

    loop {
        let active: Vec<ClientId> = queues
            .iter()
            .filter(|(c, q)| !q.is_empty() || phases.contains_key(c))
            .map(|(c, _)| *c)
            .collect();
        let Some(&client) = active.choose(rng) else {
            break;
        };
        match phases.remove(&client) {
            None => {
                let i = queues.get_mut(&client).unwrap().pop().unwrap();
                let op = &planned[i];
                builder.invoke(client, student_op(op.semantics), op.id.as_deref(), op.body.clone());
                phases.insert(client, Phase::Invoked(i));
            }
            Some(Phase::Invoked(i)) => {
                let op = &planned[i];
                let applied = if op.lost && rng.gen_bool(0.5) {
                    None
                } else {
                    Some(execute(&mut store, op, rng))
                };
                phases.insert(client, Phase::Applied(i, applied));
            }
            Some(Phase::Applied(i, result)) => {
                if planned[i].lost {
                    builder.info(client);
                } else {
                    let (kind, output, status) = result.expect("determinate ops always apply");
                    completions.push(builder.events.len());
                    builder.complete(client, kind, output, status);
                }
            }
        }
    }

    let mut history = builder.build();
    if !completions.is_empty() && rng.gen_bool(params.corrupt) {
        let pos = *completions.choose(rng).unwrap();
        corrupt(&mut history.events[pos], rng);
    }
    history
}

fn execute(
    store: &mut BTreeMap<String, Value>,
    op: &PlannedOp,
    rng: &mut Rng,
) -> (EventKind, Option<Value>, Option<u16>) {
    let ok = |v: Value| (EventKind::Ok, Some(v), Some(200));
    let not_found = (EventKind::Error, None, Some(404));
    let with_id = |body: &Option<Value>, id: &str| {
        let mut obj: Map<String, Value> = body.as_ref().and_then(Value::as_object).cloned().unwrap_or_default();
        obj.insert("id".into(), json!(id));
        Value::Object(obj)
    };
    match op.semantics {
        Semantics::Create => {
            let free: Vec<&str> = IDS.iter().copied().filter(|id| !store.contains_key(*id)).collect();
            match free.choose(rng) {
                None => (EventKind::Error, None, Some(409)),
                Some(id) => {
                    let obj = with_id(&op.body, id);
                    store.insert(id.to_string(), obj.clone());
                    (EventKind::Ok, Some(obj), Some(201))
                }
            }
        }
        Semantics::ReadAll => ok(Value::Array(store.values().cloned().collect())),
        Semantics::ReadOne => {
            let id = op.id.as_deref().unwrap();
            store.get(id).cloned().map(ok).unwrap_or(not_found)
        }
        Semantics::Replace => {
            let id = op.id.as_deref().unwrap();
            if !store.contains_key(id) {
                return not_found;
            }
            let obj = with_id(&op.body, id);
            store.insert(id.to_string(), obj.clone());
            ok(obj)
        }
        Semantics::Merge => {
            let id = op.id.as_deref().unwrap();
            let Some(Value::Object(current)) = store.get(id).cloned() else {
                return not_found;
            };
            let mut next = current;
            for (k, v) in op.body.as_ref().and_then(Value::as_object).into_iter().flatten() {
                next.insert(k.clone(), v.clone());
            }
            store.insert(id.to_string(), Value::Object(next.clone()));
            ok(Value::Object(next))
        }
        Semantics::Delete => {
            let id = op.id.as_deref().unwrap();
            match store.remove(id) {
                Some(_) => ok(json!(id)),
                None => not_found,
            }
        }
    }
}

fn corrupt(event: &mut HistoryEvent, rng: &mut Rng) {
    match event.kind {
        EventKind::Error => {
            let id = event.id.clone().unwrap_or_else(|| IDS[0].to_string());
            event.kind = EventKind::Ok;
            event.status = Some(200);
            event.output = Some(match event.method {
                crate::spec_model::Method::Delete => json!(id),
                _ => json!({"id": id, "age": rng.gen_range(0..3)}),
            });
        }
        _ => match event.output.take() {
            Some(Value::Array(mut items)) => {
                if items.is_empty() || rng.gen_bool(0.5) {
                    items.push(json!({"id": IDS[rng.gen_range(0..2)], "age": 9}));
                } else {
                    items.pop();
                }
                event.output = Some(Value::Array(items));
            }
            Some(Value::Object(mut obj)) if rng.gen_bool(0.7) => {
                obj.insert("age".into(), json!(rng.gen_range(3..6)));
                event.output = Some(Value::Object(obj));
            }
            Some(Value::String(_)) => {
                event.output = Some(json!(if event.id.as_deref() == Some("A") { "B" } else { "A" }));
            }
            _ if event.method == crate::spec_model::Method::Put && rng.gen_bool(0.5) => {
                event.output = Some(Value::Null);
            }
            _ => {
                event.kind = EventKind::Error;
                event.status = Some(404);
                event.output = None;
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec_model::student_spec;

    #[test]
    fn random_histories_are_valid_and_bounded() {
        let spec = student_spec();
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let h = random_history(&spec, &mut rng, RandomHistoryParams::default());
            h.validate().unwrap();
            assert!(h.is_drained());
            let infos = h.events.iter().filter(|e| e.kind == EventKind::Info).count();
            let completions = h.events.iter().filter(|e| e.kind.is_completion()).count();
            assert!(infos <= 2);
            assert!(completions - infos <= 8);
        }
    }
}
