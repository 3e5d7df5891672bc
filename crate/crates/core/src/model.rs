//! Sequential specification of standard REST semantics.
//!
//! State maps each resource name to its live objects keyed by id. `step`
//! decides whether one completed operation, with the result it observed,
//! is legal in a given state.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde_json::{Map, Value};

use crate::spec_model::{Semantics, ServiceSpec};

type Objects = BTreeMap<Arc<str>, Arc<Value>>;

/// Objects are shared between successive states, and `digest` (a sum of
/// per-object hashes) is maintained on every change, so copying and
/// hashing a state do not touch the object contents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelState {
    resources: BTreeMap<Arc<str>, Objects>,
    digest: u64,
}

impl ModelState {
    pub fn objects(&self, resource: &str) -> Option<impl Iterator<Item = (&str, &Value)>> {
        let objects = self.resources.get(resource)?;
        Some(objects.iter().map(|(k, v)| (&**k, &**v)))
    }

    fn table(&self, resource: &str) -> Option<&Objects> {
        self.resources.get(resource)
    }

    pub fn get(&self, resource: &str, id: &str) -> Option<&Value> {
        self.resources.get(resource)?.get(id).map(|v| &**v)
    }

    pub fn contains(&self, resource: &str, id: &str) -> bool {
        self.get(resource, id).is_some()
    }

    pub fn resource_names(&self) -> impl Iterator<Item = &str> {
        self.resources.keys().map(|k| &**k)
    }

    /// Canonical text form: resources, ids and object keys in sorted order.
    pub fn canonical(&self) -> String {
        let plain: BTreeMap<&str, BTreeMap<&str, &Value>> = self
            .resources
            .iter()
            .map(|(r, objects)| (&**r, objects.iter().map(|(k, v)| (&**k, &**v)).collect()))
            .collect();
        serde_json::to_string(&plain).expect("state serializes")
    }

    fn with(&self, resource: &str, id: &str, object: Option<Value>) -> ModelState {
        let mut next = self.clone();
        let objects = match next.resources.get_mut(resource) {
            Some(objects) => objects,
            None => next.resources.entry(Arc::from(resource)).or_default(),
        };
        if let Some(old) = objects.get(id) {
            next.digest = next.digest.wrapping_sub(entry_digest(resource, id, old));
        }
        match object {
            Some(obj) => {
                next.digest = next.digest.wrapping_add(entry_digest(resource, id, &obj));
                objects.insert(Arc::from(id), Arc::new(obj));
            }
            None => {
                objects.remove(id);
            }
        }
        next
    }
}

fn entry_digest(resource: &str, id: &str, value: &Value) -> u64 {
    // fixed keys: digests must not depend on the process
    let mut h = std::collections::hash_map::DefaultHasher::new();
    resource.hash(&mut h);
    id.hash(&mut h);
    hash_value(value, &mut h);
    h.finish()
}

impl Hash for ModelState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.digest.hash(state);
    }
}

fn hash_value<H: Hasher>(value: &Value, state: &mut H) {
    match value {
        Value::Null => 0u8.hash(state),
        Value::Bool(b) => (1u8, b).hash(state),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => (2u8, i).hash(state),
            (None, Some(f)) => (6u8, f.to_bits()).hash(state),
            _ => (2u8, n.to_string()).hash(state),
        },
        Value::String(s) => (3u8, s).hash(state),
        Value::Array(items) => {
            (4u8, items.len()).hash(state);
            items.iter().for_each(|v| hash_value(v, state));
        }
        Value::Object(map) => {
            (5u8, map.len()).hash(state);
            for (k, v) in map {
                k.hash(state);
                hash_value(v, state);
            }
        }
    }
}

/// What a completed request observed.
#[derive(Debug, Clone, PartialEq)]
pub enum OpResult {
    Ok(Value),
    Error(u16),
}

/// A completed operation as the model sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedOp {
    pub semantics: Semantics,
    pub resource: String,
    pub id: Option<String>,
    pub body: Option<Map<String, Value>>,
    pub result: OpResult,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted(ModelState),
    Rejected(String),
}

/// Outcome of a transition that avoids copying the state for reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Unchanged,
    Changed(ModelState),
}

impl Effect {
    pub fn resolve(self, previous: &ModelState) -> ModelState {
        match self {
            Effect::Unchanged => previous.clone(),
            Effect::Changed(s) => s,
        }
    }
}

/// Renders an id-valued JSON field as the key used in the state.
pub fn id_key(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestModel {
    id_fields: BTreeMap<String, String>,
}

impl RestModel {
    pub fn new(spec: &ServiceSpec) -> Self {
        RestModel {
            id_fields: spec
                .resources
                .iter()
                .map(|r| (r.name.clone(), r.id_field.clone()))
                .collect(),
        }
    }

    pub fn id_field(&self, resource: &str) -> Option<&str> {
        self.id_fields.get(resource).map(String::as_str)
    }

    /// Every resource mapped to an empty collection.
    pub fn init_state(&self) -> ModelState {
        ModelState {
            resources: self
                .id_fields
                .keys()
                .map(|r| (Arc::from(r.as_str()), BTreeMap::new()))
                .collect(),
            digest: 0,
        }
    }

    pub fn step(&self, state: &ModelState, op: &ObservedOp) -> StepOutcome {
        match self.apply(state, op) {
            Ok(effect) => StepOutcome::Accepted(effect.resolve(state)),
            Err(reason) => StepOutcome::Rejected(reason),
        }
    }

    /// Like [`RestModel::step`], without cloning the state when nothing changes.
    pub fn apply(&self, state: &ModelState, op: &ObservedOp) -> Result<Effect, String> {
        let id_field = self
            .id_field(&op.resource)
            .ok_or_else(|| format!("unknown resource {}", op.resource))?;
        let objects = state
            .table(&op.resource)
            .ok_or_else(|| format!("unknown resource {}", op.resource))?;

        if op.semantics == Semantics::Create {
            return match &op.result {
                OpResult::Ok(output) => {
                    let key = output
                        .get(id_field)
                        .and_then(id_key)
                        .ok_or_else(|| format!("create output lacks {id_field}"))?;
                    if objects.contains_key(key.as_str()) {
                        return Err(format!("id {key} already exists"));
                    }
                    Ok(Effect::Changed(state.with(&op.resource, &key, Some(output.clone()))))
                }
                OpResult::Error(409) => match &op.id {
                    Some(claimed) if !objects.contains_key(claimed.as_str()) => {
                        Err(format!("conflict reported but id {claimed} is absent"))
                    }
                    _ => Ok(Effect::Unchanged),
                },
                OpResult::Error(_) => Ok(Effect::Unchanged),
            };
        }

        if op.semantics == Semantics::ReadAll {
            return match &op.result {
                OpResult::Ok(output) => read_all(objects, output, id_field).map(|()| Effect::Unchanged),
                OpResult::Error(_) => Ok(Effect::Unchanged),
            };
        }

        let id = op.id.as_deref().ok_or("operation carries no id")?;
        let stored = objects.get(id).map(|v| &**v);
        match (&op.result, op.semantics) {
            (OpResult::Error(404), _) => match stored {
                None => Ok(Effect::Unchanged),
                Some(_) => Err(format!("not found reported but id {id} is present")),
            },
            // other client errors assert nothing; server errors on reads are unconstraining
            (OpResult::Error(_), _) => Ok(Effect::Unchanged),
            (OpResult::Ok(output), Semantics::ReadOne) => match stored {
                None => Err(format!("id {id} absent")),
                Some(obj) if obj == output => Ok(Effect::Unchanged),
                Some(_) => Err(format!("read of {id} returned an object other than the stored one")),
            },
            (OpResult::Ok(output), Semantics::Replace) => {
                let stored = stored.ok_or_else(|| format!("id {id} absent"))?;
                if output.is_null() {
                    return Err("replace must return the updated object".into());
                }
                let next = replaced(stored, op.body.as_ref(), id_field);
                if *output != next {
                    return Err(format!("replace of {id} returned an object other than the replacement"));
                }
                Ok(Effect::Changed(state.with(&op.resource, id, Some(next))))
            }
            (OpResult::Ok(output), Semantics::Merge) => {
                let stored = stored.ok_or_else(|| format!("id {id} absent"))?;
                if output.is_null() {
                    return Err("merge must return the merged object".into());
                }
                let next = merged(stored, op.body.as_ref(), id_field);
                if *output != next {
                    return Err(format!("merge of {id} returned an object other than the merge result"));
                }
                Ok(Effect::Changed(state.with(&op.resource, id, Some(next))))
            }
            (OpResult::Ok(output), Semantics::Delete) => {
                if stored.is_none() {
                    return Err(format!("id {id} absent"));
                }
                if !output.is_null() && id_key(output).as_deref() != Some(id) {
                    return Err(format!("delete of {id} returned {output}"));
                }
                Ok(Effect::Changed(state.with(&op.resource, id, None)))
            }
            (OpResult::Ok(_), Semantics::Create | Semantics::ReadAll) => unreachable!(),
        }
    }

    /// The state change of a write whose response was lost. `assigned_id`
    /// is the id a lost create is assumed to have received.
    pub fn apply_unobserved(
        &self,
        state: &ModelState,
        semantics: Semantics,
        resource: &str,
        id: Option<&str>,
        body: Option<&Map<String, Value>>,
    ) -> Result<Effect, String> {
        let id_field = self
            .id_field(resource)
            .ok_or_else(|| format!("unknown resource {resource}"))?;
        let objects = state
            .table(resource)
            .ok_or_else(|| format!("unknown resource {resource}"))?;
        let Some(id) = id else {
            return Ok(Effect::Unchanged);
        };
        let stored = objects.get(id).map(|v| &**v);
        Ok(match (semantics, stored) {
            (Semantics::Create, Some(_)) => return Err(format!("id {id} already exists")),
            (Semantics::Create, None) => {
                let mut obj = body.cloned().unwrap_or_default();
                obj.insert(id_field.to_string(), Value::String(id.to_string()));
                Effect::Changed(state.with(resource, id, Some(Value::Object(obj))))
            }
            (Semantics::Replace, Some(stored)) => {
                Effect::Changed(state.with(resource, id, Some(replaced(stored, body, id_field))))
            }
            (Semantics::Merge, Some(stored)) => {
                Effect::Changed(state.with(resource, id, Some(merged(stored, body, id_field))))
            }
            (Semantics::Delete, Some(_)) => Effect::Changed(state.with(resource, id, None)),
            _ => Effect::Unchanged,
        })
    }
}

fn read_all(objects: &Objects, output: &Value, id_field: &str) -> Result<(), String> {
    let list = output.as_array().ok_or("read-all must return a list")?;
    if list.len() != objects.len() {
        return Err(format!(
            "read-all returned {} objects, {} exist",
            list.len(),
            objects.len()
        ));
    }
    let mut seen = BTreeMap::new();
    for item in list {
        let key = item
            .get(id_field)
            .and_then(id_key)
            .ok_or_else(|| format!("read-all element lacks {id_field}"))?;
        if seen.insert(key.clone(), item).is_some() {
            return Err(format!("read-all lists {key} twice"));
        }
        match objects.get(key.as_str()) {
            None => return Err(format!("read-all lists absent id {key}")),
            Some(obj) if **obj != *item => {
                return Err(format!("read-all returned a stale object for {key}"))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn id_value(stored: &Value, id_field: &str) -> Value {
    stored.get(id_field).cloned().unwrap_or(Value::Null)
}

fn replaced(stored: &Value, body: Option<&Map<String, Value>>, id_field: &str) -> Value {
    let mut next = body.cloned().unwrap_or_default();
    next.insert(id_field.to_string(), id_value(stored, id_field));
    Value::Object(next)
}

fn merged(stored: &Value, body: Option<&Map<String, Value>>, id_field: &str) -> Value {
    let mut next = stored.as_object().cloned().unwrap_or_default();
    for (k, v) in body.into_iter().flatten() {
        if k != id_field {
            next.insert(k.clone(), v.clone());
        }
    }
    Value::Object(next)
}

impl fmt::Display for ModelState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// `{resource: {}}` for every resource of `spec`.
pub fn init_state(spec: &ServiceSpec) -> ModelState {
    RestModel::new(spec).init_state()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec_model::{student_spec, ResourceSpec};
    use proptest::prelude::*;
    use serde_json::json;

    fn model() -> RestModel {
        RestModel::new(&student_spec())
    }

    fn op(semantics: Semantics, id: Option<&str>, body: Option<Value>, result: OpResult) -> ObservedOp {
        ObservedOp {
            semantics,
            resource: "student".into(),
            id: id.map(str::to_string),
            body: body.map(|b| b.as_object().unwrap().clone()),
            result,
        }
    }

    fn accepted(outcome: StepOutcome) -> ModelState {
        match outcome {
            StepOutcome::Accepted(s) => s,
            StepOutcome::Rejected(r) => panic!("rejected: {r}"),
        }
    }

    fn rejected(outcome: StepOutcome) -> String {
        match outcome {
            StepOutcome::Rejected(r) => r,
            StepOutcome::Accepted(s) => panic!("accepted: {s}"),
        }
    }

    fn with_student(id: &str) -> (RestModel, ModelState) {
        let m = model();
        let s = accepted(m.step(
            &m.init_state(),
            &op(Semantics::Create, None, Some(json!({"age": 40})), OpResult::Ok(json!({"id": id, "age": 40}))),
        ));
        (m, s)
    }

    #[test]
    fn init_states() {
        assert_eq!(init_state(&student_spec()).canonical(), r#"{"student":{}}"#);
        let mut two = student_spec();
        two.resources.push(ResourceSpec { name: "course".into(), id_field: "code".into(), fields: vec![] });
        assert_eq!(init_state(&two).canonical(), r#"{"course":{},"student":{}}"#);
        assert_eq!(init_state(&ServiceSpec::default()).canonical(), "{}");
    }

    #[test]
    fn delete_of_absent_id_rejected() {
        let m = model();
        let r = rejected(m.step(&m.init_state(), &op(Semantics::Delete, Some("X"), None, OpResult::Ok(json!("X")))));
        assert_eq!(r, "id X absent");
    }

    #[test]
    fn replace_with_nil_output_rejected() {
        let (m, s) = with_student("71D1083D76BD");
        let r = rejected(m.step(
            &s,
            &op(Semantics::Replace, Some("71D1083D76BD"), Some(json!({"age": 93})), OpResult::Ok(Value::Null)),
        ));
        assert_eq!(r, "replace must return the updated object");
    }

    #[test]
    fn create_adds_object() {
        let (_, s) = with_student("K");
        assert_eq!(s.get("student", "K"), Some(&json!({"id": "K", "age": 40})));
    }

    #[test]
    fn duplicate_create_rejected() {
        let (m, s) = with_student("K");
        let r = rejected(m.step(&s, &op(Semantics::Create, None, None, OpResult::Ok(json!({"id": "K"})))));
        assert!(r.contains("already exists"));
    }

    #[test]
    fn conflict_needs_claimed_id_present() {
        let (m, s) = with_student("K");
        accepted(m.step(&s, &op(Semantics::Create, Some("K"), None, OpResult::Error(409))));
        rejected(m.step(&s, &op(Semantics::Create, Some("Z"), None, OpResult::Error(409))));
        accepted(m.step(&s, &op(Semantics::Create, None, None, OpResult::Error(400))));
    }

    #[test]
    fn read_one_rules() {
        let (m, s) = with_student("K");
        accepted(m.step(&s, &op(Semantics::ReadOne, Some("K"), None, OpResult::Ok(json!({"id": "K", "age": 40})))));
        rejected(m.step(&s, &op(Semantics::ReadOne, Some("K"), None, OpResult::Ok(json!({"id": "K", "age": 41})))));
        rejected(m.step(&s, &op(Semantics::ReadOne, Some("K"), None, OpResult::Error(404))));
        accepted(m.step(&s, &op(Semantics::ReadOne, Some("Q"), None, OpResult::Error(404))));
        accepted(m.step(&s, &op(Semantics::ReadOne, Some("K"), None, OpResult::Error(503))));
    }

    #[test]
    fn read_all_is_order_insensitive_set_equality() {
        let (m, s) = with_student("K");
        let s = accepted(m.step(&s, &op(Semantics::Create, None, None, OpResult::Ok(json!({"id": "J"})))));
        let both = json!([{"id": "K", "age": 40}, {"id": "J"}]);
        let flipped = json!([{"id": "J"}, {"id": "K", "age": 40}]);
        accepted(m.step(&s, &op(Semantics::ReadAll, None, None, OpResult::Ok(both))));
        accepted(m.step(&s, &op(Semantics::ReadAll, None, None, OpResult::Ok(flipped))));
        rejected(m.step(&s, &op(Semantics::ReadAll, None, None, OpResult::Ok(json!([{"id": "J"}])))));
        rejected(m.step(&s, &op(Semantics::ReadAll, None, None, OpResult::Ok(json!([{"id": "J"}, {"id": "J"}])))));
        rejected(m.step(&s, &op(Semantics::ReadAll, None, None, OpResult::Ok(json!([{"id": "J"}, {"id": "K"}])))));
    }

    #[test]
    fn replace_and_merge() {
        let (m, s) = with_student("K");
        let s2 = accepted(m.step(
            &s,
            &op(Semantics::Replace, Some("K"), Some(json!({"age": 7, "email": "a@b"})), OpResult::Ok(json!({"id": "K", "age": 7, "email": "a@b"}))),
        ));
        assert_eq!(s2.get("student", "K"), Some(&json!({"id": "K", "age": 7, "email": "a@b"})));
        rejected(m.step(&s, &op(Semantics::Replace, Some("K"), Some(json!({"age": 7})), OpResult::Ok(json!({"id": "K", "age": 8})))));
        let s3 = accepted(m.step(
            &s2,
            &op(Semantics::Merge, Some("K"), Some(json!({"age": 9})), OpResult::Ok(json!({"id": "K", "age": 9, "email": "a@b"}))),
        ));
        assert_eq!(s3.get("student", "K"), Some(&json!({"id": "K", "age": 9, "email": "a@b"})));
        rejected(m.step(&s2, &op(Semantics::Merge, Some("K"), Some(json!({"age": 9})), OpResult::Ok(json!({"id": "K", "age": 9})))));
        accepted(m.step(&s, &op(Semantics::Merge, Some("Q"), None, OpResult::Error(404))));
        rejected(m.step(&s, &op(Semantics::Merge, Some("K"), None, OpResult::Error(404))));
    }

    #[test]
    fn delete_rules() {
        let (m, s) = with_student("K");
        let gone = accepted(m.step(&s, &op(Semantics::Delete, Some("K"), None, OpResult::Ok(json!("K")))));
        assert_eq!(gone, m.init_state());
        accepted(m.step(&s, &op(Semantics::Delete, Some("K"), None, OpResult::Ok(Value::Null))));
        rejected(m.step(&s, &op(Semantics::Delete, Some("K"), None, OpResult::Ok(json!("Q")))));
        accepted(m.step(&gone, &op(Semantics::Delete, Some("K"), None, OpResult::Error(404))));
    }

    #[test]
    fn unobserved_writes() {
        let (m, s) = with_student("K");
        let body = json!({"age": 1}).as_object().unwrap().clone();
        let created = m.apply_unobserved(&s, Semantics::Create, "student", Some("N"), Some(&body)).unwrap().resolve(&s);
        assert_eq!(created.get("student", "N"), Some(&json!({"id": "N", "age": 1})));
        assert!(m.apply_unobserved(&s, Semantics::Create, "student", Some("K"), Some(&body)).is_err());
        let e = m.apply_unobserved(&s, Semantics::Delete, "student", Some("Q"), None).unwrap();
        assert_eq!(e, Effect::Unchanged);
        let e = m.apply_unobserved(&s, Semantics::Merge, "student", Some("K"), Some(&body)).unwrap().resolve(&s);
        assert_eq!(e.get("student", "K"), Some(&json!({"id": "K", "age": 1})));
    }

    fn arb_object() -> impl Strategy<Value = Value> {
        (0..3i64, prop::option::of("[a-c]")).prop_map(|(age, name)| {
            let mut obj = json!({"age": age});
            if let Some(n) = name {
                obj["firstName"] = json!(n);
            }
            obj
        })
    }

    fn arb_op() -> impl Strategy<Value = ObservedOp> {
        let id = prop::option::of(prop::sample::select(vec!["A", "B"]));
        let result = prop_oneof![
            arb_object().prop_map(OpResult::Ok),
            Just(OpResult::Ok(Value::Null)),
            Just(OpResult::Ok(json!("A"))),
            Just(OpResult::Ok(json!([]))),
            prop::sample::select(vec![400u16, 404, 409, 500]).prop_map(OpResult::Error),
        ];
        (prop::sample::select(Semantics::ALL.to_vec()), id, prop::option::of(arb_object()), result).prop_map(
            |(semantics, id, body, result)| ObservedOp {
                semantics,
                resource: "student".into(),
                id: id.map(str::to_string),
                body: body.map(|b| b.as_object().unwrap().clone()),
                result: match (semantics, result) {
                    (Semantics::Create, OpResult::Ok(Value::Object(mut o))) => {
                        o.insert("id".into(), json!("A"));
                        OpResult::Ok(Value::Object(o))
                    }
                    (_, r) => r,
                },
            },
        )
    }

    proptest! {
        #[test]
        fn step_is_pure_and_reads_preserve_state(ops in prop::collection::vec(arb_op(), 0..12)) {
            let m = model();
            let mut state = m.init_state();
            for op in &ops {
                let before = state.clone();
                let first = m.step(&state, op);
                prop_assert_eq!(&state, &before);
                prop_assert_eq!(&first, &m.step(&state, op));
                if let StepOutcome::Accepted(next) = first {
                    let is_read = op.semantics.is_read() || matches!(op.result, OpResult::Error(_));
                    if is_read {
                        prop_assert_eq!(&next, &state);
                    }
                    state = next;
                }
            }
        }

        #[test]
        fn create_then_delete_is_identity(obj in arb_object(), key in "[A-F]{3}") {
            let (m, s) = with_student("K");
            let mut created = obj.as_object().unwrap().clone();
            created.insert("id".into(), json!(key.clone()));
            let s1 = accepted(m.step(&s, &op(Semantics::Create, None, Some(obj), OpResult::Ok(Value::Object(created)))));
            let s2 = accepted(m.step(&s1, &op(Semantics::Delete, Some(&key), None, OpResult::Ok(json!(key.clone())))));
            prop_assert_eq!(s2, s);
        }
    }
}
