//! Weighted scenarios and the translation of flow steps into requests.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use indexmap::IndexSet;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datagen::{fresh_id, generate_object, DatagenError, GeneratorRegistry, Rng};
use crate::model::id_key;
use crate::spec_model::{DependencyTable, Method, Semantics, ServiceSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub weight: u32,
    pub flow: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Workload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub clients: u32,
    pub period_millis: u64,
    pub duration_secs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Per-client cap on flow executions; the run ends at whichever of
    /// this and the duration comes first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("{message} at line {line}, column {column}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown operation {operation} in scenario {scenario}")]
    UnknownOperation { scenario: usize, operation: String },
    #[error("invalid workload: {0}")]
    Invalid(String),
}

/// Parses a workload document and checks every flow against `spec`.
pub fn parse_workload(text: &str, spec: &ServiceSpec) -> Result<Workload, WorkloadError> {
    let workload: Workload = serde_yaml::from_str(text).map_err(|e| {
        let (line, column) = e.location().map_or((0, 0), |l| (l.line(), l.column()));
        WorkloadError::Syntax {
            line,
            column,
            message: e.to_string(),
        }
    })?;
    validate_workload(&workload, spec)?;
    Ok(workload)
}

pub fn validate_workload(workload: &Workload, spec: &ServiceSpec) -> Result<(), WorkloadError> {
    let invalid = |m: &str| Err(WorkloadError::Invalid(m.to_string()));
    if workload.clients == 0 {
        return invalid("clients must be at least 1");
    }
    if workload.duration_secs == 0 {
        return invalid("durationSecs must be at least 1");
    }
    if workload.scenarios.is_empty() {
        return invalid("at least one scenario is required");
    }
    for (i, scenario) in workload.scenarios.iter().enumerate() {
        if scenario.weight == 0 {
            return Err(WorkloadError::Invalid(format!("scenario {i} has weight 0")));
        }
        if scenario.flow.is_empty() {
            return Err(WorkloadError::Invalid(format!("scenario {i} has an empty flow")));
        }
        if let Some(unknown) = scenario.flow.iter().find(|op| spec.operation(op).is_none()) {
            return Err(WorkloadError::UnknownOperation {
                scenario: i,
                operation: unknown.clone(),
            });
        }
    }
    Ok(())
}

/// Picks scenario `i` with probability `weight_i / Σ weights`.
pub fn select_scenario<'a>(workload: &'a Workload, rng: &mut Rng) -> &'a Scenario {
    let weights = WeightedIndex::new(workload.scenarios.iter().map(|s| s.weight))
        .expect("validated workloads have positive weights");
    &workload.scenarios[weights.sample(rng)]
}

/// Ids believed to exist, per resource. Shared by all clients; only a hint.
#[derive(Debug, Default)]
pub struct IdPool {
    ids: Mutex<BTreeMap<String, IndexSet<String>>>,
}

impl IdPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, resource: &str, id: &str) {
        let mut ids = self.ids.lock().unwrap();
        ids.entry(resource.to_string()).or_default().insert(id.to_string());
    }

    pub fn remove(&self, resource: &str, id: &str) {
        if let Some(set) = self.ids.lock().unwrap().get_mut(resource) {
            set.shift_remove(id);
        }
    }

    /// A uniformly chosen member, if any.
    pub fn sample(&self, resource: &str, rng: &mut Rng) -> Option<String> {
        let ids = self.ids.lock().unwrap();
        let set = ids.get(resource).filter(|s| !s.is_empty())?;
        set.get_index(rng.gen_range(0..set.len())).cloned()
    }

    pub fn len(&self, resource: &str) -> usize {
        self.ids.lock().unwrap().get(resource).map_or(0, IndexSet::len)
    }

    pub fn is_empty(&self, resource: &str) -> bool {
        self.len(resource) == 0
    }
}

/// Responses of the steps executed so far in one flow execution.
#[derive(Debug, Default, Clone)]
pub struct FlowContext {
    outputs: HashMap<String, Value>,
}

impl FlowContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Remembers a successful response of `op_id`; later steps may bind to it.
    pub fn record(&mut self, op_id: &str, output: Value) {
        self.outputs.insert(op_id.to_string(), output);
    }

    /// Drops a response, e.g. after the step it came from failed.
    pub fn forget(&mut self, op_id: &str) {
        self.outputs.remove(op_id);
    }

    fn bound_id(&self, deps: &DependencyTable, op_id: &str) -> Option<String> {
        deps.bindings_for(op_id).iter().find_map(|b| {
            self.outputs
                .get(&b.source_operation_id)?
                .get(&b.response_field)
                .and_then(id_key)
        })
    }
}

/// A concrete request.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub op_id: String,
    pub method: Method,
    pub semantics: Semantics,
    pub resource: String,
    pub id: Option<String>,
    pub path: String,
    pub body: Option<Map<String, Value>>,
}

/// Everything `materialize_step` reads besides the flow context.
pub struct StepInputs<'a> {
    pub spec: &'a ServiceSpec,
    pub deps: &'a DependencyTable,
    pub pool: &'a IdPool,
    pub registry: &'a GeneratorRegistry,
}

/// Resolves one flow step. Id-taking steps use, in order: an id bound by a
/// link from an earlier step of this flow, a random pool member, or a fresh
/// id that was never created.
pub fn materialize_step(
    op_id: &str,
    inputs: &StepInputs<'_>,
    rng: &mut Rng,
    ctx: &FlowContext,
) -> Result<Action, DatagenError> {
    let op = inputs
        .spec
        .operation(op_id)
        .unwrap_or_else(|| panic!("operation {op_id} is not in the spec"));
    let resource = inputs
        .spec
        .resource(&op.resource)
        .unwrap_or_else(|| panic!("resource {} is not in the spec", op.resource));
    let id = op.semantics.takes_id().then(|| {
        ctx.bound_id(inputs.deps, op_id)
            .or_else(|| inputs.pool.sample(&op.resource, rng))
            .unwrap_or_else(|| fresh_id(rng))
    });
    let body = match op.semantics {
        Semantics::Create | Semantics::Replace => Some(generate_object(inputs.registry, resource, rng)?),
        Semantics::Merge => Some(partial(generate_object(inputs.registry, resource, rng)?, rng)),
        _ => None,
    };
    Ok(Action {
        op_id: op.operation_id.clone(),
        method: op.method,
        semantics: op.semantics,
        resource: op.resource.clone(),
        path: op.concrete_path(id.as_deref()),
        id,
        body,
    })
}

/// A random nonempty strict subset of the fields, or the only field.
fn partial(full: Map<String, Value>, rng: &mut Rng) -> Map<String, Value> {
    let n = full.len();
    if n <= 1 {
        return full;
    }
    let keep = rng.gen_range(1..n);
    let mut chosen = sample(rng, n, keep).into_vec();
    chosen.sort_unstable();
    full.into_iter()
        .enumerate()
        .filter(|(i, _)| chosen.binary_search(i).is_ok())
        .map(|(_, kv)| kv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec_model::{resolve_links, student_spec, ID_PLACEHOLDER};

    const STUDENT_WORKLOAD: &str = include_str!("../assets/student-workload.yaml");

    fn two_scenarios(a: u32, b: u32) -> String {
        format!(
            "clients: 1\nperiodMillis: 1\ndurationSecs: 1\nscenarios:\n  - weight: {a}\n    flow: [createStudent]\n  - weight: {b}\n    flow: [getAllStudents]\n"
        )
    }

    fn frequencies(w: &Workload, draws: usize, seed: u64) -> Vec<usize> {
        let mut rng = Rng::new(seed);
        let mut counts = vec![0; w.scenarios.len()];
        for _ in 0..draws {
            let s = select_scenario(w, &mut rng);
            let i = w.scenarios.iter().position(|x| std::ptr::eq(x, s)).unwrap();
            counts[i] += 1;
        }
        counts
    }

    fn chi_square(counts: &[usize], weights: &[f64]) -> f64 {
        let n: usize = counts.iter().sum();
        let total: f64 = weights.iter().sum();
        counts
            .iter()
            .zip(weights)
            .map(|(&c, &w)| {
                let expected = n as f64 * w / total;
                (c as f64 - expected).powi(2) / expected
            })
            .sum()
    }

    #[test]
    fn bundled_workload_parses() {
        let w = parse_workload(STUDENT_WORKLOAD, &student_spec()).unwrap();
        assert_eq!(w.scenarios.len(), 1);
        assert_eq!(w.scenarios[0].weight, 100);
        assert_eq!(w.scenarios[0].flow.len(), 5);
        assert_eq!((w.clients, w.period_millis, w.duration_secs), (5, 1, 30));
        assert_eq!(w.target.as_deref(), Some("127.0.0.1:8080"));
    }

    #[test]
    fn unknown_operation_is_rejected() {
        let text = STUDENT_WORKLOAD.replace("getStudent,", "getStudentData,");
        let err = parse_workload(&text, &student_spec()).unwrap_err();
        assert!(err.to_string().contains("unknown operation getStudentData"), "{err}");
    }

    #[test]
    fn invariants_are_enforced() {
        let spec = student_spec();
        for (from, to) in [("clients: 5", "clients: 0"), ("durationSecs: 30", "durationSecs: 0"), ("weight: 100", "weight: 0")] {
            let err = parse_workload(&STUDENT_WORKLOAD.replace(from, to), &spec).unwrap_err();
            assert!(matches!(err, WorkloadError::Invalid(_)), "{to}: {err}");
        }
        let err = parse_workload("clients: 1\nperiodMillis: 1\ndurationSecs: 1\nscenarios: []\n", &spec).unwrap_err();
        assert!(matches!(err, WorkloadError::Invalid(_)));
        let err = parse_workload("clients: [\n", &spec).unwrap_err();
        assert!(matches!(err, WorkloadError::Syntax { .. }));
    }

    #[test]
    fn single_scenario_is_always_chosen() {
        let w = parse_workload(STUDENT_WORKLOAD, &student_spec()).unwrap();
        assert_eq!(frequencies(&w, 1000, 3), vec![1000]);
    }

    #[test]
    fn weights_90_10() {
        let w = parse_workload(&two_scenarios(90, 10), &student_spec()).unwrap();
        let counts = frequencies(&w, 10_000, 7);
        let f = counts[0] as f64 / 10_000.0;
        assert!((0.88..=0.92).contains(&f), "{f}");
        // df = 1, p = 0.001
        assert!(chi_square(&counts, &[90.0, 10.0]) < 10.828);
    }

    #[test]
    fn weights_1_1_2() {
        let text = "clients: 1\nperiodMillis: 1\ndurationSecs: 1\nscenarios:\n  - {weight: 1, flow: [createStudent]}\n  - {weight: 1, flow: [getStudent]}\n  - {weight: 2, flow: [getAllStudents]}\n";
        let w = parse_workload(text, &student_spec()).unwrap();
        let counts = frequencies(&w, 10_000, 11);
        for (c, p) in counts.iter().zip([0.25, 0.25, 0.5]) {
            assert!((*c as f64 / 10_000.0 - p).abs() <= 0.02, "{counts:?}");
        }
        // df = 2, p = 0.001
        assert!(chi_square(&counts, &[1.0, 1.0, 2.0]) < 13.816);
    }

    fn inputs<'a>(spec: &'a ServiceSpec, deps: &'a DependencyTable, pool: &'a IdPool, registry: &'a GeneratorRegistry) -> StepInputs<'a> {
        StepInputs { spec, deps, pool, registry }
    }

    #[test]
    fn linked_step_reuses_the_flow_id() {
        let spec = student_spec();
        let deps = resolve_links(&spec);
        let pool = IdPool::new();
        pool.add("student", "OTHER");
        let registry = GeneratorRegistry::builtin();
        let mut rng = Rng::new(5);
        let inputs = inputs(&spec, &deps, &pool, &registry);
        let mut ctx = FlowContext::new();
        let create = materialize_step("createStudent", &inputs, &mut rng, &ctx).unwrap();
        assert_eq!(create.id, None);
        assert_eq!(create.path, "/students");
        let body = create.body.unwrap();
        assert_eq!(body.len(), 5);
        assert!(!body.contains_key("id"));
        let mut out = body.clone();
        out.insert("id".into(), "AB12CD34EF56".into());
        ctx.record("createStudent", Value::Object(out));
        for _ in 0..50 {
            let get = materialize_step("getStudent", &inputs, &mut rng, &ctx).unwrap();
            assert_eq!(get.id.as_deref(), Some("AB12CD34EF56"));
            assert_eq!(get.path, "/students/AB12CD34EF56");
        }
        ctx.forget("createStudent");
        let get = materialize_step("getStudent", &inputs, &mut rng, &ctx).unwrap();
        assert_eq!(get.id.as_deref(), Some("OTHER"));
    }

    #[test]
    fn empty_pool_gives_a_fresh_id() {
        let spec = student_spec();
        let deps = resolve_links(&spec);
        let pool = IdPool::new();
        let registry = GeneratorRegistry::builtin();
        let mut rng = Rng::new(9);
        let a = materialize_step("deleteStudent", &inputs(&spec, &deps, &pool, &registry), &mut rng, &FlowContext::new()).unwrap();
        let id = a.id.unwrap();
        assert_eq!(id.len(), 12);
        assert!(!a.path.contains(ID_PLACEHOLDER));
        assert_eq!(a.path, format!("/students/{id}"));
        assert!(a.body.is_none());
    }

    #[test]
    fn pool_sampling_is_uniform() {
        let spec = student_spec();
        let deps = resolve_links(&spec);
        let pool = IdPool::new();
        pool.add("student", "a");
        pool.add("student", "b");
        let registry = GeneratorRegistry::builtin();
        let inputs = inputs(&spec, &deps, &pool, &registry);
        let mut rng = Rng::new(13);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..1000 {
            let a = materialize_step("updateStudent", &inputs, &mut rng, &FlowContext::new()).unwrap();
            *counts.entry(a.id.unwrap()).or_default() += 1;
        }
        assert_eq!(counts.keys().collect::<Vec<_>>(), ["a", "b"]);
        assert!(counts.values().all(|&c| c > 400), "{counts:?}");
    }

    #[test]
    fn pool_add_and_remove() {
        let pool = IdPool::new();
        let mut rng = Rng::new(1);
        assert_eq!(pool.sample("student", &mut rng), None);
        pool.add("student", "a");
        pool.add("student", "a");
        assert_eq!(pool.len("student"), 1);
        pool.remove("student", "a");
        pool.remove("course", "a");
        assert!(pool.is_empty("student"));
    }

    #[test]
    fn merge_bodies_are_strict_subsets() {
        let spec = student_spec();
        let deps = resolve_links(&spec);
        let pool = IdPool::new();
        let registry = GeneratorRegistry::builtin();
        let inputs = inputs(&spec, &deps, &pool, &registry);
        let mut rng = Rng::new(17);
        let mut sizes = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let a = materialize_step("patchStudent", &inputs, &mut rng, &FlowContext::new()).unwrap();
            let body = a.body.unwrap();
            assert!((1..5).contains(&body.len()));
            sizes.insert(body.len());
            let put = materialize_step("updateStudent", &inputs, &mut rng, &FlowContext::new()).unwrap();
            assert_eq!(put.body.unwrap().len(), 5);
        }
        assert_eq!(sizes.len(), 4);
    }
}
