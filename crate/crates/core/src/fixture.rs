//! In-memory CRUD service over the resources of a spec, with switchable
//! concurrency bugs. The target for end-to-end runs.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use rand::Rng as _;
use serde_json::{Map, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::datagen::{fresh_id, Rng};
use crate::spec_model::ServiceSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BugMode {
    /// Every handler runs under one lock.
    #[default]
    Atomic,
    /// Reads and writes of an existing object check existence, release the
    /// lock, wait, then act on whatever is there by then.
    CheckThenAct,
    /// PATCH is an unlocked read-modify-write.
    LostUpdate,
    /// Read-all is served from a snapshot at most 50 ms old.
    StaleReadAll,
}

impl BugMode {
    pub const ALL: [BugMode; 4] = [BugMode::Atomic, BugMode::CheckThenAct, BugMode::LostUpdate, BugMode::StaleReadAll];

    pub fn as_str(self) -> &'static str {
        match self {
            BugMode::Atomic => "atomic",
            BugMode::CheckThenAct => "checkThenAct",
            BugMode::LostUpdate => "lostUpdate",
            BugMode::StaleReadAll => "staleReadAll",
        }
    }
}

impl std::fmt::Display for BugMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BugMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BugMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = BugMode::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown bug mode {s:?}, expected one of {}", names.join(", "))
            })
    }
}

const JITTER_MAX_MS: u64 = 5;
const SNAPSHOT_MAX_AGE: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub struct FixtureConfig {
    pub spec: ServiceSpec,
    pub host: String,
    /// 0 picks a free port.
    pub port: u16,
    pub mode: BugMode,
    pub allow_reset: bool,
    /// Seeds the id generator; the same seed yields the same id sequence
    /// after every reset.
    pub seed: u64,
}

impl FixtureConfig {
    pub fn new(spec: ServiceSpec, mode: BugMode) -> Self {
        FixtureConfig {
            spec,
            host: "127.0.0.1".into(),
            port: 0,
            mode,
            allow_reset: false,
            seed: 0,
        }
    }
}

type Object = Map<String, Value>;

struct Store {
    objects: BTreeMap<String, BTreeMap<String, Object>>,
    rng: Rng,
    issued: HashSet<String>,
}

impl Store {
    fn new(spec: &ServiceSpec, seed: u64) -> Self {
        Store {
            objects: spec.resources.iter().map(|r| (r.name.clone(), BTreeMap::new())).collect(),
            rng: Rng::new(seed),
            issued: HashSet::new(),
        }
    }

    fn table(&mut self, resource: &str) -> &mut BTreeMap<String, Object> {
        self.objects.entry(resource.to_string()).or_default()
    }

    fn next_id(&mut self) -> String {
        loop {
            let id = fresh_id(&mut self.rng);
            if self.issued.insert(id.clone()) {
                return id;
            }
        }
    }
}

struct Snapshot {
    taken: Instant,
    lists: BTreeMap<String, Vec<Object>>,
}

struct Route {
    collection: String,
    resource: String,
    id_field: String,
}

struct Shared {
    spec: ServiceSpec,
    mode: BugMode,
    allow_reset: bool,
    seed: u64,
    routes: Vec<Route>,
    store: Mutex<Store>,
    snapshot: Mutex<Option<Snapshot>>,
}

impl Shared {
    fn reset(&self) {
        *self.store.lock().unwrap() = Store::new(&self.spec, self.seed);
        *self.snapshot.lock().unwrap() = None;
    }
}

/// A running fixture. Dropping it stops the server.
pub struct FixtureHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl FixtureHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `host:port`, as the executor expects its target.
    pub fn target(&self) -> String {
        self.addr.to_string()
    }

    pub fn mode(&self) -> BugMode {
        self.shared.mode
    }

    /// Empties every resource and restarts the id sequence.
    pub fn reset(&self) {
        self.shared.reset();
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Serves until the process receives ctrl-c.
    pub async fn run_until_ctrl_c(self) {
        let _ = tokio::signal::ctrl_c().await;
        self.shutdown().await;
    }
}

impl Drop for FixtureHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn serve(config: FixtureConfig) -> std::io::Result<FixtureHandle> {
    let routes = config
        .spec
        .resources
        .iter()
        .filter_map(|r| {
            Some(Route {
                collection: config.spec.collection_path(&r.name)?,
                resource: r.name.clone(),
                id_field: r.id_field.clone(),
            })
        })
        .collect();
    let shared = Arc::new(Shared {
        store: Mutex::new(Store::new(&config.spec, config.seed)),
        spec: config.spec,
        mode: config.mode,
        allow_reset: config.allow_reset,
        seed: config.seed,
        routes,
        snapshot: Mutex::new(None),
    });
    let listener = TcpListener::bind((config.host.as_str(), config.port)).await?;
    let addr = listener.local_addr()?;
    let app = Router::new().fallback(handle).with_state(shared.clone());
    let (tx, rx) = oneshot::channel();
    let task = tokio::spawn(async move {
        let server = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = server.await {
            log::error!("fixture server failed: {e}");
        }
    });
    log::info!("fixture listening on {addr} in {} mode", shared.mode);
    Ok(FixtureHandle {
        addr,
        shared,
        shutdown: Some(tx),
        task: Some(task),
    })
}

fn json(status: StatusCode, value: impl Into<Value>) -> Response {
    (status, Json(value.into())).into_response()
}

fn not_found() -> Response {
    json(StatusCode::NOT_FOUND, serde_json::json!({"error": "not found"}))
}

fn bad_request(message: String) -> Response {
    json(StatusCode::BAD_REQUEST, serde_json::json!({"error": message}))
}

fn method_not_allowed() -> Response {
    json(StatusCode::METHOD_NOT_ALLOWED, serde_json::json!({"error": "method not allowed"}))
}

async fn jitter() {
    let ms = rand::thread_rng().gen_range(0..=JITTER_MAX_MS);
    tokio::time::sleep(Duration::from_millis(ms)).await;
}

fn parse_object(body: &Bytes) -> Result<Object, Response> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err(bad_request("body must be a JSON object".into())),
        Err(e) => Err(bad_request(format!("malformed JSON: {e}"))),
    }
}

async fn handle(State(shared): State<Arc<Shared>>, method: Method, uri: Uri, body: Bytes) -> Response {
    let path = uri.path().trim_end_matches('/');
    if path == "/reset" && shared.allow_reset {
        if method != Method::POST {
            return method_not_allowed();
        }
        shared.reset();
        return StatusCode::NO_CONTENT.into_response();
    }
    for route in &shared.routes {
        if path == route.collection {
            return match method {
                Method::POST => match parse_object(&body) {
                    Ok(obj) => create(&shared, route, obj),
                    Err(r) => r,
                },
                Method::GET => read_all(&shared, route),
                _ => method_not_allowed(),
            };
        }
        let Some(id) = path
            .strip_prefix(route.collection.as_str())
            .and_then(|rest| rest.strip_prefix('/'))
            .filter(|id| !id.is_empty() && !id.contains('/'))
        else {
            continue;
        };
        let id = id.to_string();
        return match method {
            Method::GET => read_one(&shared, route, id).await,
            Method::DELETE => delete(&shared, route, id).await,
            Method::PUT | Method::PATCH => match parse_object(&body) {
                Ok(obj) if method == Method::PUT => replace(&shared, route, id, obj).await,
                Ok(obj) => merge(&shared, route, id, obj).await,
                Err(r) => r,
            },
            _ => method_not_allowed(),
        };
    }
    not_found()
}

fn create(shared: &Shared, route: &Route, mut obj: Object) -> Response {
    let mut store = shared.store.lock().unwrap();
    let id = store.next_id();
    obj.insert(route.id_field.clone(), Value::String(id.clone()));
    store.table(&route.resource).insert(id, obj.clone());
    json(StatusCode::CREATED, obj)
}

fn read_all(shared: &Shared, route: &Route) -> Response {
    let current = |shared: &Shared| -> BTreeMap<String, Vec<Object>> {
        let store = shared.store.lock().unwrap();
        store
            .objects
            .iter()
            .map(|(r, t)| (r.clone(), t.values().cloned().collect()))
            .collect()
    };
    let lists = if shared.mode == BugMode::StaleReadAll {
        let mut snapshot = shared.snapshot.lock().unwrap();
        if snapshot.as_ref().map_or(true, |s| s.taken.elapsed() >= SNAPSHOT_MAX_AGE) {
            *snapshot = Some(Snapshot {
                taken: Instant::now(),
                lists: current(shared),
            });
        }
        snapshot.as_ref().unwrap().lists.clone()
    } else {
        current(shared)
    };
    let items = lists.get(&route.resource).cloned().unwrap_or_default();
    json(StatusCode::OK, Value::Array(items.into_iter().map(Value::Object).collect()))
}

fn lookup(shared: &Shared, route: &Route, id: &str) -> Option<Object> {
    shared.store.lock().unwrap().table(&route.resource).get(id).cloned()
}

fn or_null(obj: Option<Object>) -> Value {
    obj.map_or(Value::Null, Value::Object)
}

async fn read_one(shared: &Shared, route: &Route, id: String) -> Response {
    if shared.mode != BugMode::CheckThenAct {
        return match lookup(shared, route, &id) {
            Some(obj) => json(StatusCode::OK, obj),
            None => not_found(),
        };
    }
    if lookup(shared, route, &id).is_none() {
        return not_found();
    }
    jitter().await;
    json(StatusCode::OK, or_null(lookup(shared, route, &id)))
}

async fn replace(shared: &Shared, route: &Route, id: String, mut obj: Object) -> Response {
    obj.insert(route.id_field.clone(), Value::String(id.clone()));
    if shared.mode != BugMode::CheckThenAct {
        let mut store = shared.store.lock().unwrap();
        let table = store.table(&route.resource);
        return match table.get_mut(&id) {
            Some(slot) => {
                *slot = obj.clone();
                json(StatusCode::OK, obj)
            }
            None => not_found(),
        };
    }
    if lookup(shared, route, &id).is_none() {
        return not_found();
    }
    jitter().await;
    if let Some(slot) = shared.store.lock().unwrap().table(&route.resource).get_mut(&id) {
        *slot = obj;
    }
    jitter().await;
    json(StatusCode::OK, or_null(lookup(shared, route, &id)))
}

fn merged(mut current: Object, patch: Object, route: &Route, id: &str) -> Object {
    current.extend(patch);
    current.insert(route.id_field.clone(), Value::String(id.to_string()));
    current
}

async fn merge(shared: &Shared, route: &Route, id: String, patch: Object) -> Response {
    match shared.mode {
        BugMode::CheckThenAct => {
            if lookup(shared, route, &id).is_none() {
                return not_found();
            }
            jitter().await;
            {
                let mut store = shared.store.lock().unwrap();
                let table = store.table(&route.resource);
                if let Some(current) = table.remove(&id) {
                    table.insert(id.clone(), merged(current, patch, route, &id));
                }
            }
            jitter().await;
            json(StatusCode::OK, or_null(lookup(shared, route, &id)))
        }
        BugMode::LostUpdate => {
            let Some(current) = lookup(shared, route, &id) else {
                return not_found();
            };
            jitter().await;
            let next = merged(current, patch, route, &id);
            shared.store.lock().unwrap().table(&route.resource).insert(id, next.clone());
            json(StatusCode::OK, next)
        }
        BugMode::Atomic | BugMode::StaleReadAll => {
            let mut store = shared.store.lock().unwrap();
            let table = store.table(&route.resource);
            match table.remove(&id) {
                Some(current) => {
                    let next = merged(current, patch, route, &id);
                    table.insert(id.clone(), next.clone());
                    json(StatusCode::OK, next)
                }
                None => not_found(),
            }
        }
    }
}

async fn delete(shared: &Shared, route: &Route, id: String) -> Response {
    if shared.mode != BugMode::CheckThenAct {
        let removed = shared.store.lock().unwrap().table(&route.resource).remove(&id);
        return match removed {
            Some(_) => json(StatusCode::OK, id),
            None => not_found(),
        };
    }
    if lookup(shared, route, &id).is_none() {
        return not_found();
    }
    jitter().await;
    shared.store.lock().unwrap().table(&route.resource).remove(&id);
    json(StatusCode::OK, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bug_modes_parse() {
        for mode in BugMode::ALL {
            assert_eq!(mode.as_str().parse::<BugMode>(), Ok(mode));
        }
        assert_eq!("checkthenact".parse::<BugMode>(), Ok(BugMode::CheckThenAct));
        assert!("racy".parse::<BugMode>().unwrap_err().contains("atomic"));
    }

    #[test]
    fn ids_are_unique_and_reseeded() {
        let spec = crate::spec_model::student_spec();
        let mut a = Store::new(&spec, 3);
        let ids: Vec<String> = (0..1000).map(|_| a.next_id()).collect();
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 1000);
        assert!(ids.iter().all(|id| id.len() == 12 && id.chars().all(|c| c.is_ascii_digit() || c.is_ascii_uppercase())));
        let mut b = Store::new(&spec, 3);
        assert_eq!(b.next_id(), ids[0]);
    }
}
