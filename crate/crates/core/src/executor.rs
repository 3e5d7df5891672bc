//! Concurrent clients that run a workload over HTTP and record the history.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{SecondsFormat, Utc};
use serde_json::Value;
use tokio::time::Instant;

use crate::datagen::{GeneratorRegistry, Rng};
use crate::history::{ClientId, EventKind, History, HistoryEvent};
use crate::model::id_key;
use crate::spec_model::{resolve_links, Semantics, ServiceSpec};
use crate::workload::{materialize_step, select_scenario, Action, FlowContext, IdPool, StepInputs, Workload};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(1000);
const MAX_DRAIN: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `host:port`, or a base URL.
    pub target: String,
    pub timeout: Duration,
    pub clients: u32,
    pub period: Duration,
    pub duration: Duration,
    pub seed: u64,
    /// Per-client cap on flow executions.
    pub iterations: Option<u64>,
}

impl RunConfig {
    /// Run parameters as the workload file states them. `None` when the
    /// workload names no target or seed.
    pub fn from_workload(workload: &Workload) -> Option<Self> {
        Some(RunConfig {
            target: workload.target.clone()?,
            timeout: DEFAULT_TIMEOUT,
            clients: workload.clients,
            period: Duration::from_millis(workload.period_millis),
            duration: Duration::from_secs(workload.duration_secs),
            seed: workload.seed?,
            iterations: workload.iterations,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("cannot build the HTTP client: {0}")]
    Http(#[from] reqwest::Error),
}

pub fn base_url(target: &str) -> String {
    let target = target.trim_end_matches('/');
    if target.starts_with("http://") || target.starts_with("https://") {
        target.to_string()
    } else {
        format!("http://{target}")
    }
}

/// How one request ended.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub kind: EventKind,
    pub output: Option<Value>,
    pub status: Option<u16>,
}

/// Sends `action` and classifies the outcome. 2xx is ok, 4xx and 5xx on
/// reads are errors, and 5xx, timeouts or connection failures on writes
/// leave the effect unknown (info). A read that got no response is info too.
pub async fn execute_action(http: &reqwest::Client, base: &str, action: &Action) -> Completion {
    let url = format!("{base}{}", action.path);
    let method = reqwest::Method::from_bytes(action.method.as_str().as_bytes()).expect("standard method");
    let mut request = http.request(method, url);
    if let Some(body) = &action.body {
        request = request.json(body);
    }
    let info = |status| Completion {
        kind: EventKind::Info,
        output: None,
        status,
    };
    let response = match request.send().await {
        Ok(r) => r,
        Err(e) => {
            log::debug!("{} {}: {e}", action.method, action.path);
            return info(None);
        }
    };
    let status = response.status();
    let code = Some(status.as_u16());
    if status.is_server_error() && !action.semantics.is_read() {
        return info(code);
    }
    if !status.is_success() {
        return Completion {
            kind: EventKind::Error,
            output: None,
            status: code,
        };
    }
    match response.text().await {
        Ok(text) if text.trim().is_empty() => Completion {
            kind: EventKind::Ok,
            output: Some(Value::Null),
            status: code,
        },
        Ok(text) => Completion {
            kind: EventKind::Ok,
            output: Some(serde_json::from_str(&text).unwrap_or(Value::String(text))),
            status: code,
        },
        // the server answered but the body was lost
        Err(_) => info(code),
    }
}

/// Shared append-only sink. Appending under the lock fixes the index, and
/// so the total order.
#[derive(Default)]
struct Recorder {
    inner: Mutex<RecorderState>,
}

#[derive(Default)]
struct RecorderState {
    events: Vec<HistoryEvent>,
    outstanding: BTreeMap<ClientId, usize>,
    closed: bool,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

impl Recorder {
    fn invoke(&self, client: ClientId, action: &Action) -> bool {
        let mut s = self.inner.lock().unwrap();
        if s.closed {
            return false;
        }
        let index = s.events.len();
        s.events.push(HistoryEvent {
            index: index as u64,
            wall_time: now(),
            client,
            kind: EventKind::Invoke,
            op_id: action.op_id.clone(),
            method: action.method,
            resource: action.resource.clone(),
            id: action.id.clone(),
            body: action.body.clone(),
            output: None,
            status: None,
        });
        s.outstanding.insert(client, index);
        true
    }

    fn complete(&self, client: ClientId, completion: Completion, id: Option<String>) {
        let mut s = self.inner.lock().unwrap();
        if s.closed {
            return;
        }
        let Some(pos) = s.outstanding.remove(&client) else {
            return;
        };
        let invoke = s.events[pos].clone();
        let index = s.events.len() as u64;
        s.events.push(HistoryEvent {
            index,
            wall_time: now(),
            kind: completion.kind,
            id,
            body: None,
            output: completion.output,
            status: completion.status,
            ..invoke
        });
    }

    /// Stops recording and closes every outstanding invoke as info.
    fn close(&self) -> History {
        let mut s = self.inner.lock().unwrap();
        s.closed = true;
        let outstanding: Vec<usize> = std::mem::take(&mut s.outstanding).into_values().collect();
        for pos in outstanding {
            let invoke = s.events[pos].clone();
            let index = s.events.len() as u64;
            s.events.push(HistoryEvent {
                index,
                wall_time: now(),
                kind: EventKind::Info,
                body: None,
                output: None,
                status: None,
                ..invoke
            });
        }
        History::new(std::mem::take(&mut s.events))
    }
}

struct Run {
    spec: ServiceSpec,
    workload: Workload,
    config: RunConfig,
    deps: crate::spec_model::DependencyTable,
    registry: GeneratorRegistry,
    pool: IdPool,
    recorder: Recorder,
    http: reqwest::Client,
    base: String,
    deadline: Instant,
}

impl Run {
    async fn client(self: Arc<Self>, client: ClientId) {
        let mut rng = Rng::new(self.config.seed).fork(client as u64);
        let mut iteration = 0u64;
        while Instant::now() < self.deadline && self.config.iterations.map_or(true, |n| iteration < n) {
            let scenario = select_scenario(&self.workload, &mut rng);
            let mut ctx = FlowContext::new();
            for op_id in &scenario.flow {
                if Instant::now() >= self.deadline {
                    break;
                }
                self.step(client, op_id, &mut rng, &mut ctx).await;
            }
            iteration += 1;
            let pause = self.config.period.min(self.deadline.saturating_duration_since(Instant::now()));
            tokio::time::sleep(pause).await;
        }
    }

    async fn step(&self, client: ClientId, op_id: &str, rng: &mut Rng, ctx: &mut FlowContext) {
        let inputs = StepInputs {
            spec: &self.spec,
            deps: &self.deps,
            pool: &self.pool,
            registry: &self.registry,
        };
        let action = match materialize_step(op_id, &inputs, rng, ctx) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("skipping {op_id}: {e}");
                return;
            }
        };
        if !self.recorder.invoke(client, &action) {
            return;
        }
        let completion = execute_action(&self.http, &self.base, &action).await;
        let mut id = action.id.clone();
        match (&completion.kind, &completion.output) {
            (EventKind::Ok, Some(output)) => {
                if action.semantics == Semantics::Create {
                    id = self
                        .spec
                        .resource(&action.resource)
                        .and_then(|r| output.get(&r.id_field))
                        .and_then(id_key);
                    if let Some(id) = &id {
                        self.pool.add(&action.resource, id);
                    }
                }
                if action.semantics == Semantics::Delete {
                    if let Some(id) = &action.id {
                        self.pool.remove(&action.resource, id);
                    }
                }
                ctx.record(op_id, output.clone());
            }
            _ => ctx.forget(op_id),
        }
        self.recorder.complete(client, completion, id);
    }
}

/// Runs the workload against `config.target` and returns the drained
/// history. Network failures are recorded, not returned.
pub async fn run_workload(spec: &ServiceSpec, workload: &Workload, config: &RunConfig) -> Result<History, ExecutorError> {
    if config.timeout.is_zero() {
        return Err(ExecutorError::Config("timeout must be positive".into()));
    }
    if config.clients == 0 {
        return Err(ExecutorError::Config("at least one client is required".into()));
    }
    crate::workload::validate_workload(workload, spec).map_err(|e| ExecutorError::Config(e.to_string()))?;
    let http = reqwest::Client::builder().timeout(config.timeout).build()?;
    let run = Arc::new(Run {
        spec: spec.clone(),
        workload: workload.clone(),
        config: config.clone(),
        deps: resolve_links(spec),
        registry: GeneratorRegistry::builtin(),
        pool: IdPool::new(),
        recorder: Recorder::default(),
        http,
        base: base_url(&config.target),
        deadline: Instant::now() + config.duration,
    });
    let tasks: Vec<_> = (0..config.clients).map(|c| tokio::spawn(run.clone().client(c))).collect();
    let drain_until = run.deadline + config.timeout.min(MAX_DRAIN);
    for task in tasks {
        let abort = task.abort_handle();
        match tokio::time::timeout_at(drain_until.max(Instant::now()), task).await {
            Ok(Err(e)) if e.is_panic() => std::panic::resume_unwind(e.into_panic()),
            Ok(_) => {}
            Err(_) => abort.abort(),
        }
    }
    Ok(run.recorder.close())
}

/// Asks a fixture started with reset enabled to empty its store.
pub async fn reset_target(target: &str, timeout: Duration) -> Result<(), String> {
    let http = reqwest::Client::builder().timeout(timeout).build().map_err(|e| e.to_string())?;
    let response = http
        .post(format!("{}/reset", base_url(target)))
        .send()
        .await
        .map_err(|e| e.to_string())?;
    if response.status().is_success() {
        Ok(())
    } else {
        Err(format!("reset answered {}", response.status()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_urls() {
        assert_eq!(base_url("127.0.0.1:8080"), "http://127.0.0.1:8080");
        assert_eq!(base_url("http://h:1/"), "http://h:1");
    }

    #[test]
    fn recorder_pairs_and_drains() {
        let r = Recorder::default();
        let action = Action {
            op_id: "getStudent".into(),
            method: crate::spec_model::Method::Get,
            semantics: Semantics::ReadOne,
            resource: "student".into(),
            id: Some("A".into()),
            path: "/students/A".into(),
            body: None,
        };
        assert!(r.invoke(0, &action));
        assert!(r.invoke(1, &action));
        r.complete(
            0,
            Completion {
                kind: EventKind::Error,
                output: None,
                status: Some(404),
            },
            Some("A".into()),
        );
        let h = r.close();
        assert!(!r.invoke(2, &action));
        h.validate().unwrap();
        assert!(h.is_drained());
        let kinds: Vec<_> = h.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, [EventKind::Invoke, EventKind::Invoke, EventKind::Error, EventKind::Info]);
    }
}
