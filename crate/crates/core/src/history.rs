//! Invoke/completion event records, the JSONL history file and a
//! human-readable log renderer.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::spec_model::Method;

pub type ClientId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Invoke,
    Ok,
    Error,
    Info,
}

impl EventKind {
    pub fn is_completion(self) -> bool {
        self != EventKind::Invoke
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Invoke => "invoke",
            EventKind::Ok => "ok",
            EventKind::Error => "error",
            EventKind::Info => "info",
        }
    }
}

/// One line of the history.
///
/// `output` distinguishes an absent value from an explicit `null`: a
/// completion whose response body was `null` carries `Some(Value::Null)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct HistoryEvent {
    pub index: u64,
    pub wall_time: String,
    pub client: ClientId,
    pub kind: EventKind,
    pub op_id: String,
    pub method: Method,
    pub resource: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Map<String, Value>>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "present_value"
    )]
    pub output: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
}

fn present_value<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed event at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unmatched completion at line {line}")]
    UnmatchedCompletion { line: usize },
    #[error("invoke at line {line} while client {client} has an outstanding request")]
    OverlappingInvoke { line: usize, client: ClientId },
    #[error("completion at line {line} does not match its invoke ({expected})")]
    MismatchedCompletion { line: usize, expected: String },
    #[error("event index at line {line} is not greater than the previous one")]
    IndexOrder { line: usize },
}

/// An ordered sequence of events. Order of `events` is the authority;
/// indices must increase strictly along it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    pub fn new(events: Vec<HistoryEvent>) -> Self {
        History { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks index order and per-client invoke/completion alternation.
    /// Errors name 1-based positions, matching JSONL line numbers.
    pub fn validate(&self) -> Result<(), HistoryError> {
        let mut pending: HashMap<ClientId, usize> = HashMap::new();
        let mut last_index = None;
        for (pos, event) in self.events.iter().enumerate() {
            let line = pos + 1;
            if last_index.is_some_and(|last| event.index <= last) {
                return Err(HistoryError::IndexOrder { line });
            }
            last_index = Some(event.index);
            if event.kind == EventKind::Invoke {
                if pending.insert(event.client, pos).is_some() {
                    return Err(HistoryError::OverlappingInvoke {
                        line,
                        client: event.client,
                    });
                }
            } else {
                let invoke = pending
                    .remove(&event.client)
                    .ok_or(HistoryError::UnmatchedCompletion { line })?;
                let invoke = &self.events[invoke];
                if invoke.op_id != event.op_id || invoke.method != event.method {
                    return Err(HistoryError::MismatchedCompletion {
                        line,
                        expected: format!("{} {}", invoke.op_id, invoke.method),
                    });
                }
            }
        }
        Ok(())
    }

    /// Pairs every invoke with its completion, as positions in `events`.
    /// Invokes still outstanding at the end pair with `None`.
    pub fn pairs(&self) -> Vec<(usize, Option<usize>)> {
        let mut pending: HashMap<ClientId, usize> = HashMap::new();
        let mut out = Vec::new();
        let mut slot_of_invoke = HashMap::new();
        for (pos, event) in self.events.iter().enumerate() {
            if event.kind == EventKind::Invoke {
                pending.insert(event.client, pos);
                slot_of_invoke.insert(pos, out.len());
                out.push((pos, None));
            } else if let Some(invoke) = pending.remove(&event.client) {
                out[slot_of_invoke[&invoke]].1 = Some(pos);
            }
        }
        out
    }

    /// Whether every invoke has a completion.
    pub fn is_drained(&self) -> bool {
        self.pairs().iter().all(|(_, c)| c.is_some())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<History, HistoryError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(line).map_err(|e| HistoryError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(event);
        }
        let history = History { events };
        history.validate()?;
        Ok(history)
    }
}

pub fn save_history(history: &History, path: impl AsRef<Path>) -> Result<(), HistoryError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for event in &history.events {
        serde_json::to_writer(&mut out, event).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_history(path: impl AsRef<Path>) -> Result<History, HistoryError> {
    History::from_jsonl(&fs::read_to_string(path)?)
}

/// Formats a JSON value in the log's EDN-like notation.
pub fn edn(value: &Value) -> String {
    let mut out = String::new();
    write_edn(value, &mut out);
    out
}

fn write_edn(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("nil"),
        Value::Bool(b) => write!(out, "{b}").unwrap(),
        Value::Number(n) => write!(out, "{n}").unwrap(),
        Value::String(s) => write!(out, "{s:?}").unwrap(),
        Value::Array(items) => {
            out.push('(');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write_edn(item, out);
            }
            out.push(')');
        }
        Value::Object(map) => write_edn_map(map, out),
    }
}

fn write_edn_map(map: &Map<String, Value>, out: &mut String) {
    out.push('{');
    for (i, (k, v)) in map.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write!(out, ":{k} ").unwrap();
        write_edn(v, out);
    }
    out.push('}');
}

fn clock(wall_time: &str) -> String {
    chrono::DateTime::parse_from_rfc3339(wall_time)
        .map(|t| t.format("%H:%M:%S").to_string())
        .unwrap_or_else(|_| wall_time.to_string())
}

/// One log line for `event`.
pub fn render_event(event: &HistoryEvent) -> String {
    let mut line = format!(
        "{} :{} :{}, :{}",
        clock(&event.wall_time),
        event.client,
        event.kind.as_str(),
        event.method.as_str().to_ascii_lowercase()
    );
    if event.kind == EventKind::Invoke {
        if let Some(body) = &event.body {
            line.push_str(", ");
            write_edn_map(body, &mut line);
        }
        if let Some(id) = &event.id {
            write!(line, ", :path {id:?}").unwrap();
        }
        return line;
    }
    if let Some(id) = &event.id {
        // create completions carry the id inside the output; a delete that
        // echoes its id needs no separate path
        let echoed = event.method == Method::Delete
            && event.output.as_ref().and_then(Value::as_str) == Some(id.as_str());
        if event.method != Method::Post && !echoed {
            write!(line, ", :path {id:?}").unwrap();
        }
    }
    if let Some(output) = &event.output {
        line.push_str(", :output ");
        write_edn(output, &mut line);
    }
    if let Some(status) = event.status {
        write!(line, ", :status {status}").unwrap();
    }
    line
}

/// The whole history as log text, one line per event.
pub fn render_log(history: &History) -> String {
    let mut out = String::new();
    for event in &history.events {
        out.push_str(&render_event(event));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn event(index: u64, client: ClientId, kind: EventKind, method: Method) -> HistoryEvent {
        HistoryEvent {
            index,
            wall_time: "2024-05-02T11:59:59.120+00:00".into(),
            client,
            kind,
            op_id: format!("{}Student", method.as_str().to_lowercase()),
            method,
            resource: "student".into(),
            id: None,
            body: None,
            output: None,
            status: None,
        }
    }

    fn four_events() -> History {
        let mut create = event(0, 0, EventKind::Invoke, Method::Post);
        create.body = Some(json!({"age": 3}).as_object().unwrap().clone());
        let mut created = event(1, 0, EventKind::Ok, Method::Post);
        created.id = Some("A".into());
        created.output = Some(json!({"id": "A", "age": 3}));
        created.status = Some(201);
        let mut get = event(2, 0, EventKind::Invoke, Method::Get);
        get.id = Some("A".into());
        let mut got = event(3, 0, EventKind::Ok, Method::Get);
        got.id = Some("A".into());
        got.output = Some(json!({"id": "A", "age": 3}));
        got.status = Some(200);
        History::new(vec![create, created, get, got])
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        let h = four_events();
        save_history(&h, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 4);
        assert_eq!(load_history(&path).unwrap(), h);
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        save_history(&History::default(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(load_history(&path).unwrap().is_empty());
    }

    #[test]
    fn null_output_survives_round_trip() {
        let mut h = four_events();
        h.events[3].output = Some(Value::Null);
        let text = h.to_jsonl();
        assert!(text.lines().nth(3).unwrap().contains("\"output\":null"));
        assert_eq!(History::from_jsonl(&text).unwrap(), h);
        assert!(!text.lines().next().unwrap().contains("output"));
    }

    #[test]
    fn lower_camel_case_keys() {
        let line = serde_json::to_string(&four_events().events[1]).unwrap();
        assert!(line.contains("\"wallTime\""), "{line}");
        assert!(line.contains("\"opId\":\"postStudent\""), "{line}");
        assert!(line.contains("\"method\":\"POST\""), "{line}");
    }

    #[test]
    fn completion_without_invoke_is_rejected() {
        let h = four_events();
        let text = History::new(h.events[1..].to_vec()).to_jsonl();
        let err = History::from_jsonl(&text).unwrap_err();
        assert_eq!(err.to_string(), "unmatched completion at line 1");
    }

    #[test]
    fn malformed_line_names_line() {
        let mut text = four_events().to_jsonl();
        text.push_str("{not json}\n");
        match History::from_jsonl(&text).unwrap_err() {
            HistoryError::Malformed { line, .. } => assert_eq!(line, 5),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn overlapping_invoke_rejected() {
        let h = four_events();
        let events = vec![h.events[0].clone(), { let mut e = h.events[2].clone(); e.index = 1; e }];
        assert!(matches!(
            History::new(events).validate(),
            Err(HistoryError::OverlappingInvoke { line: 2, client: 0 })
        ));
    }

    #[test]
    fn pairs_and_drain() {
        let h = four_events();
        assert_eq!(h.pairs(), vec![(0, Some(1)), (2, Some(3))]);
        assert!(h.is_drained());
        let partial = History::new(h.events[..3].to_vec());
        assert!(!partial.is_drained());
    }

    #[test]
    fn renders_delete_with_echoed_id() {
        let mut e = event(9, 3, EventKind::Ok, Method::Delete);
        e.id = Some("498C98D9E8CB".into());
        e.output = Some(json!("498C98D9E8CB"));
        let line = render_event(&e);
        assert_eq!(line, "11:59:59 :3 :ok, :delete, :output \"498C98D9E8CB\"");
    }

    #[test]
    fn renders_nil_put_output() {
        let mut e = event(9, 2, EventKind::Ok, Method::Put);
        e.id = Some("71D1083D76BD".into());
        e.output = Some(Value::Null);
        assert!(render_event(&e).contains(":2 :ok, :put, :path \"71D1083D76BD\", :output nil"));
    }

    #[test]
    fn renders_invoke_body_then_path() {
        let mut e = event(0, 4, EventKind::Invoke, Method::Put);
        e.id = Some("498C98D9E8CB".into());
        e.body = Some(json!({"firstName": "Brycen", "age": 129}).as_object().unwrap().clone());
        assert_eq!(
            render_event(&e),
            "11:59:59 :4 :invoke, :put, {:age 129, :firstName \"Brycen\"}, :path \"498C98D9E8CB\""
        );
    }

    #[test]
    fn renders_list_output_and_error_status() {
        let mut e = event(0, 3, EventKind::Ok, Method::Get);
        e.output = Some(json!([{"id": "A"}]));
        assert!(render_event(&e).ends_with(":ok, :get, :output ({:id \"A\"})"));
        let mut f = event(1, 0, EventKind::Error, Method::Get);
        f.status = Some(404);
        assert!(render_event(&f).ends_with(":0 :error, :get, :status 404"));
    }

    #[test]
    fn empty_history_renders_nothing() {
        assert_eq!(render_log(&History::default()), "");
    }
}
