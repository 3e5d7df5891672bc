//! Service description: resources, their generated fields, the operations
//! exposed over HTTP and the links that carry response values from one
//! operation into the parameters of another.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{pattern, GeneratorRegistry};

/// Placeholder segment that marks the resource id in an operation path.
pub const ID_PLACEHOLDER: &str = "{id}";

const RESPONSE_BODY_PREFIX: &str = "$response.body#/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    String,
    Integer,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_min: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, kind: FieldKind) -> Self {
        FieldSpec {
            name: name.into(),
            kind,
            generator: None,
            min: None,
            max: None,
            size_min: None,
            size_max: None,
            pattern: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ResourceSpec {
    pub name: String,
    pub id_field: String,
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Post,
    Get,
    Put,
    Patch,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Post => "POST",
            Method::Get => "GET",
            Method::Put => "PUT",
            Method::Patch => "PATCH",
            Method::Delete => "DELETE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What an operation does to the resource it addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Semantics {
    Create,
    ReadOne,
    ReadAll,
    Replace,
    Merge,
    Delete,
}

impl Semantics {
    pub const ALL: [Semantics; 6] = [
        Semantics::Create,
        Semantics::ReadOne,
        Semantics::ReadAll,
        Semantics::Replace,
        Semantics::Merge,
        Semantics::Delete,
    ];

    /// The single HTTP method that carries this semantics.
    pub fn method(self) -> Method {
        match self {
            Semantics::Create => Method::Post,
            Semantics::ReadOne | Semantics::ReadAll => Method::Get,
            Semantics::Replace => Method::Put,
            Semantics::Merge => Method::Patch,
            Semantics::Delete => Method::Delete,
        }
    }

    /// Whether the operation addresses one existing resource by id.
    pub fn takes_id(self) -> bool {
        matches!(
            self,
            Semantics::ReadOne | Semantics::Replace | Semantics::Merge | Semantics::Delete
        )
    }

    pub fn is_read(self) -> bool {
        matches!(self, Semantics::ReadOne | Semantics::ReadAll)
    }

    /// Whether a successful response body is a single resource object.
    pub fn returns_object(self) -> bool {
        matches!(
            self,
            Semantics::Create | Semantics::ReadOne | Semantics::Replace | Semantics::Merge
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Semantics::Create => "create",
            Semantics::ReadOne => "read-one",
            Semantics::ReadAll => "read-all",
            Semantics::Replace => "replace",
            Semantics::Merge => "merge",
            Semantics::Delete => "delete",
        }
    }
}

impl fmt::Display for Semantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    pub target_operation_id: String,
    pub parameter: String,
    pub expression: String,
}

impl LinkSpec {
    /// The response field addressed by a `$response.body#/<field>` expression.
    pub fn response_field(&self) -> Option<&str> {
        parse_link_expression(&self.expression)
    }
}

/// Extracts the field name from `$response.body#/<field>`.
pub fn parse_link_expression(expression: &str) -> Option<&str> {
    let field = expression.strip_prefix(RESPONSE_BODY_PREFIX)?;
    if field.is_empty() || field.contains('/') {
        None
    } else {
        Some(field)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct OperationSpec {
    pub operation_id: String,
    pub method: Method,
    pub path: String,
    pub resource: String,
    pub semantics: Semantics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkSpec>,
}

impl OperationSpec {
    /// Substitutes `id` into the path template.
    pub fn concrete_path(&self, id: Option<&str>) -> String {
        match id {
            Some(id) => self.path.replace(ID_PLACEHOLDER, id),
            None => self.path.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    #[serde(default)]
    pub resources: Vec<ResourceSpec>,
    #[serde(default)]
    pub operations: Vec<OperationSpec>,
}

impl ServiceSpec {
    pub fn resource(&self, name: &str) -> Option<&ResourceSpec> {
        self.resources.iter().find(|r| r.name == name)
    }

    pub fn operation(&self, operation_id: &str) -> Option<&OperationSpec> {
        self.operations.iter().find(|o| o.operation_id == operation_id)
    }

    /// Collection path of a resource (`/students`), taken from its
    /// create or read-all operation, or from any id-taking path with the
    /// trailing id segment removed.
    pub fn collection_path(&self, resource: &str) -> Option<String> {
        let ops = || self.operations.iter().filter(move |o| o.resource == resource);
        if let Some(op) = ops().find(|o| !o.semantics.takes_id()) {
            return Some(op.path.trim_end_matches('/').to_string());
        }
        ops().find_map(|o| {
            o.path
                .strip_suffix(ID_PLACEHOLDER)
                .map(|p| p.trim_end_matches('/').to_string())
        })
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("service spec serializes to yaml")
    }
}

/// One violated invariant, with the place it was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.message, self.location)
    }
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid service spec: {}", join_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

fn join_diagnostics(diagnostics: &[Diagnostic]) -> String {
    diagnostics
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl SpecError {
    pub(crate) fn from_yaml(err: serde_yaml::Error) -> Self {
        let (line, column) = err
            .location()
            .map(|l| (l.line(), l.column()))
            .unwrap_or((0, 0));
        SpecError::Syntax {
            line,
            column,
            message: err.to_string(),
        }
    }
}

/// Parses a YAML document into a [`ServiceSpec`] and validates it.
pub fn parse_service_spec(text: &str) -> Result<ServiceSpec, SpecError> {
    let spec = parse_unvalidated(text)?;
    let diagnostics = validate_spec(&spec);
    if diagnostics.is_empty() {
        Ok(spec)
    } else {
        Err(SpecError::Invalid(diagnostics))
    }
}

/// Parses without semantic validation, so callers can report every
/// diagnostic themselves.
pub fn parse_unvalidated(text: &str) -> Result<ServiceSpec, SpecError> {
    let value: serde_yaml::Value = serde_yaml::from_str(text).map_err(SpecError::from_yaml)?;
    if value.is_null() {
        return Ok(ServiceSpec::default());
    }
    serde_yaml::from_str(text).map_err(SpecError::from_yaml)
}

/// Checks every invariant of the spec and reports one diagnostic per
/// violation. An empty result means the spec can be executed.
pub fn validate_spec(spec: &ServiceSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let registry = GeneratorRegistry::builtin();

    let mut resource_names = BTreeSet::new();
    for resource in &spec.resources {
        if !resource_names.insert(resource.name.as_str()) {
            out.push(Diagnostic::new(&resource.name, "duplicate resource name"));
        }
        validate_resource(resource, &registry, &mut out);
    }

    let mut op_ids = BTreeSet::new();
    for op in &spec.operations {
        let loc = format!("operation {}", op.operation_id);
        if !op_ids.insert(op.operation_id.as_str()) {
            out.push(Diagnostic::new(&loc, "duplicate operationId"));
        }
        if spec.resource(&op.resource).is_none() {
            out.push(Diagnostic::new(
                &loc,
                format!("unknown resource \"{}\"", op.resource),
            ));
        }
        if op.semantics.method() != op.method {
            out.push(Diagnostic::new(
                &loc,
                format!(
                    "{} semantics requires method {}, found {}",
                    op.semantics,
                    op.semantics.method(),
                    op.method
                ),
            ));
        }
        if !op.path.starts_with('/') {
            out.push(Diagnostic::new(&loc, "path must start with '/'"));
        }
        let has_id = op.path.contains(ID_PLACEHOLDER);
        if op.semantics.takes_id() && !has_id {
            out.push(Diagnostic::new(
                &loc,
                format!("{} semantics requires {{id}} in path", op.semantics),
            ));
        }
        if !op.semantics.takes_id() && has_id {
            out.push(Diagnostic::new(
                &loc,
                format!("{} semantics forbids {{id}} in path", op.semantics),
            ));
        }
        let stripped = op.path.replace(ID_PLACEHOLDER, "");
        if stripped.contains('{') || stripped.contains('}') {
            out.push(Diagnostic::new(
                &loc,
                "only the {id} placeholder is supported in paths",
            ));
        }
        for link in &op.links {
            validate_link(spec, op, link, &mut out);
        }
    }

    if let Some(cycle_at) = find_precedence_cycle(spec) {
        out.push(Diagnostic::new(
            format!("operation {cycle_at}"),
            "link graph contains a cycle",
        ));
    }
    out
}

fn validate_resource(resource: &ResourceSpec, registry: &GeneratorRegistry, out: &mut Vec<Diagnostic>) {
    let mut names = BTreeSet::new();
    for field in &resource.fields {
        let loc = format!("{}.{}", resource.name, field.name);
        if field.name == resource.id_field {
            out.push(Diagnostic::new(&loc, "idField must not be listed in fields"));
        }
        if !names.insert(field.name.as_str()) {
            out.push(Diagnostic::new(&loc, "duplicate field name"));
        }
        if let (Some(min), Some(max)) = (field.min, field.max) {
            if min > max {
                out.push(Diagnostic::new(&loc, "min exceeds max"));
            }
        }
        if let (Some(lo), Some(hi)) = (field.size_min, field.size_max) {
            if lo > hi {
                out.push(Diagnostic::new(&loc, "sizeMin exceeds sizeMax"));
            }
        }
        if field.kind != FieldKind::Integer && (field.min.is_some() || field.max.is_some()) {
            out.push(Diagnostic::new(&loc, "min/max apply only to integer fields"));
        }
        if field.kind != FieldKind::String
            && (field.size_min.is_some() || field.size_max.is_some() || field.pattern.is_some())
        {
            out.push(Diagnostic::new(
                &loc,
                "sizeMin/sizeMax/pattern apply only to string fields",
            ));
        }
        if let Some(generator) = &field.generator {
            if !registry.contains(generator) {
                out.push(Diagnostic::new(
                    &loc,
                    format!("unknown generator \"{generator}\""),
                ));
            } else if field.kind != FieldKind::String {
                out.push(Diagnostic::new(&loc, "generators produce strings only"));
            }
        }
        if let Some(pat) = &field.pattern {
            match pattern::parse(pat) {
                Err(err) => out.push(Diagnostic::new(&loc, err.to_string())),
                Ok(ast) if field.generator.is_none() => {
                    let (lo, hi) = ast.length_range();
                    let size_lo = field.size_min.unwrap_or(0);
                    let size_hi = field.size_max.unwrap_or(usize::MAX);
                    if hi.is_some_and(|hi| hi < size_lo) || lo > size_hi {
                        out.push(Diagnostic::new(
                            &loc,
                            "pattern cannot produce a string within the size bounds",
                        ));
                    }
                }
                Ok(_) => {}
            }
        }
    }
}

fn validate_link(spec: &ServiceSpec, op: &OperationSpec, link: &LinkSpec, out: &mut Vec<Diagnostic>) {
    let loc = format!("operation {} link {}", op.operation_id, link.name);
    match spec.operation(&link.target_operation_id) {
        None => out.push(Diagnostic::new(
            &loc,
            format!("unresolved link target \"{}\"", link.target_operation_id),
        )),
        Some(target) if !target.semantics.takes_id() => out.push(Diagnostic::new(
            &loc,
            format!("link target {} takes no id parameter", target.operation_id),
        )),
        Some(_) => {}
    }
    let Some(field) = link.response_field() else {
        out.push(Diagnostic::new(
            &loc,
            format!(
                "unsupported link expression \"{}\" (expected {RESPONSE_BODY_PREFIX}<field>)",
                link.expression
            ),
        ));
        return;
    };
    if !op.semantics.returns_object() {
        out.push(Diagnostic::new(
            &loc,
            format!("{} responses carry no object to link from", op.semantics),
        ));
        return;
    }
    if let Some(resource) = spec.resource(&op.resource) {
        let known = resource.id_field == field || resource.fields.iter().any(|f| f.name == field);
        if !known {
            out.push(Diagnostic::new(
                &loc,
                format!("link expression addresses unknown response field \"{field}\""),
            ));
        }
    }
}

/// Returns an operation on a must-precede cycle, if any.
fn find_precedence_cycle(spec: &ServiceSpec) -> Option<String> {
    let mut edges: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for op in &spec.operations {
        for link in &op.links {
            edges
                .entry(op.operation_id.as_str())
                .or_default()
                .push(link.target_operation_id.as_str());
        }
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Visiting,
        Done,
    }
    fn visit<'a>(
        node: &'a str,
        edges: &BTreeMap<&'a str, Vec<&'a str>>,
        marks: &mut HashMap<&'a str, Mark>,
    ) -> Option<&'a str> {
        match marks.get(node) {
            Some(Mark::Visiting) => return Some(node),
            Some(Mark::Done) => return None,
            None => {}
        }
        marks.insert(node, Mark::Visiting);
        for next in edges.get(node).into_iter().flatten() {
            if let Some(hit) = visit(next, edges, marks) {
                return Some(hit);
            }
        }
        marks.insert(node, Mark::Done);
        None
    }

    let mut marks = HashMap::new();
    edges
        .keys()
        .find_map(|node| visit(node, &edges, &mut marks))
        .map(str::to_string)
}

/// A value of `source` operation's response that feeds `parameter` of the
/// dependent operation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Binding {
    pub link_name: String,
    pub source_operation_id: String,
    pub response_field: String,
    pub parameter: String,
}

/// Per dependent operation, the bindings that can satisfy its id parameter.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependencyTable {
    bindings: BTreeMap<String, Vec<Binding>>,
}

impl DependencyTable {
    pub fn bindings_for(&self, operation_id: &str) -> &[Binding] {
        self.bindings
            .get(operation_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn is_dependent(&self, operation_id: &str) -> bool {
        !self.bindings_for(operation_id).is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Binding])> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Inverts the link declarations: each link on operation A targeting B
/// becomes a binding on B sourced from A.
pub fn resolve_links(spec: &ServiceSpec) -> DependencyTable {
    let mut bindings: BTreeMap<String, Vec<Binding>> = BTreeMap::new();
    for op in &spec.operations {
        for link in &op.links {
            let Some(field) = link.response_field() else {
                continue;
            };
            bindings
                .entry(link.target_operation_id.clone())
                .or_default()
                .push(Binding {
                    link_name: link.name.clone(),
                    source_operation_id: op.operation_id.clone(),
                    response_field: field.to_string(),
                    parameter: link.parameter.clone(),
                });
        }
    }
    DependencyTable { bindings }
}

/// The student service used throughout the examples and by the fixture
/// when no spec is supplied.
pub const STUDENT_SPEC_YAML: &str = include_str!("../assets/student.yaml");

pub fn student_spec() -> ServiceSpec {
    parse_service_spec(STUDENT_SPEC_YAML).expect("bundled student spec is valid")
}
