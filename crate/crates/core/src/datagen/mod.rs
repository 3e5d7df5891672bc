//! Seeded generation of request bodies.
//!
//! A field with a named generator always takes the generator's value; other
//! fields are drawn to satisfy their declared bounds and pattern.

pub mod pattern;

use std::collections::BTreeMap;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::spec_model::{FieldKind, FieldSpec, ResourceSpec};
pub use pattern::{pattern_sample, PatternError};

const DEFAULT_INT_SPAN: i64 = 1000;
const DEFAULT_STRING_MAX: usize = 12;
const SIZE_ATTEMPTS: usize = 10_000;
const MAX_UNBOUNDED_EXTRA: usize = 1000;

/// Deterministic random stream. Clients get independent streams through
/// [`Rng::fork`].
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from this stream's seed. Forking is a
    /// function of the seed only, not of how much has been drawn.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("unknown generator \"{0}\"")]
    UnknownGenerator(String),
    #[error("field {field}: {source}")]
    Pattern {
        field: String,
        #[source]
        source: PatternError,
    },
    #[error("field {field}: no value satisfying pattern and size bounds after {attempts} attempts")]
    Unsatisfiable { field: String, attempts: usize },
}

type GeneratorFn = fn(&mut Rng) -> String;

/// Named value generators for realistic data.
#[derive(Clone)]
pub struct GeneratorRegistry {
    generators: BTreeMap<&'static str, GeneratorFn>,
}

impl std::fmt::Debug for GeneratorRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.generators.keys()).finish()
    }
}

impl GeneratorRegistry {
    pub fn builtin() -> Self {
        let mut generators: BTreeMap<&'static str, GeneratorFn> = BTreeMap::new();
        generators.insert("name.first-name", fake::first_name);
        generators.insert("name.last-name", fake::last_name);
        generators.insert("internet.email", fake::email);
        generators.insert("phone.number", fake::phone_number);
        GeneratorRegistry { generators }
    }

    pub fn contains(&self, path: &str) -> bool {
        self.generators.contains_key(path)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.generators.keys().copied()
    }

    pub fn generate(&self, path: &str, rng: &mut Rng) -> Result<String, DatagenError> {
        let generator = self
            .generators
            .get(path)
            .ok_or_else(|| DatagenError::UnknownGenerator(path.to_string()))?;
        Ok(generator(rng))
    }
}

impl Default for GeneratorRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

pub fn generate_field(
    registry: &GeneratorRegistry,
    field: &FieldSpec,
    rng: &mut Rng,
) -> Result<Value, DatagenError> {
    if let Some(path) = &field.generator {
        let value = registry.generate(path, rng)?;
        if let Some(problem) = string_violation(field, &value) {
            log::warn!(
                "generator {path} produced {value:?} for field {}, which {problem}; keeping it",
                field.name
            );
        }
        return Ok(Value::String(value));
    }
    match field.kind {
        FieldKind::Boolean => Ok(Value::Bool(rng.gen_bool(0.5))),
        FieldKind::Integer => {
            let (lo, hi) = match (field.min, field.max) {
                (Some(lo), Some(hi)) => (lo, hi),
                (Some(lo), None) => (lo, lo.saturating_add(DEFAULT_INT_SPAN)),
                (None, Some(hi)) => (hi.saturating_sub(DEFAULT_INT_SPAN), hi),
                (None, None) => (0, DEFAULT_INT_SPAN),
            };
            Ok(Value::from(rng.gen_range(lo..=hi)))
        }
        FieldKind::String => generate_string(field, rng).map(Value::String),
    }
}

fn generate_string(field: &FieldSpec, rng: &mut Rng) -> Result<String, DatagenError> {
    let Some(source) = &field.pattern else {
        let hi = field
            .size_max
            .unwrap_or_else(|| field.size_min.unwrap_or(0).max(1) + DEFAULT_STRING_MAX - 1);
        let lo = field.size_min.unwrap_or(1).min(hi);
        let len = rng.gen_range(lo..=hi);
        return Ok((0..len).map(|_| rng.sample(rand::distributions::Alphanumeric) as char).collect());
    };
    let parsed = pattern::parse(source).map_err(|source| DatagenError::Pattern {
        field: field.name.clone(),
        source,
    })?;
    let extra = field
        .size_max
        .map(|m| m.clamp(pattern::DEFAULT_UNBOUNDED_EXTRA as usize, MAX_UNBOUNDED_EXTRA))
        .unwrap_or(pattern::DEFAULT_UNBOUNDED_EXTRA as usize) as u32;
    for _ in 0..SIZE_ATTEMPTS {
        let candidate = parsed.sample(rng, extra);
        if within_size(field, &candidate) {
            return Ok(candidate);
        }
    }
    Err(DatagenError::Unsatisfiable {
        field: field.name.clone(),
        attempts: SIZE_ATTEMPTS,
    })
}

fn within_size(field: &FieldSpec, value: &str) -> bool {
    let len = value.chars().count();
    field.size_min.map_or(true, |lo| len >= lo) && field.size_max.map_or(true, |hi| len <= hi)
}

fn string_violation(field: &FieldSpec, value: &str) -> Option<&'static str> {
    if !within_size(field, value) {
        return Some("violates the size bounds");
    }
    let pattern = field.pattern.as_deref().and_then(|p| pattern::parse(p).ok())?;
    (!pattern.matches(value)).then_some("does not match the pattern")
}

/// A request body for `resource`: every declared field, never the id.
pub fn generate_object(
    registry: &GeneratorRegistry,
    resource: &ResourceSpec,
    rng: &mut Rng,
) -> Result<Map<String, Value>, DatagenError> {
    let mut object = Map::new();
    for field in &resource.fields {
        object.insert(field.name.clone(), generate_field(registry, field, rng)?);
    }
    Ok(object)
}

/// An identifier in the fixture's format: 12 uppercase hex characters.
pub fn fresh_id(rng: &mut Rng) -> String {
    format!("{:012X}", rng.next_u64() & 0xFFFF_FFFF_FFFF)
}

mod fake {
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    use super::Rng;

    const FIRST: &[&str] = &[
        "Brycen", "Sasha", "Grayce", "Adam", "Claudine", "Marques", "Ada", "Linus", "Grace",
        "Alan", "Barbara", "Edsger", "Leslie", "Frances", "Ken", "Radia", "Donald", "Margaret",
        "Tony", "Shafi", "Niklaus", "Hedy", "Dennis", "Katherine", "John", "Sophie", "Bjarne",
        "Joan", "Tim", "Lynn",
    ];
    const LAST: &[&str] = &[
        "Cummerata", "Hyatt", "Brekke", "Prosacco", "Rodriguez", "Lovelace", "Hopper", "Turing",
        "Liskov", "Dijkstra", "Lamport", "Allen", "Thompson", "Perlman", "Knuth", "Hamilton",
        "Hoare", "Goldwasser", "Wirth", "Lamarr", "Ritchie", "Johnson", "Backus", "Wilson",
        "Stroustrup", "Clarke", "Berners", "Conway", "Kay", "Milner",
    ];
    const DOMAINS: &[&str] = &[
        "prince.com", "hotmail.com", "yahoo.com", "gmail.com", "example.org", "mail.net",
    ];

    fn pick(list: &[&'static str], rng: &mut Rng) -> &'static str {
        list.choose(rng).expect("non-empty word list")
    }

    pub(super) fn first_name(rng: &mut Rng) -> String {
        pick(FIRST, rng).to_string()
    }

    pub(super) fn last_name(rng: &mut Rng) -> String {
        pick(LAST, rng).to_string()
    }

    pub(super) fn email(rng: &mut Rng) -> String {
        let first = pick(FIRST, rng).to_lowercase();
        let last = pick(LAST, rng).to_lowercase();
        let domain = pick(DOMAINS, rng);
        match rng.gen_range(0..3) {
            0 => format!("{first}@{domain}"),
            1 => format!("{first}.{last}@{domain}"),
            _ => format!("{first}{}@{domain}", rng.gen_range(1..100)),
        }
    }

    pub(super) fn phone_number(rng: &mut Rng) -> String {
        let area = rng.gen_range(100..1000);
        let exchange = rng.gen_range(100..1000);
        let line = rng.gen_range(0..10_000);
        match rng.gen_range(0..3) {
            0 => format!("{area}-{exchange}-{line:04}"),
            1 => format!("({area}){exchange}-{line:04}"),
            _ => format!("1-{area}-{exchange}-{line:04} x{}", rng.gen_range(1000..100_000)),
        }
    }
}
