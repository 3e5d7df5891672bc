//! Sampling strings from a small regular-expression subset.
//!
//! Supported: literals, escapes (`\d \w \s \D \W \S` and escaped
//! punctuation), `.`, bracket classes with ranges and negation, groups
//! (`(...)` and `(?:...)`), alternation, and the quantifiers `* + ?
//! {m} {m,} {m,n}`. `^` and `$` are accepted at the ends of the pattern.
//! Everything else is rejected with the offending position.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng as _;
use thiserror::Error;

use super::Rng;

const PRINTABLE: (char, char) = (' ', '~');
const MAX_COUNTED_REPEAT: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at position {position}")]
pub struct PatternError {
    pub position: usize,
    pub message: String,
}

impl PatternError {
    fn new(position: usize, message: impl Into<String>) -> Self {
        PatternError {
            position,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Empty,
    Literal(char),
    /// Sorted, non-overlapping inclusive ranges.
    Class(Vec<(char, char)>),
    Concat(Vec<Node>),
    Alt(Vec<Node>),
    Repeat {
        node: Box<Node>,
        min: u32,
        max: Option<u32>,
    },
}

/// A parsed pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    source: String,
    root: Node,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

pub fn parse(pattern: &str) -> Result<Pattern, PatternError> {
    let chars: Vec<char> = pattern.chars().collect();
    let mut parser = Parser { chars: &chars, pos: 0 };
    if parser.peek() == Some('^') {
        parser.pos += 1;
    }
    let root = parser.alternation()?;
    if parser.peek() == Some('$') && parser.pos + 1 == chars.len() {
        parser.pos += 1;
    }
    match parser.peek() {
        None => Ok(Pattern {
            source: pattern.to_string(),
            root,
        }),
        Some(')') => Err(PatternError::new(parser.pos, "unbalanced ')'")),
        Some(c) => Err(PatternError::new(
            parser.pos,
            format!("unsupported construct '{c}'"),
        )),
    }
}

/// Parses `pattern` and draws one matching string.
pub fn pattern_sample(pattern: &str, rng: &mut Rng) -> Result<String, PatternError> {
    Ok(parse(pattern)?.sample(rng, DEFAULT_UNBOUNDED_EXTRA))
}

/// How far past its minimum an unbounded quantifier may repeat by default.
pub const DEFAULT_UNBOUNDED_EXTRA: u32 = 8;

struct Parser<'a> {
    chars: &'a [char],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        Some(c)
    }

    fn at_trailing_anchor(&self) -> bool {
        self.peek() == Some('$') && self.pos + 1 == self.chars.len()
    }

    fn alternation(&mut self) -> Result<Node, PatternError> {
        let mut branches = vec![self.concat()?];
        while self.peek() == Some('|') {
            self.pos += 1;
            branches.push(self.concat()?);
        }
        Ok(if branches.len() == 1 {
            branches.pop().unwrap()
        } else {
            Node::Alt(branches)
        })
    }

    fn concat(&mut self) -> Result<Node, PatternError> {
        let mut items = Vec::new();
        while let Some(c) = self.peek() {
            if c == '|' || c == ')' || self.at_trailing_anchor() {
                break;
            }
            let atom = self.atom()?;
            items.push(self.quantified(atom)?);
        }
        Ok(match items.len() {
            0 => Node::Empty,
            1 => items.pop().unwrap(),
            _ => Node::Concat(items),
        })
    }

    fn quantified(&mut self, atom: Node) -> Result<Node, PatternError> {
        let start = self.pos;
        let (min, max) = match self.peek() {
            Some('*') => {
                self.pos += 1;
                (0, None)
            }
            Some('+') => {
                self.pos += 1;
                (1, None)
            }
            Some('?') => {
                self.pos += 1;
                (0, Some(1))
            }
            Some('{') => self.counted()?,
            _ => return Ok(atom),
        };
        if matches!(self.peek(), Some('*' | '+' | '?' | '{')) {
            return Err(PatternError::new(
                self.pos,
                "unsupported construct: stacked or lazy quantifier",
            ));
        }
        if max.is_some_and(|max| max < min) {
            return Err(PatternError::new(start, "quantifier minimum exceeds maximum"));
        }
        Ok(Node::Repeat {
            node: Box::new(atom),
            min,
            max,
        })
    }

    fn counted(&mut self) -> Result<(u32, Option<u32>), PatternError> {
        let start = self.pos;
        self.pos += 1;
        let min = self
            .number()
            .ok_or_else(|| PatternError::new(start, "malformed counted repetition"))?;
        let max = match self.bump() {
            Some('}') => Some(min),
            Some(',') if self.peek() == Some('}') => {
                self.pos += 1;
                None
            }
            Some(',') => {
                let max = self
                    .number()
                    .ok_or_else(|| PatternError::new(start, "malformed counted repetition"))?;
                if self.bump() != Some('}') {
                    return Err(PatternError::new(start, "malformed counted repetition"));
                }
                Some(max)
            }
            _ => return Err(PatternError::new(start, "malformed counted repetition")),
        };
        if min > MAX_COUNTED_REPEAT || max.is_some_and(|m| m > MAX_COUNTED_REPEAT) {
            return Err(PatternError::new(start, "repetition count too large"));
        }
        Ok((min, max))
    }

    fn number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return None;
        }
        self.chars[start..self.pos]
            .iter()
            .collect::<String>()
            .parse()
            .ok()
    }

    fn atom(&mut self) -> Result<Node, PatternError> {
        let pos = self.pos;
        let c = self.bump().expect("atom called at end of input");
        match c {
            '(' => {
                if self.peek() == Some('?') {
                    if self.peek_at(1) == Some(':') {
                        self.pos += 2;
                    } else {
                        return Err(PatternError::new(pos, "unsupported construct '(?'"));
                    }
                }
                let inner = self.alternation()?;
                if self.bump() != Some(')') {
                    return Err(PatternError::new(pos, "unclosed group"));
                }
                Ok(inner)
            }
            '[' => self.class(pos),
            '.' => Ok(Node::Class(vec![PRINTABLE])),
            '\\' => self.escape(pos).map(|ranges| match ranges {
                Escape::Char(c) => Node::Literal(c),
                Escape::Class(r) => Node::Class(r),
            }),
            '*' | '+' | '?' | '{' => Err(PatternError::new(pos, "nothing to repeat")),
            '^' | '$' => Err(PatternError::new(
                pos,
                format!("unsupported construct '{c}' (anchors only at pattern ends)"),
            )),
            c => Ok(Node::Literal(c)),
        }
    }

    fn escape(&mut self, pos: usize) -> Result<Escape, PatternError> {
        let c = self
            .bump()
            .ok_or_else(|| PatternError::new(pos, "dangling escape"))?;
        let digit = vec![('0', '9')];
        let word = vec![('0', '9'), ('A', 'Z'), ('_', '_'), ('a', 'z')];
        let space = vec![(' ', ' ')];
        Ok(match c {
            'd' => Escape::Class(digit),
            'w' => Escape::Class(word),
            's' => Escape::Class(space),
            'D' => Escape::Class(negate(&digit)),
            'W' => Escape::Class(negate(&word)),
            'S' => Escape::Class(negate(&space)),
            'n' => Escape::Char('\n'),
            't' => Escape::Char('\t'),
            c if c.is_ascii_punctuation() => Escape::Char(c),
            c => {
                return Err(PatternError::new(
                    pos,
                    format!("unsupported construct '\\{c}'"),
                ))
            }
        })
    }

    fn class(&mut self, pos: usize) -> Result<Node, PatternError> {
        let negated = if self.peek() == Some('^') {
            self.pos += 1;
            true
        } else {
            false
        };
        let mut ranges = Vec::new();
        let mut first = true;
        loop {
            let item_pos = self.pos;
            let c = self
                .bump()
                .ok_or_else(|| PatternError::new(pos, "unclosed character class"))?;
            if c == ']' && !first {
                break;
            }
            first = false;
            let lo = match c {
                '\\' => match self.escape(item_pos)? {
                    Escape::Char(c) => c,
                    Escape::Class(r) => {
                        ranges.extend(r);
                        continue;
                    }
                },
                '[' if self.peek() == Some(':') => {
                    return Err(PatternError::new(item_pos, "unsupported construct '[:'"))
                }
                c => c,
            };
            if self.peek() == Some('-') && self.peek_at(1).is_some_and(|c| c != ']') {
                self.pos += 1;
                let hi_pos = self.pos;
                let hi = match self.bump().unwrap() {
                    '\\' => match self.escape(hi_pos)? {
                        Escape::Char(c) => c,
                        Escape::Class(_) => {
                            return Err(PatternError::new(hi_pos, "class escape in range"))
                        }
                    },
                    c => c,
                };
                if hi < lo {
                    return Err(PatternError::new(item_pos, "invalid class range"));
                }
                ranges.push((lo, hi));
            } else {
                ranges.push((lo, lo));
            }
        }
        let ranges = normalize(ranges);
        let ranges = if negated { negate(&ranges) } else { ranges };
        if ranges.is_empty() {
            return Err(PatternError::new(pos, "character class matches nothing"));
        }
        Ok(Node::Class(ranges))
    }
}

enum Escape {
    Char(char),
    Class(Vec<(char, char)>),
}

fn normalize(mut ranges: Vec<(char, char)>) -> Vec<(char, char)> {
    ranges.sort();
    let mut out: Vec<(char, char)> = Vec::with_capacity(ranges.len());
    for (lo, hi) in ranges {
        match out.last_mut() {
            Some(last) if (lo as u32) <= last.1 as u32 + 1 => {
                if hi > last.1 {
                    last.1 = hi;
                }
            }
            _ => out.push((lo, hi)),
        }
    }
    out
}

/// Complement within printable ASCII.
fn negate(ranges: &[(char, char)]) -> Vec<(char, char)> {
    let ranges = normalize(ranges.to_vec());
    let (lo, hi) = (PRINTABLE.0 as u32, PRINTABLE.1 as u32);
    let mut out = Vec::new();
    let mut next = lo;
    for (a, b) in ranges {
        let (a, b) = (a as u32, b as u32);
        if b < next || a > hi {
            continue;
        }
        if a > next {
            out.push((next, a - 1));
        }
        next = next.max(b + 1);
    }
    if next <= hi {
        out.push((next, hi));
    }
    out.into_iter()
        .map(|(a, b)| (char::from_u32(a).unwrap(), char::from_u32(b).unwrap()))
        .collect()
}

fn class_size(ranges: &[(char, char)]) -> u32 {
    ranges.iter().map(|(a, b)| *b as u32 - *a as u32 + 1).sum()
}

impl Node {
    fn length_range(&self) -> (usize, Option<usize>) {
        match self {
            Node::Empty => (0, Some(0)),
            Node::Literal(_) | Node::Class(_) => (1, Some(1)),
            Node::Concat(items) => items.iter().fold((0, Some(0)), |(lo, hi), n| {
                let (a, b) = n.length_range();
                (lo + a, hi.zip(b).map(|(x, y)| x + y))
            }),
            Node::Alt(branches) => {
                let mut lo = usize::MAX;
                let mut hi = Some(0);
                for b in branches {
                    let (a, m) = b.length_range();
                    lo = lo.min(a);
                    hi = hi.zip(m).map(|(x, y)| x.max(y));
                }
                (lo, hi)
            }
            Node::Repeat { node, min, max } => {
                let (a, b) = node.length_range();
                let hi = match (b, max) {
                    (Some(0), _) => Some(0),
                    (Some(b), Some(m)) => Some(b * *m as usize),
                    _ => None,
                };
                (a * *min as usize, hi)
            }
        }
    }

    fn sample(&self, rng: &mut Rng, unbounded_extra: u32, out: &mut String) {
        match self {
            Node::Empty => {}
            Node::Literal(c) => out.push(*c),
            Node::Class(ranges) => {
                let mut k = rng.gen_range(0..class_size(ranges));
                for (a, b) in ranges {
                    let span = *b as u32 - *a as u32 + 1;
                    if k < span {
                        out.push(char::from_u32(*a as u32 + k).unwrap());
                        return;
                    }
                    k -= span;
                }
            }
            Node::Concat(items) => {
                for item in items {
                    item.sample(rng, unbounded_extra, out);
                }
            }
            Node::Alt(branches) => {
                let i = rng.gen_range(0..branches.len());
                branches[i].sample(rng, unbounded_extra, out);
            }
            Node::Repeat { node, min, max } => {
                let max = max.unwrap_or(min + unbounded_extra);
                let count = rng.gen_range(*min..=max);
                for _ in 0..count {
                    node.sample(rng, unbounded_extra, out);
                }
            }
        }
    }

    /// Every end offset reachable by matching `self` from `start`.
    fn ends(&self, input: &[char], start: usize) -> Vec<usize> {
        match self {
            Node::Empty => vec![start],
            Node::Literal(c) => match input.get(start) {
                Some(x) if x == c => vec![start + 1],
                _ => vec![],
            },
            Node::Class(ranges) => match input.get(start) {
                Some(x) if ranges.iter().any(|(a, b)| a <= x && x <= b) => vec![start + 1],
                _ => vec![],
            },
            Node::Concat(items) => {
                let mut positions = vec![start];
                for item in items {
                    let mut next: Vec<usize> =
                        positions.iter().flat_map(|&p| item.ends(input, p)).collect();
                    next.sort_unstable();
                    next.dedup();
                    if next.is_empty() {
                        return next;
                    }
                    positions = next;
                }
                positions
            }
            Node::Alt(branches) => {
                let mut all: Vec<usize> = branches.iter().flat_map(|b| b.ends(input, start)).collect();
                all.sort_unstable();
                all.dedup();
                all
            }
            Node::Repeat { node, min, max } => {
                let step = |from: &BTreeSet<usize>| -> BTreeSet<usize> {
                    from.iter().flat_map(|&p| node.ends(input, p)).collect()
                };
                let mut current: BTreeSet<usize> = BTreeSet::from([start]);
                for _ in 0..*min {
                    current = step(&current);
                    if current.is_empty() {
                        return vec![];
                    }
                }
                // an offset first reached after fewer iterations dominates later visits
                let mut result = current.clone();
                let mut done = *min;
                while max.map_or(true, |m| done < m) {
                    let next: BTreeSet<usize> = step(&current).difference(&result).copied().collect();
                    if next.is_empty() {
                        break;
                    }
                    result.extend(next.iter().copied());
                    current = next;
                    done += 1;
                }
                result.into_iter().collect()
            }
        }
    }
}

impl Pattern {
    /// Minimum and (if bounded) maximum length of any matching string.
    pub fn length_range(&self) -> (usize, Option<usize>) {
        self.root.length_range()
    }

    /// Draws one matching string. Unbounded quantifiers repeat between
    /// their minimum and minimum + `unbounded_extra` times.
    pub fn sample(&self, rng: &mut Rng, unbounded_extra: u32) -> String {
        let mut out = String::new();
        self.root.sample(rng, unbounded_extra, &mut out);
        out
    }

    /// Whole-string match.
    pub fn matches(&self, input: &str) -> bool {
        let chars: Vec<char> = input.chars().collect();
        self.root.ends(&chars, 0).contains(&chars.len())
    }
}
