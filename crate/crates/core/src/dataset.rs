//! Interaction-log and item-metadata ingestion, the two-domain id
//! convention, and leave-one-out splitting.
//!
//! Item ids are dense integers with domain A occupying the low range
//! `0..boundary` and domain B the rest, so a domain test is a single range
//! comparison. Input files are JSONL, one record per line.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine { path: String, line: usize, message: String },
    #[error("duplicate item id {0}")]
    DuplicateId(u32),
    #[error("domain-range violation: item {id} ({domain}) breaks the A-before-B id ordering")]
    DomainRangeViolation { id: u32, domain: DomainId },
    #[error("item ids are not dense: expected {expected} items, max id {max_id}")]
    NonDenseIds { expected: usize, max_id: u32 },
    #[error("empty catalog")]
    EmptyCatalog,
    #[error("user {user}: unknown item id {id}")]
    UnknownItem { user: u32, id: u32 },
    #[error("user {user}: empty event list")]
    EmptySequence { user: u32 },
    #[error("user {user}: duplicate user id")]
    DuplicateUser { user: u32 },
    #[error("user {user}: sequence of length {len} is too short to split (need >= 3)")]
    SequenceTooShort { user: u32, len: usize },
}

/// One of the two catalog domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DomainId {
    A,
    B,
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainId::A => write!(f, "A"),
            DomainId::B => write!(f, "B"),
        }
    }
}

impl std::str::FromStr for DomainId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(DomainId::A),
            "B" | "b" => Ok(DomainId::B),
            other => Err(format!("unknown domain {other:?} (expected A or B)")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Item {
    pub id: u32,
    pub domain: DomainId,
    pub title: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

/// The item universe. Ids `0..boundary` are domain A, the rest domain B.
/// Attribute strings live in their own index space `0..vocab.len()`.
#[derive(Clone, Debug)]
pub struct Catalog {
    items: Vec<Item>,
    boundary: usize,
    attribute_vocab: Vec<String>,
    attribute_ids: BTreeMap<String, usize>,
}

impl Catalog {
    pub fn new(items: Vec<Item>) -> Result<Self, DataError> {
        if items.is_empty() {
            return Err(DataError::EmptyCatalog);
        }
        let mut seen = vec![false; items.len()];
        let mut boundary = 0usize;
        let mut seen_b = false;
        for item in &items {
            let idx = item.id as usize;
            if idx >= items.len() {
                return Err(DataError::NonDenseIds { expected: items.len(), max_id: item.id });
            }
            if seen[idx] {
                return Err(DataError::DuplicateId(item.id));
            }
            seen[idx] = true;
        }
        let mut by_id = items;
        by_id.sort_by_key(|i| i.id);
        for item in &by_id {
            match item.domain {
                DomainId::A => {
                    if seen_b {
                        return Err(DataError::DomainRangeViolation { id: item.id, domain: DomainId::A });
                    }
                    boundary += 1;
                }
                DomainId::B => seen_b = true,
            }
        }
        let mut attribute_vocab = Vec::new();
        let mut attribute_ids = BTreeMap::new();
        for item in &by_id {
            for attr in &item.attributes {
                if !attribute_ids.contains_key(attr) {
                    attribute_ids.insert(attr.clone(), attribute_vocab.len());
                    attribute_vocab.push(attr.clone());
                }
            }
        }
        Ok(Catalog { items: by_id, boundary, attribute_vocab, attribute_ids })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Count of domain-A items; the first domain-B id.
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn n_domain(&self, domain: DomainId) -> usize {
        match domain {
            DomainId::A => self.boundary,
            DomainId::B => self.items.len() - self.boundary,
        }
    }

    pub fn attribute_vocab(&self) -> &[String] {
        &self.attribute_vocab
    }

    pub fn attribute_id(&self, attr: &str) -> Option<usize> {
        self.attribute_ids.get(attr).copied()
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.items.len()
    }

    pub fn domain_of(&self, id: u32) -> DomainId {
        if (id as usize) < self.boundary {
            DomainId::A
        } else {
            DomainId::B
        }
    }

    /// Offset of an item within its own domain's id range.
    pub fn local_index(&self, id: u32) -> usize {
        match self.domain_of(id) {
            DomainId::A => id as usize,
            DomainId::B => id as usize - self.boundary,
        }
    }

    pub fn global_id(&self, domain: DomainId, local: usize) -> u32 {
        match domain {
            DomainId::A => local as u32,
            DomainId::B => (local + self.boundary) as u32,
        }
    }

    pub fn title(&self, id: u32) -> &str {
        &self.items[id as usize].title
    }

    /// Global ids of all items in one domain, ascending.
    pub fn domain_ids(&self, domain: DomainId) -> std::ops::Range<u32> {
        match domain {
            DomainId::A => 0..self.boundary as u32,
            DomainId::B => self.boundary as u32..self.items.len() as u32,
        }
    }
}

/// A user's chronological interaction history across both domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: u32,
    pub events: Vec<u32>,
}

impl UserSequence {
    /// The subsequence of events falling in one domain, original order.
    pub fn domain_view(&self, boundary: usize, domain: DomainId) -> Vec<u32> {
        self.events
            .iter()
            .copied()
            .filter(|&id| match domain {
                DomainId::A => (id as usize) < boundary,
                DomainId::B => (id as usize) >= boundary,
            })
            .collect()
    }
}

/// An evaluation instance: everything the user did before the held-out
/// target, plus the target itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub user_id: u32,
    pub prefix: Vec<u32>,
    pub target: u32,
}

/// Leave-one-out split: the test target is each user's final event, the
/// validation target the penultimate one, and train sequences stop before
/// the validation target.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Vec<UserSequence>,
    pub valid: Vec<EvalPair>,
    pub test: Vec<EvalPair>,
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    std::io::BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Loads `catalog.jsonl`: `{"id":int,"domain":"A"|"B","title":str,"attributes":[str]}`.
pub fn load_catalog(path: &Path) -> Result<Catalog, DataError> {
    let mut items = Vec::new();
    for (no, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
            path: path.display().to_string(),
            line: no + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Catalog::new(items)
}

/// Writes a catalog back out in its normalized (id-sorted) form.
pub fn save_catalog(catalog: &Catalog, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for item in catalog.items() {
        out.push_str(&serde_json::to_string(item).expect("item serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

#[derive(Serialize, Deserialize)]
struct InteractionRecord {
    user_id: u32,
    events: Vec<u32>,
}

/// Loads `interactions.jsonl`: `{"user_id":int,"events":[int]}`. Every
/// event id must exist in the catalog and event lists must be non-empty.
pub fn load_interactions(path: &Path, catalog: &Catalog) -> Result<Vec<UserSequence>, DataError> {
    let mut seqs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (no, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InteractionRecord =
            serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
                path: path.display().to_string(),
                line: no + 1,
                message: e.to_string(),
            })?;
        if rec.events.is_empty() {
            return Err(DataError::EmptySequence { user: rec.user_id });
        }
        if !seen.insert(rec.user_id) {
            return Err(DataError::DuplicateUser { user: rec.user_id });
        }
        for &id in &rec.events {
            if !catalog.contains(id) {
                return Err(DataError::UnknownItem { user: rec.user_id, id });
            }
        }
        seqs.push(UserSequence { user_id: rec.user_id, events: rec.events });
    }
    Ok(seqs)
}

pub fn save_interactions(seqs: &[UserSequence], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for s in seqs {
        let rec = InteractionRecord { user_id: s.user_id, events: s.events.clone() };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Keeps only sequences with at least `min_len` events, preserving order.
pub fn filter_min_interactions(seqs: Vec<UserSequence>, min_len: usize) -> Vec<UserSequence> {
    assert!(min_len >= 1, "min_len must be at least 1");
    seqs.into_iter().filter(|s| s.events.len() >= min_len).collect()
}

/// Leave-one-out split; every sequence must have at least 3 events.
pub fn leave_one_out_split(seqs: &[UserSequence]) -> Result<SplitDataset, DataError> {
    let mut train = Vec::with_capacity(seqs.len());
    let mut valid = Vec::with_capacity(seqs.len());
    let mut test = Vec::with_capacity(seqs.len());
    for s in seqs {
        let n = s.events.len();
        if n < 3 {
            return Err(DataError::SequenceTooShort { user: s.user_id, len: n });
        }
        train.push(UserSequence { user_id: s.user_id, events: s.events[..n - 2].to_vec() });
        valid.push(EvalPair {
            user_id: s.user_id,
            prefix: s.events[..n - 2].to_vec(),
            target: s.events[n - 2],
        });
        test.push(EvalPair {
            user_id: s.user_id,
            prefix: s.events[..n - 1].to_vec(),
            target: s.events[n - 1],
        });
    }
    Ok(SplitDataset { train, valid, test })
}

/// Small hand-built catalog for tests elsewhere in the crate.
#[doc(hidden)]
pub fn test_catalog(items: &[(u32, DomainId, &str, &[&str])]) -> Catalog {
    let items = items
        .iter()
        .map(|(id, domain, title, attrs)| Item {
            id: *id,
            domain: *domain,
            title: title.to_string(),
            attributes: attrs.iter().map(|a| a.to_string()).collect(),
        })
        .collect();
    Catalog::new(items).expect("test catalog is well-formed")
}

/// Writes a JSONL file from pre-serialized lines; used by the CLI stages.
pub fn write_jsonl<S: Serialize>(records: &[S], path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n")
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    }
    w.flush()
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}
