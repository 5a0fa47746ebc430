//! Skill and guide memory: request embeddings tagged with whether the weak
//! tier solved them alone, solved them with a guide, or needs the strong tier.
//!
//! Search is an exhaustive scan, so top-1 results are exact. Persistence is
//! line-delimited JSON, one [`MemoryEntry`] per line. Embedding components are
//! written as shortest round-trip decimals, which read back bit-exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_with_norms, EmbeddingVector, UNIT_NORM_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryFlag {
    SolvedAlone,
    SolvedWithGuide,
    RequiresStrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryEntry {
    pub id: String,
    pub embedding: EmbeddingVector,
    pub request_text: String,
    pub flag: EntryFlag,
    pub guide_text: Option<String>,
    pub domain: Option<String>,
    pub created_seq: u64,
    pub retry_at_seq: Option<u64>,
}

impl MemoryEntry {
    pub fn validate(&self, dim: usize) -> Result<(), MemoryError> {
        let fail = |msg: String| Err(MemoryError::InvariantViolation(format!("{}: {msg}", self.id)));
        if self.id.is_empty() {
            return fail("empty id".into());
        }
        if self.embedding.dim() != dim {
            return fail(format!("embedding dim {} != {dim}", self.embedding.dim()));
        }
        if (self.embedding.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return fail("embedding is not unit length".into());
        }
        let has_guide = self.guide_text.as_deref().is_some_and(|g| !g.trim().is_empty());
        match self.flag {
            EntryFlag::SolvedWithGuide if !has_guide => fail("SolvedWithGuide without guide text".into()),
            EntryFlag::SolvedAlone | EntryFlag::RequiresStrong if self.guide_text.is_some() => {
                fail(format!("{:?} entry carries a guide", self.flag))
            }
            EntryFlag::RequiresStrong => match self.retry_at_seq {
                Some(r) if r > self.created_seq => Ok(()),
                Some(r) => fail(format!("retry_at_seq {r} <= created_seq {}", self.created_seq)),
                None => fail("RequiresStrong without retry_at_seq".into()),
            },
            _ if self.retry_at_seq.is_some() => fail("retry_at_seq on a solved entry".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryHit {
    pub entry: MemoryEntry,
    pub score: f64,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory invariant violated: {0}")]
    InvariantViolation(String),
    #[error("unknown memory entry {0}")]
    UnknownId(String),
    #[error("memory file I/O: {0}")]
    Io(#[from] io::Error),
    #[error("memory file line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct MemoryStore {
    dim: usize,
    entries: Vec<MemoryEntry>,
    norms: Vec<f64>,
    by_id: HashMap<String, usize>,
    by_key: HashMap<(String, EntryFlag), usize>,
}

impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.entries == other.entries
    }
}

impl MemoryStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            norms: Vec::new(),
            by_id: HashMap::new(),
            by_key: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&MemoryEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn find(&self, request_text: &str, flag: EntryFlag) -> Option<&MemoryEntry> {
        self.by_key
            .get(&(request_text.to_owned(), flag))
            .map(|&i| &self.entries[i])
    }

    pub fn max_created_seq(&self) -> Option<u64> {
        self.entries.last().map(|e| e.created_seq)
    }

    /// Smallest `created_seq` a new entry may carry.
    pub fn next_seq(&self) -> u64 {
        self.max_created_seq().map_or(0, |s| s + 1)
    }

    /// An id of the form `mem-N` not used by any entry.
    pub fn fresh_id(&self) -> String {
        let mut n = self.entries.len();
        loop {
            let id = format!("mem-{n}");
            if !self.by_id.contains_key(&id) {
                return id;
            }
            n += 1;
        }
    }

    /// Inserts `entry`, or returns the id of an existing entry with the same
    /// `(request_text, flag)`.
    pub fn insert(&mut self, entry: MemoryEntry) -> Result<String, MemoryError> {
        entry.validate(self.dim)?;
        if let Some(existing) = self.find(&entry.request_text, entry.flag) {
            return Ok(existing.id.clone());
        }
        self.push(entry)
    }

    fn push(&mut self, entry: MemoryEntry) -> Result<String, MemoryError> {
        if let Some(max) = self.max_created_seq() {
            if entry.created_seq <= max {
                return Err(MemoryError::InvariantViolation(format!(
                    "{}: created_seq {} is not after {max}",
                    entry.id, entry.created_seq
                )));
            }
        }
        if self.by_id.contains_key(&entry.id) {
            return Err(MemoryError::InvariantViolation(format!("duplicate id {}", entry.id)));
        }
        let key = (entry.request_text.clone(), entry.flag);
        if self.by_key.contains_key(&key) {
            return Err(MemoryError::InvariantViolation(format!(
                "duplicate ({:?}, {:?})",
                key.0, key.1
            )));
        }
        let idx = self.entries.len();
        self.by_id.insert(entry.id.clone(), idx);
        self.by_key.insert(key, idx);
        self.norms.push(entry.embedding.norm());
        let id = entry.id.clone();
        self.entries.push(entry);
        Ok(id)
    }

    /// Best entry with score `>= threshold` whose flag passes `flags`.
    /// Equal scores go to the most recently created entry.
    pub fn query(&self, q: &EmbeddingVector, threshold: f64, flags: Option<&[EntryFlag]>) -> Option<QueryHit> {
        debug_assert!((0.0..=1.0).contains(&threshold));
        if q.dim() != self.dim {
            return None;
        }
        let q_norm = q.norm();
        let mut best: Option<(usize, f64)> = None;
        for (i, entry) in self.entries.iter().enumerate() {
            if flags.is_some_and(|f| !f.contains(&entry.flag)) {
                continue;
            }
            let score = cosine_with_norms(q.values(), entry.embedding.values(), q_norm, self.norms[i]);
            if score < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((j, s)) => score > s || (score == s && entry.created_seq > self.entries[j].created_seq),
            };
            if better {
                best = Some((i, score));
            }
        }
        best.map(|(i, score)| QueryHit {
            entry: self.entries[i].clone(),
            score,
        })
    }

    fn index_of(&self, id: &str) -> Result<usize, MemoryError> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| MemoryError::UnknownId(id.to_owned()))
    }

    /// Applies `change` to entry `id`, keeping the dedup index consistent and
    /// rolling back if the result violates an invariant.
    fn update(&mut self, id: &str, change: impl FnOnce(&mut MemoryEntry)) -> Result<MemoryEntry, MemoryError> {
        let idx = self.index_of(id)?;
        let mut updated = self.entries[idx].clone();
        change(&mut updated);
        updated.validate(self.dim)?;
        let old_key = (self.entries[idx].request_text.clone(), self.entries[idx].flag);
        let new_key = (updated.request_text.clone(), updated.flag);
        if new_key != old_key {
            if self.by_key.contains_key(&new_key) {
                return Err(MemoryError::InvariantViolation(format!(
                    "{id}: another entry already holds ({:?}, {:?})",
                    new_key.0, new_key.1
                )));
            }
            self.by_key.remove(&old_key);
            self.by_key.insert(new_key, idx);
        }
        self.entries[idx] = updated.clone();
        Ok(updated)
    }

    pub fn mark_requires_strong(&mut self, id: &str, retry_at_seq: u64) -> Result<MemoryEntry, MemoryError> {
        self.update(id, |e| {
            e.flag = EntryFlag::RequiresStrong;
            e.guide_text = None;
            e.retry_at_seq = Some(retry_at_seq);
        })
    }

    /// Flips an entry to a solved flag after a successful retry.
    pub fn mark_solved(&mut self, id: &str, guide_text: Option<String>) -> Result<MemoryEntry, MemoryError> {
        self.update(id, |e| {
            e.flag = if guide_text.is_some() {
                EntryFlag::SolvedWithGuide
            } else {
                EntryFlag::SolvedAlone
            };
            e.guide_text = guide_text;
            e.retry_at_seq = None;
        })
    }

    /// Keeps only entries matching `keep`, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(&MemoryEntry) -> bool) -> MemoryStore {
        let mut out = MemoryStore::new(self.dim);
        for e in self.entries.iter().filter(|e| keep(e)) {
            out.push(e.clone()).expect("subset of a valid store is valid");
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), MemoryError> {
        for entry in &self.entries {
            serde_json::to_writer(&mut w, entry).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: Read>(dim: usize, r: R) -> Result<Self, MemoryError> {
        let mut store = MemoryStore::new(dim);
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let format = |message: String| MemoryError::Format { line: line_no, message };
            let entry: MemoryEntry = serde_json::from_str(&line).map_err(|e| format(e.to_string()))?;
            entry.validate(dim).map_err(|e| format(e.to_string()))?;
            store.push(entry).map_err(|e| format(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn load(dim: usize, path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        Self::read_from(dim, File::open(path)?)
    }
}

/// Reader-writer wrapper: many concurrent readers or one writer.
#[derive(Debug)]
pub struct SharedMemory(RwLock<MemoryStore>);

impl SharedMemory {
    pub fn new(store: MemoryStore) -> Self {
        Self(RwLock::new(store))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, MemoryStore> {
        self.0.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, MemoryStore> {
        self.0.write()
    }

    pub fn snapshot(&self) -> MemoryStore {
        self.0.read().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::feature_hash;

    fn entry(id: &str, text: &str, flag: EntryFlag, seq: u64) -> MemoryEntry {
        MemoryEntry {
            id: id.into(),
            embedding: feature_hash(text, 16).unwrap(),
            request_text: text.into(),
            flag,
            guide_text: (flag == EntryFlag::SolvedWithGuide).then(|| "hint".to_string()),
            domain: None,
            created_seq: seq,
            retry_at_seq: (flag == EntryFlag::RequiresStrong).then_some(seq + 5),
        }
    }

    fn unit(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(values.to_vec()).unwrap()
    }

    fn with_embedding(mut e: MemoryEntry, emb: EmbeddingVector) -> MemoryEntry {
        e.embedding = emb;
        e
    }

    #[test]
    fn insert_and_dedup() {
        let mut store = MemoryStore::new(16);
        let id = store
            .insert(entry("a", "what is law", EntryFlag::SolvedAlone, 0))
            .unwrap();
        assert_eq!(store.len(), 1);
        let again = store
            .insert(entry("b", "what is law", EntryFlag::SolvedAlone, 1))
            .unwrap();
        assert_eq!(again, id);
        assert_eq!(store.len(), 1);
        store
            .insert(entry("c", "what is law", EntryFlag::SolvedWithGuide, 2))
            .unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn insert_rejects_stale_seq_and_bad_flags() {
        let mut store = MemoryStore::new(16);
        store.insert(entry("a", "one", EntryFlag::SolvedAlone, 5)).unwrap();
        assert!(matches!(
            store.insert(entry("b", "two", EntryFlag::SolvedAlone, 5)),
            Err(MemoryError::InvariantViolation(_))
        ));
        let mut bad = entry("c", "three", EntryFlag::SolvedWithGuide, 9);
        bad.guide_text = Some("  ".into());
        assert!(matches!(store.insert(bad), Err(MemoryError::InvariantViolation(_))));
        let mut bad = entry("d", "four", EntryFlag::RequiresStrong, 9);
        bad.retry_at_seq = Some(9);
        assert!(matches!(store.insert(bad), Err(MemoryError::InvariantViolation(_))));
    }

    #[test]
    fn query_examples() {
        let store = MemoryStore::new(2);
        assert!(store.query(&unit(&[1.0, 0.0]), 0.2, None).is_none());

        let mut store = MemoryStore::new(2);
        let q = unit(&[1.0, 0.0]);
        store
            .insert(with_embedding(entry("self", "s", EntryFlag::SolvedAlone, 0), q.clone()))
            .unwrap();
        let hit = store.query(&q, 0.2, None).unwrap();
        assert_eq!(hit.entry.id, "self");
        assert_eq!(hit.score, 1.0);
    }

    #[test]
    fn query_picks_highest_above_threshold() {
        // Entries at angles whose cosines with q are 0.15, 0.5 and 0.9.
        let mut store = MemoryStore::new(2);
        let q = unit(&[1.0, 0.0]);
        for (i, c) in [0.15f64, 0.5, 0.9].iter().enumerate() {
            let s = (1.0 - c * c).sqrt();
            let e = with_embedding(
                entry(&format!("e{i}"), &format!("t{i}"), EntryFlag::SolvedAlone, i as u64),
                unit(&[*c, s]),
            );
            store.insert(e).unwrap();
        }
        let hit = store.query(&q, 0.2, None).unwrap();
        assert_eq!(hit.entry.id, "e2");
        assert!((hit.score - 0.9).abs() < 1e-12);
        assert!(store.query(&q, 0.95, None).is_none());
        // Flag filter excludes everything.
        assert!(store.query(&q, 0.2, Some(&[EntryFlag::SolvedWithGuide])).is_none());
    }

    #[test]
    fn ties_go_to_most_recent() {
        let mut store = MemoryStore::new(2);
        let q = unit(&[0.6, 0.8]);
        for (i, text) in ["older", "newer"].iter().enumerate() {
            store
                .insert(with_embedding(
                    entry(text, text, EntryFlag::SolvedAlone, i as u64 * 3),
                    q.clone(),
                ))
                .unwrap();
        }
        for _ in 0..10 {
            assert_eq!(store.query(&q, 0.2, None).unwrap().entry.id, "newer");
        }
    }

    #[test]
    fn mark_requires_strong_and_back() {
        let mut store = MemoryStore::new(16);
        store.insert(entry("a", "one", EntryFlag::SolvedAlone, 3)).unwrap();
        let e = store.mark_requires_strong("a", 10).unwrap();
        assert_eq!(e.flag, EntryFlag::RequiresStrong);
        assert_eq!(e.retry_at_seq, Some(10));
        assert!(store.find("one", EntryFlag::RequiresStrong).is_some());
        assert!(store.find("one", EntryFlag::SolvedAlone).is_none());

        assert!(matches!(
            store.mark_requires_strong("a", 3),
            Err(MemoryError::InvariantViolation(_))
        ));
        // Failed update leaves the entry untouched.
        assert_eq!(store.get("a").unwrap().retry_at_seq, Some(10));
        assert!(matches!(
            store.mark_requires_strong("zz", 10),
            Err(MemoryError::UnknownId(_))
        ));

        let e = store.mark_solved("a", Some("guide".into())).unwrap();
        assert_eq!(e.flag, EntryFlag::SolvedWithGuide);
        assert_eq!(e.retry_at_seq, None);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn round_trip_empty_and_populated() {
        let empty = MemoryStore::new(16);
        assert!(empty.to_bytes().is_empty());
        assert_eq!(MemoryStore::read_from(16, &empty.to_bytes()[..]).unwrap(), empty);

        let mut store = MemoryStore::new(16);
        store
            .insert(entry("a", "alpha beta", EntryFlag::SolvedAlone, 0))
            .unwrap();
        store
            .insert(entry("b", "gamma delta", EntryFlag::SolvedWithGuide, 1))
            .unwrap();
        store
            .insert(entry("c", "epsilon", EntryFlag::RequiresStrong, 2))
            .unwrap();
        let back = MemoryStore::read_from(16, &store.to_bytes()[..]).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn round_trip_is_bit_exact_at_full_dim() {
        let mut store = MemoryStore::new(384);
        for i in 0..200u64 {
            let text = format!("question {i} about breach remedies and warranty clause {}", i * 7919);
            let mut e = entry(&format!("m{i}"), &text, EntryFlag::SolvedAlone, i);
            e.embedding = feature_hash(&text, 384).unwrap();
            store.insert(e).unwrap();
        }
        let bytes = store.to_bytes();
        let back = MemoryStore::read_from(384, &bytes[..]).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in store.entries().iter().zip(back.entries()) {
            let bits = |e: &MemoryEntry| e.embedding.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let mut store = MemoryStore::new(16);
        store.insert(entry("a", "alpha", EntryFlag::SolvedAlone, 0)).unwrap();
        store.insert(entry("b", "beta", EntryFlag::SolvedAlone, 1)).unwrap();
        let text = String::from_utf8(store.to_bytes()).unwrap();
        let cut = text.len() - 20;
        match MemoryStore::read_from(16, &text.as_bytes()[..cut]) {
            Err(MemoryError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn load_checks_guide_invariant() {
        let mut e = entry("a", "alpha", EntryFlag::SolvedAlone, 0);
        e.flag = EntryFlag::SolvedWithGuide;
        let line = serde_json::to_string(&e).unwrap();
        assert!(matches!(
            MemoryStore::read_from(16, line.as_bytes()),
            Err(MemoryError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn fresh_ids_skip_used() {
        let mut store = MemoryStore::new(16);
        store.insert(entry("mem-1", "x", EntryFlag::SolvedAlone, 0)).unwrap();
        assert_eq!(store.fresh_id(), "mem-2");
    }
}
