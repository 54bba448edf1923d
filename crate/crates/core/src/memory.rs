//! Experience memory: step-level entries from successful trajectories and
//! exact cosine top-k retrieval over case features.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::environment::Trajectory;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 3;

/// History and evidence visible when the entry's step was taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub history: Vec<String>,
    pub evidence: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub p: PromptContext,
    pub t: Vec<String>,
    pub r: String,
    pub f: Vec<f64>,
    pub source_case: usize,
    pub source_step: usize,
}

impl MemoryEntry {
    fn key(&self) -> (usize, usize) {
        (self.source_case, self.source_step)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(cos_with_norms(a, na, b, nb))
}

fn cos_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (na * nb)
}

#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    entries: Vec<MemoryEntry>,
    norms: Vec<f64>,
    dim: Option<usize>,
    next_step: HashMap<usize, usize>,
}

/// A scored candidate: (similarity, entry index). Orders best first.
#[derive(Debug, Clone, Copy)]
struct Scored {
    sim: f64,
    idx: usize,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
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

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        let n = norm(&entry.f);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        if entry.t.is_empty() {
            return Err(Error::Schema("memory entry with empty tool sequence".into()));
        }
        match self.dim {
            Some(d) if d != entry.f.len() => {
                return Err(Error::DimMismatch {
                    expected: d,
                    actual: entry.f.len(),
                })
            }
            _ => self.dim = Some(entry.f.len()),
        }
        let next = self.next_step.entry(entry.source_case).or_insert(0);
        *next = (*next).max(entry.source_step + 1);
        self.norms.push(n);
        self.entries.push(entry);
        Ok(())
    }

    fn better(&self, a: Scored, b: Scored) -> Ordering {
        b.sim
            .total_cmp(&a.sim)
            .then_with(|| self.entries[a.idx].key().cmp(&self.entries[b.idx].key()))
            .then_with(|| a.idx.cmp(&b.idx))
    }

    fn check_query(&self, query: &[f64]) -> Result<f64> {
        if let Some(d) = self.dim {
            if d != query.len() {
                return Err(Error::DimMismatch {
                    expected: d,
                    actual: query.len(),
                });
            }
        }
        let nq = norm(query);
        if nq == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(nq)
    }

    fn scan(&self, query: &[f64], nq: f64, from: usize) -> impl Iterator<Item = Scored> + '_ {
        let q = query.to_vec();
        (from..self.entries.len()).map(move |idx| Scored {
            sim: cos_with_norms(&q, nq, &self.entries[idx].f, self.norms[idx]),
            idx,
        })
    }

    /// Exact top-k by descending cosine similarity; ties by ascending
    /// (source_case, source_step).
    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<Vec<&MemoryEntry>> {
        Ok(self
            .retrieve_indices(query, k)?
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }

    pub fn retrieve_indices(&self, query: &[f64], k: usize) -> Result<Vec<usize>> {
        let nq = self.check_query(query)?;
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut top: Vec<Scored> = Vec::with_capacity(k + 1);
        for s in self.scan(query, nq, 0) {
            self.insert_top(&mut top, s, k);
        }
        Ok(top.into_iter().map(|s| s.idx).collect())
    }

    fn insert_top(&self, top: &mut Vec<Scored>, s: Scored, k: usize) {
        if top.len() == k && self.better(s, top[k - 1]) != Ordering::Less {
            return;
        }
        let pos = top.partition_point(|t| self.better(*t, s) == Ordering::Less);
        top.insert(pos, s);
        top.truncate(k);
    }

    /// Adds one entry per tool step of a successful trajectory; returns the
    /// number added. Failed trajectories leave the store unchanged.
    pub fn update_on_success(&mut self, traj: &Trajectory, features: &[f64]) -> Result<usize> {
        if !traj.success {
            return Ok(0);
        }
        let mut added = 0;
        let mut ctx = PromptContext {
            history: Vec::new(),
            evidence: Vec::new(),
        };
        for step in &traj.steps {
            if !step.expanded.is_empty() {
                let source_step = self.next_step.get(&traj.case_id).copied().unwrap_or(0);
                self.push(MemoryEntry {
                    p: ctx.clone(),
                    t: step.expanded.clone(),
                    r: step.results.concat(),
                    f: features.to_vec(),
                    source_case: traj.case_id,
                    source_step,
                })?;
                added += 1;
            }
            ctx.history.push(step.action.clone());
            ctx.evidence.extend(
                step.expanded
                    .iter()
                    .cloned()
                    .zip(step.results.iter().cloned()),
            );
        }
        Ok(added)
    }
}

/// Incremental top-k for a fixed query over an append-only store. Scanning
/// only the entries appended since the last refresh gives the same ranking
/// as a full [`MemoryStore::retrieve`].
#[derive(Debug, Clone)]
pub struct TopKCache {
    query: Vec<f64>,
    norm: f64,
    k: usize,
    scanned: usize,
    top: Vec<Scored>,
}

impl TopKCache {
    pub fn new(query: &[f64], k: usize) -> Result<Self> {
        let n = norm(query);
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(Self {
            query: query.to_vec(),
            norm: n,
            k,
            scanned: 0,
            top: Vec::new(),
        })
    }

    pub fn refresh(&mut self, store: &MemoryStore) -> Result<()> {
        if self.scanned > store.len() {
            return Err(Error::Schema("memory store shrank".into()));
        }
        if self.k == 0 {
            self.scanned = store.len();
            return Ok(());
        }
        store.check_query(&self.query)?;
        let from = self.scanned;
        for s in store.scan(&self.query, self.norm, from) {
            store.insert_top(&mut self.top, s, self.k);
        }
        self.scanned = store.len();
        Ok(())
    }

    pub fn indices(&self) -> Vec<usize> {
        self.top.iter().map(|s| s.idx).collect()
    }

    pub fn entries<'s>(&self, store: &'s MemoryStore) -> Vec<&'s MemoryEntry> {
        self.top.iter().map(|s| &store.entries[s.idx]).collect()
    }
}
