//! Frequent contiguous-window mining over successful trajectories.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::environment::Trajectory;
use crate::error::{Error, Result};
use crate::tooling::{ActionSpace, Registration, DEFAULT_MAX_COMPOSITE_LEN, MIN_COMPOSITE_LEN};

pub const DEFAULT_TAU: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub tau: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Register only windows not contained in a longer qualifying window.
    pub maximal_only: bool,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            min_len: MIN_COMPOSITE_LEN,
            max_len: DEFAULT_MAX_COMPOSITE_LEN,
            maximal_only: false,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if self.min_len < MIN_COMPOSITE_LEN || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need {MIN_COMPOSITE_LEN} <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Support counts: number of trajectories containing each window.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<Vec<String>, u64>,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    sequence: Vec<String>,
    count: u64,
}

impl Serialize for FrequencyTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.counts.iter().map(|(k, &v)| TableRow {
            sequence: k.clone(),
            count: v,
        }))
    }
}

impl<'de> Deserialize<'de> for FrequencyTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<TableRow> = Vec::deserialize(d)?;
        Ok(Self {
            counts: rows.into_iter().map(|r| (r.sequence, r.count)).collect(),
        })
    }
}

impl FrequencyTable {
    pub fn get<S: AsRef<str>>(&self, window: &[S]) -> u64 {
        let key: Vec<String> = window.iter().map(|s| s.as_ref().to_string()).collect();
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[String], u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    /// Adds one sequence: each distinct window counts once.
    pub fn add_sequence<S: AsRef<str>>(&mut self, seq: &[S], cfg: &MinerConfig) {
        let seq: Vec<&str> = seq.iter().map(AsRef::as_ref).collect();
        let mut seen: BTreeSet<&[&str]> = BTreeSet::new();
        for len in cfg.min_len..=cfg.max_len.min(seq.len()) {
            for w in seq.windows(len) {
                if seen.insert(w) {
                    let key: Vec<String> = w.iter().map(|s| s.to_string()).collect();
                    *self.counts.entry(key).or_insert(0) += 1;
                }
            }
        }
    }
}

/// Expanded atomic tool stream of a successful trajectory.
pub fn extract_sequence(t: &Trajectory) -> Result<Vec<&str>> {
    if !t.success {
        return Err(Error::UnsuccessfulTrajectory(t.case_id));
    }
    Ok(t.tool_stream())
}

pub fn count_windows<S: AsRef<str>>(sequences: &[Vec<S>], cfg: &MinerConfig) -> FrequencyTable {
    let mut table = FrequencyTable::default();
    for s in sequences {
        let v: Vec<&str> = s.iter().map(AsRef::as_ref).collect();
        table.add_sequence(&v, cfg);
    }
    table
}

fn is_subwindow(small: &[String], big: &[String]) -> bool {
    small.len() < big.len() && big.windows(small.len()).any(|w| w == small)
}

/// Windows with support strictly above tau, in table order.
pub fn qualifying(table: &FrequencyTable, cfg: &MinerConfig) -> Vec<(Vec<String>, u64)> {
    let q: Vec<(Vec<String>, u64)> = table
        .counts
        .iter()
        .filter(|(_, &c)| c > cfg.tau)
        .map(|(k, &c)| (k.clone(), c))
        .collect();
    if !cfg.maximal_only {
        return q;
    }
    q.iter()
        .filter(|(k, _)| !q.iter().any(|(o, _)| is_subwindow(k, o)))
        .cloned()
        .collect()
}

/// Registers every qualifying window; returns the ids of newly added
/// composites. Registered windows get their frequency refreshed.
pub fn promote(
    table: &FrequencyTable,
    cfg: &MinerConfig,
    space: &mut ActionSpace,
    episode: u64,
) -> Result<Vec<String>> {
    let mut added = Vec::new();
    for (seq, count) in qualifying(table, cfg) {
        if let Registration::Added(idx) = space.register_composite(&seq, count, episode)? {
            added.push(space.action_id(idx).to_string());
        }
    }
    Ok(added)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningReport {
    pub episode: u64,
    pub new_composites: Vec<String>,
    pub registry_size: usize,
}

/// Feeds the successful trajectories of a batch into the running table and
/// promotes.
pub fn mine_and_register(
    batch: &[Trajectory],
    cfg: &MinerConfig,
    space: &mut ActionSpace,
    table: &mut FrequencyTable,
    episode: u64,
) -> Result<MiningReport> {
    for t in batch.iter().filter(|t| t.success) {
        table.add_sequence(&extract_sequence(t)?, cfg);
    }
    let new_composites = promote(table, cfg, space, episode)?;
    Ok(MiningReport {
        episode,
        new_composites,
        registry_size: space.composites().len(),
    })
}
