//! Atomic tools, composite tools and the growing action space.
//!
//! Actions are indexed in registration order and the index of an action never
//! changes: atomic tools and answer labels are registered up front, composites
//! are appended as the miner promotes them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COMPOSITE_PREFIX: &str = "seq:";
pub const ANSWER_PREFIX: &str = "answer:";
pub const SEPARATOR: char = '/';
pub const DEFAULT_MAX_COMPOSITE_LEN: usize = 4;
pub const MIN_COMPOSITE_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: String,
    /// Number of evidence slots the tool consumes.
    pub arity: u32,
    /// Evidence token class the tool produces.
    pub emits: String,
}

impl ToolSpec {
    pub fn new(id: impl Into<String>, arity: u32, emits: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            arity,
            emits: emits.into(),
        }
    }
}

/// An ordered run of atomic tools promoted to a single action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "CompositeRecord", into = "CompositeRecord")]
pub struct CompositeTool {
    pub id: String,
    pub sequence: Vec<String>,
    pub frequency: u64,
    pub registered_at: u64,
}

#[derive(Serialize, Deserialize)]
struct CompositeRecord {
    sequence: Vec<String>,
    frequency: u64,
    registered_at: u64,
}

impl From<CompositeRecord> for CompositeTool {
    fn from(r: CompositeRecord) -> Self {
        Self {
            id: composite_id(&r.sequence),
            sequence: r.sequence,
            frequency: r.frequency,
            registered_at: r.registered_at,
        }
    }
}

impl From<CompositeTool> for CompositeRecord {
    fn from(c: CompositeTool) -> Self {
        Self {
            sequence: c.sequence,
            frequency: c.frequency,
            registered_at: c.registered_at,
        }
    }
}

/// `seq:` followed by the constituent ids joined with `/`.
pub fn composite_id<S: AsRef<str>>(sequence: &[S]) -> String {
    let mut id = String::from(COMPOSITE_PREFIX);
    for (i, s) in sequence.iter().enumerate() {
        if i > 0 {
            id.push(SEPARATOR);
        }
        id.push_str(s.as_ref());
    }
    id
}

pub fn answer_id(label: &str) -> String {
    format!("{ANSWER_PREFIX}{label}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Atomic(usize),
    Answer(usize),
    Composite(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Registration {
    Added(usize),
    Refreshed(usize),
}

#[derive(Debug, Clone)]
pub struct ActionSpace {
    atomic: Vec<ToolSpec>,
    labels: Vec<String>,
    composites: Vec<CompositeTool>,
    composite_atoms: Vec<Vec<usize>>,
    actions: Vec<ActionKind>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    atomic_index: HashMap<String, usize>,
    max_composite_len: usize,
    atomic_action: Vec<usize>,
    // identity[a] == a, lets atomic expansion hand out a slice
    identity: Vec<usize>,
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_COMPOSITE_LEN)
    }
}

impl ActionSpace {
    pub fn new(max_composite_len: usize) -> Self {
        Self {
            atomic: Vec::new(),
            labels: Vec::new(),
            composites: Vec::new(),
            composite_atoms: Vec::new(),
            actions: Vec::new(),
            ids: Vec::new(),
            index: HashMap::new(),
            atomic_index: HashMap::new(),
            max_composite_len: max_composite_len.max(MIN_COMPOSITE_LEN),
            atomic_action: Vec::new(),
            identity: Vec::new(),
        }
    }

    fn push_action(&mut self, id: String, kind: ActionKind) -> usize {
        let idx = self.actions.len();
        self.index.insert(id.clone(), idx);
        self.ids.push(id);
        self.actions.push(kind);
        idx
    }

    /// Adds an atomic tool and returns its action index.
    pub fn register_atomic(&mut self, spec: ToolSpec) -> Result<usize> {
        if spec.id.is_empty()
            || spec.id.contains(SEPARATOR)
            || spec.id.starts_with(COMPOSITE_PREFIX)
            || spec.id.starts_with(ANSWER_PREFIX)
        {
            return Err(Error::InvalidToolId(spec.id));
        }
        if self.index.contains_key(&spec.id) {
            return Err(Error::DuplicateTool(spec.id));
        }
        let atomic_idx = self.atomic.len();
        self.atomic_index.insert(spec.id.clone(), atomic_idx);
        let idx = self.push_action(spec.id.clone(), ActionKind::Atomic(atomic_idx));
        self.atomic_action.push(idx);
        self.identity.push(atomic_idx);
        self.atomic.push(spec);
        Ok(idx)
    }

    pub fn register_answer(&mut self, label: &str) -> Result<usize> {
        let id = answer_id(label);
        if label.is_empty() {
            return Err(Error::InvalidToolId(id));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateTool(id));
        }
        let label_idx = self.labels.len();
        self.labels.push(label.to_string());
        Ok(self.push_action(id, ActionKind::Answer(label_idx)))
    }

    /// Registers `sequence` as a composite action, or refreshes the frequency
    /// of an already registered equal sequence (max of old and new).
    pub fn register_composite<S: AsRef<str>>(
        &mut self,
        sequence: &[S],
        frequency: u64,
        episode: u64,
    ) -> Result<Registration> {
        let len = sequence.len();
        if !(MIN_COMPOSITE_LEN..=self.max_composite_len).contains(&len) {
            return Err(Error::CompositeLength {
                len,
                min: MIN_COMPOSITE_LEN,
                max: self.max_composite_len,
            });
        }
        let atoms = sequence
            .iter()
            .map(|s| {
                self.atomic_index
                    .get(s.as_ref())
                    .copied()
                    .ok_or_else(|| Error::UnknownTool(s.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let id = composite_id(sequence);
        if let Some(&idx) = self.index.get(&id) {
            let ActionKind::Composite(c) = self.actions[idx] else {
                unreachable!("composite ids are namespaced");
            };
            let existing = &mut self.composites[c];
            existing.frequency = existing.frequency.max(frequency);
            return Ok(Registration::Refreshed(idx));
        }
        let c = self.composites.len();
        self.composites.push(CompositeTool {
            id: id.clone(),
            sequence: sequence.iter().map(|s| s.as_ref().to_string()).collect(),
            frequency,
            registered_at: episode,
        });
        self.composite_atoms.push(atoms);
        Ok(Registration::Added(self.push_action(id, ActionKind::Composite(c))))
    }

    /// Constituent atomic ids of a tool action, in execution order.
    pub fn expand(&self, action: &str) -> Result<Vec<String>> {
        let idx = self.index_of(action)?;
        Ok(self
            .expand_index(idx)?
            .iter()
            .map(|&a| self.atomic[a].id.clone())
            .collect())
    }

    /// Like [`expand`](Self::expand) but over indices; returns atomic-tool indices.
    pub fn expand_index(&self, action: usize) -> Result<&[usize]> {
        match self.kind(action)? {
            ActionKind::Atomic(a) => Ok(std::slice::from_ref(&self.identity[a])),
            ActionKind::Composite(c) => Ok(&self.composite_atoms[c]),
            ActionKind::Answer(_) => Err(Error::NotExpandable(self.ids[action].clone())),
        }
    }

    pub fn kind(&self, action: usize) -> Result<ActionKind> {
        self.actions
            .get(action)
            .copied()
            .ok_or_else(|| Error::UnknownAction(format!("#{action}")))
    }

    pub fn index_of(&self, action: &str) -> Result<usize> {
        self.index
            .get(action)
            .copied()
            .ok_or_else(|| Error::UnknownAction(action.to_string()))
    }

    pub fn atomic_index(&self, tool: &str) -> Option<usize> {
        self.atomic_index.get(tool).copied()
    }

    pub fn action_of_atomic(&self, atomic: usize) -> usize {
        self.atomic_action[atomic]
    }

    pub fn answer_action(&self, label: &str) -> Result<usize> {
        self.index_of(&answer_id(label))
    }

    pub fn action_id(&self, action: usize) -> &str {
        &self.ids[action]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn atomic(&self) -> &[ToolSpec] {
        &self.atomic
    }

    pub fn atomic_id(&self, atomic: usize) -> &str {
        &self.atomic[atomic].id
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn composites(&self) -> &[CompositeTool] {
        &self.composites
    }

    /// Atomic-index sequences of all composites, in registration order.
    pub fn composite_sequences(&self) -> &[Vec<usize>] {
        &self.composite_atoms
    }

    pub fn composite_action(&self, composite: usize) -> usize {
        self.index[&self.composites[composite].id]
    }

    pub fn max_composite_len(&self) -> usize {
        self.max_composite_len
    }

    pub fn contains_composite<S: AsRef<str>>(&self, sequence: &[S]) -> bool {
        self.index.contains_key(&composite_id(sequence))
    }

    pub fn registry(&self) -> Registry {
        Registry {
            atomic: self.atomic.clone(),
            composites: self.composites.clone(),
        }
    }

    /// Rebuilds the action space from a persisted registry plus the answer
    /// labels of the task suite. Index order is atomic, answers, composites.
    pub fn from_registry(
        registry: &Registry,
        labels: &[String],
        max_composite_len: usize,
    ) -> Result<Self> {
        let mut space = Self::new(max_composite_len);
        for spec in &registry.atomic {
            space.register_atomic(spec.clone())?;
        }
        for label in labels {
            space.register_answer(label)?;
        }
        for c in &registry.composites {
            match space.register_composite(&c.sequence, c.frequency, c.registered_at)? {
                Registration::Added(_) => {}
                Registration::Refreshed(_) => {
                    return Err(Error::Schema(format!("duplicate composite {}", c.id)))
                }
            }
        }
        Ok(space)
    }
}

/// Persisted form of the tool registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub atomic: Vec<ToolSpec>,
    pub composites: Vec<CompositeTool>,
}
