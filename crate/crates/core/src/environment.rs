//! Synthetic tool-use POMDP.
//!
//! Each task family hides a protocol, an ordered run of atomic tools. Running
//! the protocol contiguously yields a decisive evidence token that carries the
//! case label; answers given without that token verify only by luck.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryEntry;
use crate::reward;
use crate::seeding;
use crate::tooling::{ActionKind, ActionSpace, ToolSpec, DEFAULT_MAX_COMPOSITE_LEN};

pub const DEFAULT_H_MAX: usize = 10;
pub const DEFAULT_P_GUESS: f64 = 0.05;
pub const DEFAULT_DISTRACTORS: usize = 6;
pub const DEFAULT_SIGMA_FEAT: f64 = 0.3;
pub const DEFAULT_DIM: usize = 16;
pub const NORMAL_LABEL: &str = "normal";

/// The exemplar workflow, always used as family 0.
pub const GLAUCOMA_PROTOCOL: [&str; 4] = [
    "convert_color_space",
    "segment_optic_cup",
    "segment_optic_disc",
    "compute_cdr",
];

// (id, arity, emits)
const DOMAIN_TOOLS: [(&str, u32, &str); 16] = [
    ("convert_color_space", 1, "image"),
    ("segment_optic_cup", 1, "mask"),
    ("segment_optic_disc", 1, "mask"),
    ("compute_cdr", 2, "scalar"),
    ("segment_left_ventricle", 1, "mask"),
    ("track_myocardium", 1, "motion"),
    ("estimate_ejection_fraction", 2, "scalar"),
    ("segment_joint_space", 1, "mask"),
    ("measure_joint_width", 1, "scalar"),
    ("detect_erosion", 1, "mask"),
    ("score_synovitis", 2, "scalar"),
    ("canny_edge", 1, "edges"),
    ("detect_lesion", 1, "mask"),
    ("measure_lesion_area", 1, "scalar"),
    ("register_frames", 2, "image"),
    ("estimate_vessel_width", 1, "scalar"),
];

const DISTRACTOR_TOOLS: [&str; 8] = [
    "gaussian_blur",
    "histogram_equalize",
    "resize_image",
    "rotate_image",
    "crop_center",
    "invert_intensity",
    "sharpen_image",
    "normalize_intensity",
];

const DISEASE_LABELS: [&str; 8] = [
    "glaucoma",
    "cardiomyopathy",
    "arthritis",
    "lesion",
    "retinopathy",
    "stenosis",
    "fracture",
    "effusion",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub families: usize,
    pub cases: usize,
    pub dim: usize,
    pub distractors: usize,
    pub sigma_feat: f64,
    /// Offset of the label direction added to case features.
    pub label_margin: f64,
    pub heldout_fraction: f64,
    pub max_protocol_len: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            families: 4,
            cases: 500,
            dim: DEFAULT_DIM,
            distractors: DEFAULT_DISTRACTORS,
            sigma_feat: DEFAULT_SIGMA_FEAT,
            label_margin: 0.6,
            heldout_fraction: 0.2,
            max_protocol_len: DEFAULT_MAX_COMPOSITE_LEN,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families == 0 {
            return Err(Error::Config("families must be >= 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("feature dim must be >= 2".into()));
        }
        if !(self.sigma_feat >= 0.0 && self.sigma_feat.is_finite()) {
            return Err(Error::Config("sigma_feat must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must be in [0, 1)".into()));
        }
        if self.max_protocol_len < 2 {
            return Err(Error::Config("max_protocol_len must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub threshold: f64,
    pub below: String,
    pub above: String,
}

impl LabelMap {
    pub fn label(&self, hidden: f64) -> &str {
        if hidden >= self.threshold {
            &self.above
        } else {
            &self.below
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub family_id: usize,
    pub protocol: Vec<String>,
    pub label_map: LabelMap,
    pub feature_center: Vec<f64>,
    pub label_axis: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseInput {
    pub case_id: usize,
    pub family: usize,
    pub features: Vec<f64>,
    pub hidden_param: f64,
    pub truth: String,
    pub heldout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub tools: Vec<ToolSpec>,
    pub labels: Vec<String>,
    pub families: Vec<TaskFamily>,
    pub cases: Vec<CaseInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" | "test" => Ok(Split::Heldout),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl TaskSuite {
    /// Action space with every atomic tool and answer label, no composites.
    pub fn action_space(&self, max_composite_len: usize) -> Result<ActionSpace> {
        let mut space = ActionSpace::new(max_composite_len);
        for t in &self.tools {
            space.register_atomic(t.clone())?;
        }
        for l in &self.labels {
            space.register_answer(l)?;
        }
        Ok(space)
    }

    /// Protocols as atomic indices of `space`.
    pub fn protocol_atoms(&self, space: &ActionSpace) -> Result<Vec<Vec<usize>>> {
        self.families
            .iter()
            .map(|f| {
                f.protocol
                    .iter()
                    .map(|t| space.atomic_index(t).ok_or_else(|| Error::UnknownTool(t.clone())))
                    .collect()
            })
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&CaseInput> {
        self.cases
            .iter()
            .filter(|c| match split {
                Split::Train => !c.heldout,
                Split::Heldout => c.heldout,
                Split::All => true,
            })
            .collect()
    }

    pub fn case(&self, case_id: usize) -> Result<&CaseInput> {
        self.cases
            .iter()
            .find(|c| c.case_id == case_id)
            .ok_or_else(|| Error::Config(format!("no case {case_id}")))
    }
}

fn unit_gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Label axes orthogonal to every center and to each other while the
/// dimension allows it; plain random unit vectors after that.
fn label_axes(rng: &mut impl Rng, centers: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let push = |basis: &mut Vec<Vec<f64>>, v: &[f64]| -> Option<Vec<f64>> {
        let mut r = v.to_vec();
        for b in basis.iter() {
            let p = dot(&r, b);
            r.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&r);
        (n > 1e-6).then(|| {
            r.iter_mut().for_each(|x| *x /= n);
            basis.push(r.clone());
            r
        })
    };
    for c in centers {
        push(&mut basis, c);
    }
    centers
        .iter()
        .map(|_| {
            let v = unit_gaussian(rng, d);
            push(&mut basis, &v).unwrap_or(v)
        })
        .collect()
}

/// Builds a task suite. Deterministic in `cfg`; case features come from
/// per-case RNG streams.
pub fn generate_tasks(cfg: &SuiteConfig) -> Result<TaskSuite> {
    cfg.validate()?;
    let n = cfg.families;
    let max_len = cfg.max_protocol_len;
    let available = DOMAIN_TOOLS.len();
    let needed = GLAUCOMA_PROTOCOL.len() + 2 * (n - 1);
    if needed > available || n > DISEASE_LABELS.len() {
        return Err(Error::NotEnoughTools {
            families: n,
            available,
        });
    }
    let mut rng = seeding::stream(cfg.seed, &[seeding::TAG_TASKS]);

    let mut pool: Vec<&str> = DOMAIN_TOOLS[GLAUCOMA_PROTOCOL.len()..]
        .iter()
        .map(|t| t.0)
        .collect();
    pool.shuffle(&mut rng);
    let mut protocols: Vec<Vec<String>> = vec![GLAUCOMA_PROTOCOL
        .iter()
        .map(|s| s.to_string())
        .collect()];
    for f in 1..n {
        let reserve = 2 * (n - 1 - f);
        let hi = max_len.min(pool.len() - reserve).max(2);
        let len = rng.random_range(2..=hi);
        protocols.push(pool.drain(..len).map(str::to_string).collect());
    }

    let centers: Vec<Vec<f64>> = (0..n).map(|_| unit_gaussian(&mut rng, cfg.dim)).collect();
    let axes = label_axes(&mut rng, &centers, cfg.dim);

    let mut tools: Vec<ToolSpec> = DOMAIN_TOOLS
        .iter()
        .filter(|(id, ..)| protocols.iter().any(|p| p.iter().any(|t| t == id)))
        .map(|&(id, arity, emits)| ToolSpec::new(id, arity, emits))
        .collect();
    for k in 0..cfg.distractors {
        let id = DISTRACTOR_TOOLS
            .get(k)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("aux_tool_{k}"));
        tools.push(ToolSpec::new(id, 1, "image"));
    }

    let mut labels = vec![NORMAL_LABEL.to_string()];
    labels.extend(DISEASE_LABELS[..n].iter().map(|s| s.to_string()));

    let families: Vec<TaskFamily> = (0..n)
        .map(|f| TaskFamily {
            family_id: f,
            protocol: protocols[f].clone(),
            label_map: LabelMap {
                threshold: 0.5,
                below: NORMAL_LABEL.to_string(),
                above: DISEASE_LABELS[f].to_string(),
            },
            feature_center: centers[f].clone(),
            label_axis: axes[f].clone(),
        })
        .collect();

    let mut cases: Vec<CaseInput> = (0..cfg.cases)
        .map(|i| {
            let fam = &families[i % n];
            let mut crng = seeding::stream(cfg.seed, &[seeding::TAG_CASE, i as u64]);
            let hidden: f64 = crng.random();
            let sign = if hidden >= fam.label_map.threshold { 1.0 } else { -1.0 };
            let features = fam
                .feature_center
                .iter()
                .zip(&fam.label_axis)
                .map(|(c, a)| {
                    let z: f64 = StandardNormal.sample(&mut crng);
                    c + sign * cfg.label_margin * a + cfg.sigma_feat * z
                })
                .collect();
            CaseInput {
                case_id: i,
                family: fam.family_id,
                features,
                hidden_param: hidden,
                truth: fam.label_map.label(hidden).to_string(),
                heldout: false,
            }
        })
        .collect();

    let mut srng = seeding::stream(cfg.seed, &[seeding::TAG_SPLIT]);
    for f in 0..n {
        let mut ids: Vec<usize> = cases.iter().filter(|c| c.family == f).map(|c| c.case_id).collect();
        ids.shuffle(&mut srng);
        let hold = (ids.len() as f64 * cfg.heldout_fraction).round() as usize;
        for &id in &ids[..hold] {
            cases[id].heldout = true;
        }
    }

    Ok(TaskSuite {
        config: cfg.clone(),
        tools,
        labels,
        families,
        cases,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub h_max: usize,
    pub p_guess: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            h_max: DEFAULT_H_MAX,
            p_guess: DEFAULT_P_GUESS,
        }
    }
}

/// One executed atomic tool. `decisive` marks the step that completed the
/// protocol; its result token is `decisive:<truth>` instead of `ok:<tool>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvidenceEntry {
    pub tool: usize,
    pub decisive: bool,
}

pub fn result_token(space: &ActionSpace, case: &CaseInput, e: &EvidenceEntry) -> String {
    if e.decisive {
        format!("decisive:{}", case.truth)
    } else {
        format!("ok:{}", space.atomic_id(e.tool))
    }
}

/// What the agent sees before a decision.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub case: &'a CaseInput,
    pub history: &'a [usize],
    pub evidence: &'a [EvidenceEntry],
    pub retrieved: &'a [&'a MemoryEntry],
}

impl Observation<'_> {
    pub fn has_decisive(&self) -> bool {
        self.evidence.iter().any(|e| e.decisive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Answered { label: usize, success: bool },
    Truncated,
}

impl Outcome {
    pub fn success(&self) -> bool {
        matches!(self, Outcome::Answered { success: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub expanded: Vec<usize>,
    /// Index into the evidence list of the first entry this step produced.
    pub evidence_start: usize,
    pub outcome: Option<Outcome>,
}

/// `answer == truth` with decisive evidence; a seeded coin of weight
/// `p_guess` when the evidence is not decisive.
pub fn answer_correct(
    decisive: bool,
    answer: &str,
    truth: &str,
    p_guess: f64,
    rng: &mut impl Rng,
) -> bool {
    if answer != truth {
        return false;
    }
    decisive || rng.random::<f64>() < p_guess
}

/// Live episode for one case.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    space: &'a ActionSpace,
    case: &'a CaseInput,
    protocol: &'a [usize],
    cfg: EnvConfig,
    history: Vec<usize>,
    evidence: Vec<EvidenceEntry>,
    outcome: Option<Outcome>,
}

impl<'a> Episode<'a> {
    pub fn new(
        space: &'a ActionSpace,
        case: &'a CaseInput,
        protocol: &'a [usize],
        cfg: EnvConfig,
    ) -> Self {
        Self {
            space,
            case,
            protocol,
            cfg,
            history: Vec::new(),
            evidence: Vec::new(),
            outcome: None,
        }
    }

    pub fn case(&self) -> &'a CaseInput {
        self.case
    }

    pub fn history(&self) -> &[usize] {
        &self.history
    }

    pub fn evidence(&self) -> &[EvidenceEntry] {
        &self.evidence
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn is_terminal(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn has_decisive(&self) -> bool {
        self.evidence.iter().any(|e| e.decisive)
    }

    pub fn observation<'s>(&'s self, retrieved: &'s [&'s MemoryEntry]) -> Observation<'s> {
        Observation {
            case: self.case,
            history: &self.history,
            evidence: &self.evidence,
            retrieved,
        }
    }

    fn completes_protocol(&self) -> bool {
        let p = self.protocol;
        let n = self.evidence.len();
        n >= p.len()
            && self.evidence[n - p.len()..]
                .iter()
                .zip(p)
                .all(|(e, &t)| e.tool == t)
    }

    pub fn step(&mut self, action: usize, rng: &mut impl Rng) -> Result<Transition> {
        if self.outcome.is_some() {
            return Err(Error::EpisodeTerminated);
        }
        let kind = self.space.kind(action)?;
        self.history.push(action);
        let evidence_start = self.evidence.len();
        let mut expanded = Vec::new();
        match kind {
            ActionKind::Answer(label) => {
                let success = answer_correct(
                    self.has_decisive(),
                    &self.space.labels()[label],
                    &self.case.truth,
                    self.cfg.p_guess,
                    rng,
                );
                self.outcome = Some(Outcome::Answered { label, success });
            }
            ActionKind::Atomic(_) | ActionKind::Composite(_) => {
                expanded = self.space.expand_index(action)?.to_vec();
                for &tool in &expanded {
                    self.evidence.push(EvidenceEntry {
                        tool,
                        decisive: false,
                    });
                    if self.completes_protocol() {
                        self.evidence.last_mut().expect("just pushed").decisive = true;
                    }
                }
                if self.history.len() >= self.cfg.h_max {
                    self.outcome = Some(Outcome::Truncated);
                }
            }
        }
        Ok(Transition {
            expanded,
            evidence_start,
            outcome: self.outcome,
        })
    }
}

/// Length of the longest suffix of the evidence tool stream that is a proper
/// prefix of `protocol`.
pub fn protocol_progress(evidence: &[EvidenceEntry], protocol: &[usize]) -> usize {
    let n = evidence.len();
    (1..protocol.len().min(n + 1))
        .rev()
        .find(|&k| {
            evidence[n - k..]
                .iter()
                .zip(protocol)
                .all(|(e, &t)| e.tool == t)
        })
        .unwrap_or(0)
}

/// Scripted oracle: the next protocol tool, or the true answer once decisive
/// evidence is present.
pub fn teacher_act(
    space: &ActionSpace,
    case: &CaseInput,
    protocol: &[usize],
    evidence: &[EvidenceEntry],
) -> Result<usize> {
    if evidence.iter().any(|e| e.decisive) {
        return space.answer_action(&case.truth);
    }
    let k = protocol_progress(evidence, protocol);
    Ok(space.action_of_atomic(protocol[k]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: String,
    pub expanded: Vec<String>,
    pub results: Vec<String>,
    pub reward: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub case_id: usize,
    /// Global training-episode index; absent for evaluation episodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<u64>,
    pub steps: Vec<StepRecord>,
    pub answer: Option<String>,
    pub truth: String,
    pub success: bool,
}

impl Trajectory {
    /// Expanded atomic ids of all tool steps, in execution order.
    pub fn tool_stream(&self) -> Vec<&str> {
        self.steps
            .iter()
            .flat_map(|s| s.expanded.iter().map(String::as_str))
            .collect()
    }

    pub fn trajectory_reward(&self) -> u8 {
        self.steps.iter().map(|s| s.reward).max().unwrap_or(0)
    }
}

/// Converts a finished episode into its log record. Rewards are scored
/// against `space`, the registry snapshot of the episode.
pub fn record_episode(episode: &Episode<'_>, space: &ActionSpace) -> Trajectory {
    let case = episode.case();
    let mut steps = Vec::with_capacity(episode.history().len());
    let mut cursor = 0;
    let mut answer = None;
    for &action in episode.history() {
        let id = space.action_id(action).to_string();
        let (expanded, results) = match space.expand_index(action) {
            Ok(atoms) => {
                let ev = &episode.evidence()[cursor..cursor + atoms.len()];
                cursor += atoms.len();
                (
                    atoms.iter().map(|&a| space.atomic_id(a).to_string()).collect(),
                    ev.iter().map(|e| result_token(space, case, e)).collect(),
                )
            }
            Err(_) => {
                if let Ok(ActionKind::Answer(l)) = space.kind(action) {
                    answer = Some(space.labels()[l].clone());
                }
                (Vec::new(), Vec::new())
            }
        };
        let reward = reward::step_reward_index(
            space.expand_index(action).unwrap_or(&[]),
            space.composite_sequences(),
        )
        .value;
        steps.push(StepRecord {
            action: id,
            expanded,
            results,
            reward,
        });
    }
    Trajectory {
        case_id: case.case_id,
        episode: None,
        steps,
        answer,
        truth: case.truth.clone(),
        success: episode.outcome().is_some_and(|o| o.success()),
    }
}

/// One teacher-driven trajectory per case.
pub fn bootstrap_demos(
    suite: &TaskSuite,
    cases: &[&CaseInput],
    space: &ActionSpace,
    cfg: EnvConfig,
) -> Result<Vec<Trajectory>> {
    let protocols = suite.protocol_atoms(space)?;
    cases
        .iter()
        .map(|case| {
            let protocol = &protocols[case.family];
            let mut rng =
                seeding::stream(suite.config.seed, &[seeding::TAG_DEMO, case.case_id as u64]);
            let mut ep = Episode::new(space, case, protocol, cfg);
            while !ep.is_terminal() {
                let a = teacher_act(space, case, protocol, ep.evidence())?;
                ep.step(a, &mut rng)?;
            }
            Ok(record_episode(&ep, space))
        })
        .collect()
}
