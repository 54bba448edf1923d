//! The closed training loop: bootstrap, imitation with student-executed
//! context, reference freeze, group-relative RL, evaluation and persistence.
//!
//! Mutations of memory, miner table, registry and parameters happen only at
//! batch boundaries and in rollout order. Rollouts inside a batch read
//! immutable snapshots, so results do not depend on thread scheduling.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{
    generate_tasks, record_episode, teacher_act, CaseInput, EnvConfig, Episode, Split,
    SuiteConfig, TaskSuite, Trajectory,
};
use crate::error::{Error, Result};
use crate::http::HttpPolicy;
use crate::io;
use crate::memory::{MemoryEntry, MemoryStore, TopKCache, DEFAULT_K};
use crate::miner::{mine_and_register, FrequencyTable, MinerConfig, MiningReport};
use crate::optimizer::{
    apply_gradient, group_advantages, grpo_loss, sft_loss, GrpoConfig, Rollout, SftConfig,
    SftSample, StepSnapshot,
};
use crate::parallel;
use crate::policy::{Featurizer, PolicyParams};
use crate::reward;
use crate::seeding;
use crate::tooling::{ActionSpace, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub memory_on: bool,
    pub composite_on: bool,
    pub grpo_on: bool,
}

impl Ablation {
    pub const A: Ablation = Ablation::new(false, false, false);
    pub const B: Ablation = Ablation::new(true, false, false);
    pub const C: Ablation = Ablation::new(true, true, false);
    pub const D: Ablation = Ablation::new(true, true, true);

    pub const fn new(memory_on: bool, composite_on: bool, grpo_on: bool) -> Self {
        Self {
            memory_on,
            composite_on,
            grpo_on,
        }
    }

    pub fn condition(name: &str) -> Result<Self> {
        match name {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            "D" | "d" => Ok(Self::D),
            other => Err(Error::Config(format!("unknown condition `{other}`"))),
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::D
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Sample,
    Argmax,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "argmax" => Ok(Self::Argmax),
            other => Err(Error::Config(format!("unknown eval mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub k: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Linear,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Linear,
            endpoint: None,
            timeout_ms: 5000,
        }
    }
}

impl PolicyConfig {
    pub fn http_policy(&self) -> Result<Option<HttpPolicy>> {
        match self.kind {
            PolicyKind::Linear => Ok(None),
            PolicyKind::Http => {
                let url = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| Error::Config("policy.kind = \"http\" needs policy.endpoint".into()))?;
                Ok(Some(HttpPolicy::new(url, Duration::from_millis(self.timeout_ms))))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Ablation preset "A".."D"; overrides `ablation` when set.
    pub condition: Option<String>,
    pub suite: SuiteConfig,
    pub env: EnvConfig,
    pub memory: MemoryConfig,
    pub miner: MinerConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub ablation: Ablation,
    /// Episodes per mining pass.
    pub mining_batch: usize,
    pub eval_mode: EvalMode,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            condition: None,
            suite: SuiteConfig::default(),
            env: EnvConfig::default(),
            memory: MemoryConfig::default(),
            miner: MinerConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            ablation: Ablation::default(),
            mining_batch: 16,
            eval_mode: EvalMode::Sample,
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_condition(mut self, name: &str) -> Result<Self> {
        self.ablation = Ablation::condition(name)?;
        self.condition = Some(name.to_uppercase());
        Ok(self)
    }

    /// Applies the condition preset and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(c) = &self.condition {
            self.ablation = Ablation::condition(c)?;
        }
        self.suite.validate()?;
        self.miner.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        if self.suite.max_protocol_len > self.miner.max_len {
            return Err(Error::Config(
                "suite.max_protocol_len must not exceed miner.max_len".into(),
            ));
        }
        if self.mining_batch == 0 {
            return Err(Error::Config("mining_batch must be >= 1".into()));
        }
        if self.env.h_max == 0 {
            return Err(Error::Config("env.h_max must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.env.p_guess) {
            return Err(Error::Config("env.p_guess must be in [0, 1]".into()));
        }
        self.policy.http_policy()?;
        Ok(self)
    }
}

/// How an episode picks actions.
#[derive(Debug, Clone, Copy)]
pub enum Decider<'a> {
    Sample(&'a PolicyParams),
    Argmax(&'a PolicyParams),
    Teacher,
    Http(&'a HttpPolicy),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Collect {
    /// Keep (features, action, log-prob) per decision for the RL loss.
    pub snapshots: bool,
    /// Query the teacher at every visited state for imitation labels.
    pub labels: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeCtx<'a> {
    pub space: &'a ActionSpace,
    pub protocols: &'a [Vec<usize>],
    pub featurizer: Featurizer,
    pub env: EnvConfig,
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub trajectory: Trajectory,
    pub snapshots: Vec<StepSnapshot>,
    pub labels: Vec<SftSample>,
    /// Trajectory-level reward: 1 if any step invoked a registered composite.
    pub reward: f64,
    pub retrievals: usize,
    pub error: Option<String>,
}

/// Runs one episode to termination (answer or step cap).
pub fn run_episode(
    ctx: &EpisodeCtx<'_>,
    case: &CaseInput,
    retrieved: &[&MemoryEntry],
    decider: Decider<'_>,
    rng: &mut impl Rng,
    collect: Collect,
) -> Result<EpisodeRecord> {
    let protocol = &ctx.protocols[case.family];
    let n = ctx.space.len();
    let mut ep = Episode::new(ctx.space, case, protocol, ctx.env);
    let mut snapshots = Vec::new();
    let mut labels = Vec::new();
    let mut error = None;
    let needs_phi = collect.labels
        || collect.snapshots
        || matches!(decider, Decider::Sample(_) | Decider::Argmax(_));
    let mut retrievals = 0;
    while !ep.is_terminal() {
        let obs = ep.observation(retrieved);
        retrievals += retrieved.len();
        let phi = if needs_phi {
            ctx.featurizer.featurize(&obs, ctx.space)?
        } else {
            Vec::new()
        };
        let (action, logp) = match decider {
            Decider::Sample(p) => p.sample(&phi, n, rng)?,
            Decider::Argmax(p) => p.argmax(&phi, n)?,
            Decider::Teacher => (teacher_act(ctx.space, case, protocol, ep.evidence())?, 0.0),
            Decider::Http(h) => match h.decide(&obs, ctx.space, n) {
                Ok(a) => (a, f64::NAN),
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            },
        };
        if collect.labels {
            labels.push(SftSample {
                phi: phi.clone(),
                n_available: n,
                label: teacher_act(ctx.space, case, protocol, ep.evidence())?,
            });
        }
        if collect.snapshots {
            snapshots.push(StepSnapshot {
                phi,
                n_available: n,
                action,
                behavior_logp: logp,
            });
        }
        ep.step(action, rng)?;
    }
    let trajectory = record_episode(&ep, ctx.space);
    let reward = reward::trajectory_reward(&reward::trajectory_outcome(&trajectory).1);
    Ok(EpisodeRecord {
        trajectory,
        snapshots,
        labels,
        reward,
        retrievals,
        error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub composite_usage_rate: f64,
    pub errors: usize,
}

fn summarize(records: &[EpisodeRecord]) -> EvalMetrics {
    let n = records.len().max(1) as f64;
    EvalMetrics {
        episodes: records.len(),
        success_rate: records.iter().filter(|r| r.trajectory.success).count() as f64 / n,
        mean_steps: records.iter().map(|r| r.trajectory.steps.len()).sum::<usize>() as f64 / n,
        composite_usage_rate: records.iter().map(|r| r.reward).sum::<f64>() / n,
        errors: records.iter().filter(|r| r.error.is_some()).count(),
    }
}

/// Frozen inputs for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    pub ctx: EpisodeCtx<'a>,
    pub memory: Option<&'a MemoryStore>,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum EvalPolicy<'a> {
    Params(&'a PolicyParams, EvalMode),
    Teacher,
    Http(&'a HttpPolicy),
}

/// Runs one episode per case against frozen snapshots. Nothing is mutated.
pub fn evaluate(
    inputs: &EvalInputs<'_>,
    cases: &[&CaseInput],
    policy: EvalPolicy<'_>,
) -> Result<(EvalMetrics, Vec<Trajectory>)> {
    let decider = match policy {
        EvalPolicy::Params(p, EvalMode::Sample) => Decider::Sample(p),
        EvalPolicy::Params(p, EvalMode::Argmax) => Decider::Argmax(p),
        EvalPolicy::Teacher => Decider::Teacher,
        EvalPolicy::Http(h) => Decider::Http(h),
    };
    let run = |case: &&CaseInput| -> Result<EpisodeRecord> {
        let retrieved = match inputs.memory {
            Some(m) if inputs.k > 0 && !m.is_empty() => m.retrieve(&case.features, inputs.k)?,
            _ => Vec::new(),
        };
        let mut rng = seeding::stream(inputs.seed, &[seeding::TAG_EVAL, case.case_id as u64]);
        run_episode(&inputs.ctx, case, &retrieved, decider, &mut rng, Collect::default())
    };
    let records: Vec<EpisodeRecord> = if matches!(policy, EvalPolicy::Http(_)) {
        // one request in flight at a time
        cases.iter().map(run).collect::<Result<_>>()?
    } else {
        parallel::map(cases, run).into_iter().collect::<Result<_>>()?
    };
    let metrics = summarize(&records);
    Ok((metrics, records.into_iter().map(|r| r.trajectory).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub kl: f64,
    pub registry_size: usize,
    pub composite_usage_rate: f64,
    pub mean_steps: f64,
    pub stage: String,
    pub memory_size: usize,
    pub retrievals: u64,
    pub grad_steps: u64,
    pub loss: f64,
}

pub const METRICS_HEADER: &str = "iter,mean_reward,success_rate,kl,registry_size,composite_usage_rate,mean_steps,stage,memory_size,retrievals,grad_steps,loss";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.mean_reward,
            r.success_rate,
            r.kl,
            r.registry_size,
            r.composite_usage_rate,
            r.mean_steps,
            r.stage,
            r.memory_size,
            r.retrievals,
            r.grad_steps,
            r.loss
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Schema("unexpected metrics header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 12 {
                return Err(Error::Schema(format!("metrics row has {} fields", f.len())));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].parse().map_err(|_| Error::Schema(format!("bad number `{}`", f[i])))
            };
            let int = |i: usize| -> Result<u64> {
                f[i].parse().map_err(|_| Error::Schema(format!("bad integer `{}`", f[i])))
            };
            Ok(MetricsRow {
                iter: int(0)? as usize,
                mean_reward: num(1)?,
                success_rate: num(2)?,
                kl: num(3)?,
                registry_size: int(4)? as usize,
                composite_usage_rate: num(5)?,
                mean_steps: num(6)?,
                stage: f[7].to_string(),
                memory_size: int(8)? as usize,
                retrievals: int(9)?,
                grad_steps: int(10)?,
                loss: num(11)?,
            })
        })
        .collect()
}

/// A unit of rollout work: case, RNG stream tags, retrieved entry indices.
struct Work {
    case: usize,
    tags: Vec<u64>,
    retrieved: Vec<usize>,
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub suite: TaskSuite,
    pub space: ActionSpace,
    pub protocols: Vec<Vec<usize>>,
    pub featurizer: Featurizer,
    pub params: PolicyParams,
    pub reference: Option<PolicyParams>,
    pub memory: MemoryStore,
    pub table: FrequencyTable,
    caches: Vec<Option<TopKCache>>,
    /// Number of training episodes run so far.
    pub episode: u64,
    pub retrievals: u64,
    pub grad_steps: u64,
    pub metrics: Vec<MetricsRow>,
    pub mining: Vec<MiningReport>,
    pub demos: Vec<Trajectory>,
    pub trajectories: Vec<Trajectory>,
    pub keep_logs: bool,
    train_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Log {
    Demos,
    Training,
}

impl Trainer {
    pub fn new(cfg: RunConfig, keep_logs: bool) -> Result<Self> {
        let cfg = cfg.resolve()?;
        let suite = generate_tasks(&cfg.suite)?;
        let space = suite.action_space(cfg.miner.max_len)?;
        let protocols = suite.protocol_atoms(&space)?;
        let featurizer = Featurizer::for_space(cfg.suite.dim, &space);
        let params = PolicyParams::zeros(space.ids(), featurizer.dim());
        let train_ids = suite.split(Split::Train).iter().map(|c| c.case_id).collect();
        let caches = vec![None; suite.cases.len()];
        Ok(Self {
            cfg,
            suite,
            space,
            protocols,
            featurizer,
            params,
            reference: None,
            memory: MemoryStore::new(),
            table: FrequencyTable::default(),
            caches,
            episode: 0,
            retrievals: 0,
            grad_steps: 0,
            metrics: Vec::new(),
            mining: Vec::new(),
            demos: Vec::new(),
            trajectories: Vec::new(),
            keep_logs,
            train_ids,
        })
    }

    fn ctx(&self) -> EpisodeCtx<'_> {
        EpisodeCtx {
            space: &self.space,
            protocols: &self.protocols,
            featurizer: self.featurizer,
            env: self.cfg.env,
        }
    }

    pub fn eval_inputs(&self) -> EvalInputs<'_> {
        EvalInputs {
            ctx: self.ctx(),
            memory: self.cfg.ablation.memory_on.then_some(&self.memory),
            k: self.cfg.memory.k,
            seed: self.cfg.seed,
        }
    }

    fn retrieved_for(&mut self, case: usize) -> Result<Vec<usize>> {
        if !self.cfg.ablation.memory_on || self.cfg.memory.k == 0 {
            return Ok(Vec::new());
        }
        let k = self.cfg.memory.k;
        let features = &self.suite.cases[case].features;
        let cache = match &mut self.caches[case] {
            Some(c) => c,
            slot => slot.insert(TopKCache::new(features, k)?),
        };
        cache.refresh(&self.memory)?;
        Ok(cache.indices())
    }

    fn work(&mut self, case: usize, tags: Vec<u64>) -> Result<Work> {
        Ok(Work {
            case,
            retrieved: self.retrieved_for(case)?,
            tags,
        })
    }

    fn rollouts(&self, work: &[Work], decider: Decider<'_>, collect: Collect) -> Result<Vec<EpisodeRecord>> {
        let ctx = self.ctx();
        let seed = self.cfg.seed;
        parallel::map(work, |w| {
            let entries: Vec<&MemoryEntry> =
                w.retrieved.iter().map(|&i| &self.memory.entries()[i]).collect();
            let mut rng = seeding::stream(seed, &w.tags);
            run_episode(&ctx, &self.suite.cases[w.case], &entries, decider, &mut rng, collect)
        })
        .into_iter()
        .collect()
    }

    /// Applies a finished batch in rollout order: memory updates, mining
    /// passes, parameter extension and logging. Composites registered here
    /// first become visible to the episode numbered `self.episode`.
    fn absorb(&mut self, mut trajs: Vec<Trajectory>, log: Log) -> Result<()> {
        let start = self.episode;
        self.episode += trajs.len() as u64;
        for (i, t) in trajs.iter_mut().enumerate() {
            t.episode = Some(start + i as u64);
        }
        let chunk = self.cfg.mining_batch;
        for batch in trajs.chunks(chunk) {
            if self.cfg.ablation.memory_on {
                for t in batch {
                    let f = &self.suite.cases[t.case_id].features;
                    self.memory.update_on_success(t, f)?;
                }
            }
            if self.cfg.ablation.composite_on {
                let report = mine_and_register(
                    batch,
                    &self.cfg.miner,
                    &mut self.space,
                    &mut self.table,
                    self.episode,
                )?;
                self.mining.push(report);
            }
        }
        if self.params.extend_to(&self.space)? > 0 {
            if let Some(r) = &mut self.reference {
                r.extend_to(&self.space)?;
            }
        }
        if self.keep_logs {
            match log {
                Log::Demos => self.demos.extend(trajs),
                Log::Training => self.trajectories.extend(trajs),
            }
        }
        Ok(())
    }

    /// Teacher demonstrations for every training case; they seed memory and
    /// the miner when those mechanisms are on.
    pub fn bootstrap(&mut self) -> Result<()> {
        let ids = self.train_ids.clone();
        for chunk in ids.chunks(self.cfg.mining_batch) {
            let work = chunk
                .iter()
                .map(|&c| self.work(c, vec![seeding::TAG_DEMO, c as u64]))
                .collect::<Result<Vec<_>>>()?;
            let recs = self.rollouts(&work, Decider::Teacher, Collect::default())?;
            self.retrievals += recs.iter().map(|r| r.retrievals as u64).sum::<u64>();
            self.absorb(recs.into_iter().map(|r| r.trajectory).collect(), Log::Demos)?;
        }
        Ok(())
    }

    fn row(&self, stage: &str, iter: usize, recs: &[EpisodeRecord], kl: f64, loss: f64) -> MetricsRow {
        let m = summarize(recs);
        MetricsRow {
            iter,
            mean_reward: m.composite_usage_rate,
            success_rate: m.success_rate,
            kl,
            registry_size: self.space.composites().len(),
            composite_usage_rate: m.composite_usage_rate,
            mean_steps: m.mean_steps,
            stage: stage.to_string(),
            memory_size: self.memory.len(),
            retrievals: self.retrievals,
            grad_steps: self.grad_steps,
            loss,
        }
    }

    /// One pass over the training cases. The student acts; the teacher labels
    /// every state the student visits.
    pub fn sft_epoch(&mut self, epoch: usize) -> Result<MetricsRow> {
        let mut order = self.train_ids.clone();
        order.shuffle(&mut seeding::stream(self.cfg.seed, &[seeding::TAG_ORDER, epoch as u64]));
        let mut all = Vec::with_capacity(order.len());
        let (mut loss, mut decisions) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.sft.batch_size) {
            let work = chunk
                .iter()
                .map(|&c| self.work(c, vec![seeding::TAG_SFT, epoch as u64, c as u64]))
                .collect::<Result<Vec<_>>>()?;
            let collect = Collect {
                labels: true,
                snapshots: false,
            };
            let mut recs = self.rollouts(&work, Decider::Sample(&self.params), collect)?;
            let samples: Vec<SftSample> = recs.iter_mut().flat_map(|r| std::mem::take(&mut r.labels)).collect();
            let lg = sft_loss(&self.params, &samples)?;
            apply_gradient(&mut self.params, &lg.grad, self.cfg.sft.learning_rate);
            self.grad_steps += 1;
            loss += lg.loss;
            decisions += samples.len();
            self.retrievals += recs.iter().map(|r| r.retrievals as u64).sum::<u64>();
            self.absorb(recs.iter().map(|r| r.trajectory.clone()).collect(), Log::Training)?;
            all.extend(recs);
        }
        let row = self.row("sft", epoch, &all, 0.0, loss / decisions.max(1) as f64);
        self.metrics.push(row.clone());
        Ok(row)
    }

    pub fn freeze_reference(&mut self) {
        self.reference = Some(self.params.clone());
    }

    /// Samples `group_size` rollouts for each of a batch of training cases,
    /// takes one gradient step on the clipped objective, then feeds the
    /// successful rollouts to memory and the miner.
    pub fn grpo_iteration(&mut self, iter: usize) -> Result<MetricsRow> {
        let reference = self
            .reference
            .clone()
            .ok_or_else(|| Error::Config("reference policy not frozen".into()))?;
        let g = self.cfg.grpo.group_size;
        let mut rng = seeding::stream(self.cfg.seed, &[seeding::TAG_ORDER, 1 << 32, iter as u64]);
        let n = self.cfg.grpo.cases_per_iteration.min(self.train_ids.len());
        let picked: Vec<usize> = rand::seq::index::sample(&mut rng, self.train_ids.len(), n)
            .into_iter()
            .map(|i| self.train_ids[i])
            .collect();
        let mut work = Vec::with_capacity(n * g);
        for &c in &picked {
            for j in 0..g {
                work.push(self.work(c, vec![seeding::TAG_GRPO, iter as u64, c as u64, j as u64])?);
            }
        }
        let collect = Collect {
            labels: false,
            snapshots: true,
        };
        let mut recs = self.rollouts(&work, Decider::Sample(&self.params), collect)?;
        let mut advantages = Vec::with_capacity(recs.len());
        for group in recs.chunks(g) {
            let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
            advantages.extend(group_advantages(&rewards, self.cfg.grpo.adv_eps)?.advantages);
        }
        let rollouts: Vec<Rollout> = recs
            .iter_mut()
            .map(|r| Rollout {
                steps: std::mem::take(&mut r.snapshots),
                reward: r.reward,
            })
            .collect();
        let (terms, grad) = grpo_loss(&self.params, &reference, &rollouts, &advantages, &self.cfg.grpo)?;
        apply_gradient(&mut self.params, &grad, self.cfg.grpo.learning_rate);
        self.grad_steps += 1;
        self.retrievals += recs.iter().map(|r| r.retrievals as u64).sum::<u64>();
        self.absorb(recs.iter().map(|r| r.trajectory.clone()).collect(), Log::Training)?;
        let row = self.row("grpo", iter, &recs, terms.kl, terms.loss);
        self.metrics.push(row.clone());
        Ok(row)
    }

    pub fn evaluate(&self, split: Split, mode: EvalMode) -> Result<EvalMetrics> {
        let cases = self.suite.split(split);
        Ok(evaluate(&self.eval_inputs(), &cases, EvalPolicy::Params(&self.params, mode))?.0)
    }

    /// Episode index at which each composite became available, in
    /// registration order.
    pub fn registration_timeline(&self) -> Vec<u64> {
        self.space.composites().iter().map(|c| c.registered_at).collect()
    }

    pub fn persist(&self, dir: &Path, eval: &EvalMetrics) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_json(&dir.join(io::CONFIG_FILE), &self.cfg)?;
        io::write_json(&dir.join(io::TASKS_FILE), &self.suite)?;
        io::write_jsonl(&dir.join(io::DEMOS_FILE), &self.demos)?;
        io::write_jsonl(&dir.join(io::TRAJECTORIES_FILE), &self.trajectories)?;
        io::write_jsonl(&dir.join(io::MEMORY_FILE), self.memory.entries())?;
        io::write_json(&dir.join(io::REGISTRY_FILE), &self.space.registry())?;
        io::write_json(&dir.join(io::PARAMS_FILE), &self.params)?;
        if let Some(r) = &self.reference {
            io::write_json(&dir.join(io::REFERENCE_FILE), r)?;
        }
        io::write_bytes(&dir.join(io::METRICS_FILE), metrics_csv(&self.metrics).as_bytes())?;
        io::write_jsonl(&dir.join(io::MINING_FILE), &self.mining)?;
        io::write_json(&dir.join(io::TABLE_FILE), &self.table)?;
        io::write_json(&dir.join(io::EVAL_FILE), eval)?;
        Ok(())
    }
}

/// Full pipeline. Returns the trained state and held-out metrics.
pub fn train(cfg: RunConfig, keep_logs: bool) -> Result<(Trainer, EvalMetrics)> {
    let mut t = Trainer::new(cfg, keep_logs)?;
    t.bootstrap()?;
    for epoch in 0..t.cfg.sft.epochs {
        t.sft_epoch(epoch)?;
    }
    t.freeze_reference();
    if t.cfg.ablation.grpo_on {
        for iter in 0..t.cfg.grpo.iterations {
            t.grpo_iteration(iter)?;
        }
    }
    let eval = t.evaluate(Split::Heldout, t.cfg.eval_mode)?;
    let mut row = t.row("eval", 0, &[], 0.0, 0.0);
    row.success_rate = eval.success_rate;
    row.mean_reward = eval.composite_usage_rate;
    row.composite_usage_rate = eval.composite_usage_rate;
    row.mean_steps = eval.mean_steps;
    t.metrics.push(row);
    Ok((t, eval))
}

/// A persisted run loaded back from its directory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub cfg: RunConfig,
    pub suite: TaskSuite,
    pub space: ActionSpace,
    pub protocols: Vec<Vec<usize>>,
    pub featurizer: Featurizer,
    pub params: PolicyParams,
    pub memory: MemoryStore,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: RunConfig = io::read_json(&dir.join(io::CONFIG_FILE))?;
        let cfg = cfg.resolve()?;
        let suite: TaskSuite = io::read_json(&dir.join(io::TASKS_FILE))?;
        let registry: Registry = io::read_json(&dir.join(io::REGISTRY_FILE))?;
        let space = ActionSpace::from_registry(&registry, &suite.labels, cfg.miner.max_len)?;
        let protocols = suite.protocol_atoms(&space)?;
        let featurizer = Featurizer::for_space(suite.config.dim, &space);
        let params: PolicyParams = io::read_json(&dir.join(io::PARAMS_FILE))?;
        if params.ids() != space.ids() || params.feature_dim() != featurizer.dim() {
            return Err(Error::Schema("params do not match the registry".into()));
        }
        let mut memory = MemoryStore::new();
        for e in io::read_jsonl::<MemoryEntry>(&dir.join(io::MEMORY_FILE))? {
            memory.push(e)?;
        }
        Ok(Self {
            cfg,
            suite,
            space,
            protocols,
            featurizer,
            params,
            memory,
        })
    }

    pub fn eval_inputs(&self) -> EvalInputs<'_> {
        EvalInputs {
            ctx: EpisodeCtx {
                space: &self.space,
                protocols: &self.protocols,
                featurizer: self.featurizer,
                env: self.cfg.env,
            },
            memory: self.cfg.ablation.memory_on.then_some(&self.memory),
            k: self.cfg.memory.k,
            seed: self.cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub case_id: usize,
    pub trajectories: usize,
    pub steps: usize,
}

/// Re-executes every logged trajectory of `case_id` (demos and training) and
/// checks that the serialized step records match the log byte for byte. Step
/// rewards are rescored against the composites visible at the logged episode.
pub fn replay(dir: &Path, case_id: usize) -> Result<ReplayReport> {
    let cfg: RunConfig = io::read_json::<RunConfig>(&dir.join(io::CONFIG_FILE))?.resolve()?;
    let suite: TaskSuite = io::read_json(&dir.join(io::TASKS_FILE))?;
    let registry: Registry = io::read_json(&dir.join(io::REGISTRY_FILE))?;
    let space = ActionSpace::from_registry(&registry, &suite.labels, cfg.miner.max_len)?;
    let protocols = suite.protocol_atoms(&space)?;
    let case = suite.case(case_id)?;
    let mut logged: Vec<Trajectory> = io::read_jsonl(&dir.join(io::DEMOS_FILE))?;
    logged.extend(io::read_jsonl::<Trajectory>(&dir.join(io::TRAJECTORIES_FILE))?);
    logged.retain(|t| t.case_id == case_id);
    if logged.is_empty() {
        return Err(Error::Verification(format!("no logged trajectory for case {case_id}")));
    }
    let mut steps = 0;
    for t in &logged {
        let visible: Vec<Vec<String>> = registry
            .composites
            .iter()
            .filter(|c| t.episode.is_none_or(|e| c.registered_at <= e))
            .map(|c| c.sequence.clone())
            .collect();
        let mut ep = Episode::new(&space, case, &protocols[case.family], cfg.env);
        // The answer coin is only consulted for undecided correct answers.
        let mut rng = rand_chacha::ChaCha8Rng::from_seed_u64(0);
        for s in &t.steps {
            let a = space
                .index_of(&s.action)
                .map_err(|e| Error::Verification(format!("episode {:?}: {e}", t.episode)))?;
            ep.step(a, &mut rng)
                .map_err(|e| Error::Verification(format!("episode {:?}: {e}", t.episode)))?;
        }
        let mut again = record_episode(&ep, &space);
        for st in &mut again.steps {
            st.reward = visible
                .iter()
                .any(|c| reward::contains_contiguous(&st.expanded, c).unwrap_or(false))
                as u8;
        }
        let expect = serde_json::to_string(&t.steps).map_err(|e| Error::json("log", e))?;
        let got = serde_json::to_string(&again.steps).map_err(|e| Error::json("replay", e))?;
        if expect != got {
            return Err(Error::Verification(format!(
                "case {case_id} episode {:?}: replayed steps differ\n  log:    {expect}\n  replay: {got}",
                t.episode
            )));
        }
        let decided = ep.has_decisive() || t.answer.as_deref() != Some(t.truth.as_str());
        if decided && again.success != t.success {
            return Err(Error::Verification(format!(
                "case {case_id} episode {:?}: success flag differs",
                t.episode
            )));
        }
        if again.answer != t.answer {
            return Err(Error::Verification(format!(
                "case {case_id} episode {:?}: answer differs",
                t.episode
            )));
        }
        steps += t.steps.len();
    }
    Ok(ReplayReport {
        case_id,
        trajectories: logged.len(),
        steps,
    })
}

trait FromSeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl FromSeedU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}
