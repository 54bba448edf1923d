//! End-to-end checks over a small persisted run.

use std::collections::BTreeSet;

use toolevo_core::environment::{SuiteConfig, Trajectory};
use toolevo_core::io;
use toolevo_core::memory::MemoryEntry;
use toolevo_core::miner::{mine_and_register, FrequencyTable};
use toolevo_core::orchestrator::{parse_metrics_csv, replay, train, LoadedRun, RunConfig};
use toolevo_core::policy::PolicyParams;
use toolevo_core::tooling::{ActionSpace, Registry};
use toolevo_core::ErrorCategory;

fn small(condition: &str) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 11,
        suite: SuiteConfig {
            seed: 5,
            families: 3,
            cases: 60,
            ..SuiteConfig::default()
        },
        ..RunConfig::default()
    }
    .with_condition(condition)
    .unwrap();
    cfg.sft.epochs = 3;
    cfg.grpo.iterations = 4;
    cfg.grpo.cases_per_iteration = 4;
    cfg
}

fn persisted(condition: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let (trainer, eval) = train(small(condition), true).unwrap();
    trainer.persist(dir.path(), &eval).unwrap();
    dir
}

fn all_logs(dir: &std::path::Path) -> Vec<Trajectory> {
    let mut logs: Vec<Trajectory> = io::read_jsonl(&dir.join(io::DEMOS_FILE)).unwrap();
    logs.extend(io::read_jsonl::<Trajectory>(&dir.join(io::TRAJECTORIES_FILE)).unwrap());
    logs
}

#[test]
fn artifacts_round_trip_exactly() {
    let dir = persisted("D");
    let run = LoadedRun::load(dir.path()).unwrap();

    let registry: Registry = io::read_json(&dir.path().join(io::REGISTRY_FILE)).unwrap();
    assert_eq!(run.space.registry(), registry);

    let params: PolicyParams = io::read_json(&dir.path().join(io::PARAMS_FILE)).unwrap();
    assert_eq!(params, run.params);

    let memory: Vec<MemoryEntry> = io::read_jsonl(&dir.path().join(io::MEMORY_FILE)).unwrap();
    assert_eq!(memory.len(), run.memory.len());
    assert!(memory.iter().zip(run.memory.entries()).all(|(a, b)| a == b));

    // rewriting what was loaded reproduces the files byte for byte
    let again = tempfile::tempdir().unwrap();
    io::write_json(&again.path().join("p.json"), &run.params).unwrap();
    assert_eq!(
        std::fs::read(again.path().join("p.json")).unwrap(),
        std::fs::read(dir.path().join(io::PARAMS_FILE)).unwrap()
    );
}

#[test]
fn every_logged_case_replays() {
    let dir = persisted("D");
    let cases: BTreeSet<usize> = all_logs(dir.path()).iter().map(|t| t.case_id).collect();
    for case in cases.iter().take(8) {
        let report = replay(dir.path(), *case).unwrap();
        assert!(report.trajectories > 0 && report.steps > 0);
    }
}

#[test]
fn tampered_log_fails_replay() {
    let dir = persisted("C");
    let path = dir.path().join(io::DEMOS_FILE);
    let mut demos: Vec<Trajectory> = io::read_jsonl(&path).unwrap();
    let case = demos[0].case_id;
    let last = demos[0].steps.len() - 2;
    demos[0].steps[last].results[0].push('x');
    io::write_jsonl(&path, &demos).unwrap();
    let err = replay(dir.path(), case).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Verification);
}

#[test]
fn offline_mining_covers_the_online_registry() {
    let dir = persisted("D");
    let run = LoadedRun::load(dir.path()).unwrap();
    let logs = all_logs(dir.path());

    let mut space = ActionSpace::new(run.cfg.miner.max_len);
    for t in run.space.atomic() {
        space.register_atomic(t.clone()).unwrap();
    }
    let mut table = FrequencyTable::default();
    mine_and_register(&logs, &run.cfg.miner, &mut space, &mut table, logs.len() as u64).unwrap();

    let offline: BTreeSet<Vec<String>> = space.composites().iter().map(|c| c.sequence.clone()).collect();
    let online: Vec<Vec<String>> = run.space.composites().iter().map(|c| c.sequence.clone()).collect();
    assert!(!online.is_empty());
    assert!(online.iter().all(|s| offline.contains(s)));
}

#[test]
fn registry_growth_is_monotone_and_logged() {
    let dir = persisted("D");
    let rows = parse_metrics_csv(&io::read_to_string(&dir.path().join(io::METRICS_FILE)).unwrap()).unwrap();
    assert!(rows.windows(2).all(|w| w[0].registry_size <= w[1].registry_size));
    assert!(rows.windows(2).all(|w| w[0].memory_size <= w[1].memory_size));

    let run = LoadedRun::load(dir.path()).unwrap();
    let at: Vec<u64> = run.space.composites().iter().map(|c| c.registered_at).collect();
    assert!(at.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(rows.last().unwrap().registry_size, run.space.composites().len());
}

#[test]
fn ablation_switches_show_in_artifacts() {
    let a = persisted("A");
    let run = LoadedRun::load(a.path()).unwrap();
    assert_eq!(run.memory.len(), 0);
    assert!(run.space.composites().is_empty());
    let rows = parse_metrics_csv(&io::read_to_string(&a.path().join(io::METRICS_FILE)).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.stage != "grpo" && r.retrievals == 0));

    let c = persisted("C");
    let rows = parse_metrics_csv(&io::read_to_string(&c.path().join(io::METRICS_FILE)).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.stage != "grpo"));
    assert!(rows.iter().any(|r| r.retrievals > 0));
}
