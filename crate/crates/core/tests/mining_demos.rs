//! Mining and reward behavior on teacher demonstrations.

use std::collections::BTreeSet;

use toolevo_core::environment::{bootstrap_demos, generate_tasks, CaseInput, Split, SuiteConfig, TaskSuite};
use toolevo_core::memory::MemoryStore;
use toolevo_core::miner::{count_windows, mine_and_register, FrequencyTable, MinerConfig};
use toolevo_core::reward::trajectory_outcome;

fn suite() -> TaskSuite {
    generate_tasks(&SuiteConfig {
        seed: 21,
        families: 3,
        cases: 90,
        ..SuiteConfig::default()
    })
    .unwrap()
}

/// Ten training cases per family.
fn ten_per_family(s: &TaskSuite) -> Vec<&CaseInput> {
    let train = s.split(Split::Train);
    let mut out = Vec::new();
    for f in 0..3 {
        out.extend(train.iter().filter(|c| c.family == f).take(10));
    }
    assert_eq!(out.len(), 30);
    out
}

fn windows(seq: &[String], min: usize, max: usize) -> BTreeSet<Vec<String>> {
    let mut out = BTreeSet::new();
    for len in min..=max.min(seq.len()) {
        for w in seq.windows(len) {
            out.insert(w.to_vec());
        }
    }
    out
}

#[test]
fn demos_with_tau_five_register_every_protocol_window() {
    let s = suite();
    let cases = ten_per_family(&s);
    let mut space = s.action_space(MinerConfig::default().max_len).unwrap();
    let demos = bootstrap_demos(&s, &cases, &space, Default::default()).unwrap();
    let cfg = MinerConfig {
        tau: 5,
        ..MinerConfig::default()
    };
    mine_and_register(&demos, &cfg, &mut space, &mut FrequencyTable::default(), 30).unwrap();
    let registered: BTreeSet<Vec<String>> = space.composites().iter().map(|c| c.sequence.clone()).collect();
    for fam in &s.families {
        for w in windows(&fam.protocol, cfg.min_len, cfg.max_len) {
            assert!(registered.contains(&w), "{w:?} missing");
        }
        assert!(registered.contains(&fam.protocol));
    }
}

#[test]
fn tau_one_candidates_include_every_protocol_pair() {
    let s = suite();
    let cases = s.split(Split::Train);
    let space = s.action_space(MinerConfig::default().max_len).unwrap();
    let demos = bootstrap_demos(&s, &cases, &space, Default::default()).unwrap();
    let seqs: Vec<Vec<String>> = demos
        .iter()
        .map(|t| t.tool_stream().into_iter().map(String::from).collect())
        .collect();
    let cfg = MinerConfig {
        tau: 1,
        ..MinerConfig::default()
    };
    let table = count_windows(&seqs, &cfg);
    for fam in &s.families {
        for pair in fam.protocol.windows(2) {
            assert!(table.get(pair) >= 1, "{pair:?} not counted");
        }
    }
}

#[test]
fn success_without_composites_still_feeds_memory_and_miner() {
    let s = suite();
    let cases = ten_per_family(&s);
    let space = s.action_space(MinerConfig::default().max_len).unwrap();
    let demos = bootstrap_demos(&s, &cases, &space, Default::default()).unwrap();
    let t = &demos[0];
    assert!(t.success);
    let (success, rewards) = trajectory_outcome(t);
    assert!(success);
    assert!(rewards.iter().all(|&r| r == 0));

    let mut memory = MemoryStore::new();
    assert!(memory.update_on_success(t, &cases[0].features).unwrap() > 0);
    let mut table = FrequencyTable::default();
    let mut space = space.clone();
    mine_and_register(std::slice::from_ref(t), &MinerConfig::default(), &mut space, &mut table, 1).unwrap();
    assert!(table.len() > 0);
}
