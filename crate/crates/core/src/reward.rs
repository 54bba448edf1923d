//! Composite-containment step reward and trajectory outcome.

use crate::environment::Trajectory;
use crate::error::{Error, Result};
use crate::tooling::ActionSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepReward {
    pub value: u8,
    /// Registration index of the earliest registered composite found in the step.
    pub matched: Option<usize>,
}

/// True iff `c` occurs as a contiguous run inside `g`.
pub fn contains_contiguous<T: PartialEq>(g: &[T], c: &[T]) -> Result<bool> {
    if c.is_empty() {
        return Err(Error::EmptyPattern);
    }
    Ok(g.windows(c.len()).any(|w| w == c))
}

/// Reward of a step whose expanded atomic stream is `g`, scored against the
/// composite sequences of a registry snapshot.
pub fn step_reward_index(g: &[usize], composites: &[Vec<usize>]) -> StepReward {
    let matched = composites
        .iter()
        .position(|c| !c.is_empty() && g.windows(c.len()).any(|w| w == c.as_slice()));
    StepReward {
        value: matched.is_some() as u8,
        matched,
    }
}

/// String-level variant of [`step_reward_index`]; returns the matched composite id.
pub fn step_reward<S: AsRef<str>>(g: &[S], space: &ActionSpace) -> (u8, Option<String>) {
    let g: Vec<&str> = g.iter().map(AsRef::as_ref).collect();
    let hit = space.composites().iter().find(|c| {
        let seq: Vec<&str> = c.sequence.iter().map(String::as_str).collect();
        g.windows(seq.len()).any(|w| w == seq.as_slice())
    });
    (hit.is_some() as u8, hit.map(|c| c.id.clone()))
}

/// Success flag and logged per-step rewards. The trajectory-level GRPO reward
/// is the maximum of the step rewards; success never enters it.
pub fn trajectory_outcome(t: &Trajectory) -> (bool, Vec<u8>) {
    (t.success, t.steps.iter().map(|s| s.reward).collect())
}

pub fn trajectory_reward(step_rewards: &[u8]) -> f64 {
    if step_rewards.contains(&1) {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tooling::ToolSpec;
    use proptest::prelude::*;

    fn naive(g: &[u8], c: &[u8]) -> bool {
        if c.len() > g.len() {
            return false;
        }
        for i in 0..=g.len() - c.len() {
            let mut ok = true;
            for j in 0..c.len() {
                if g[i + j] != c[j] {
                    ok = false;
                    break;
                }
            }
            if ok {
                return true;
            }
        }
        false
    }

    #[test]
    fn containment_examples() {
        let g = [
            "convert_color_space",
            "segment_optic_cup",
            "segment_optic_disc",
            "compute_cdr",
        ];
        assert!(contains_contiguous(&g, &g[1..3]).unwrap());
        assert!(!contains_contiguous(&["a", "x", "b"], &["a", "b"]).unwrap());
        assert!(contains_contiguous(&g, &g).unwrap());
        assert!(matches!(
            contains_contiguous::<&str>(&g, &[]),
            Err(Error::EmptyPattern)
        ));
    }

    fn space() -> ActionSpace {
        let mut s = ActionSpace::default();
        for t in ["a", "b", "c", "x", "y"] {
            s.register_atomic(ToolSpec::new(t, 1, "mask")).unwrap();
        }
        s
    }

    #[test]
    fn empty_registry_never_rewards() {
        let s = space();
        assert_eq!(step_reward(&["a", "b"], &s), (0, None));
        assert_eq!(step_reward_index(&[0, 1], &[]).value, 0);
    }

    #[test]
    fn composite_step_matches_itself() {
        let mut s = space();
        s.register_composite(&["a", "b", "c"], 4, 0).unwrap();
        let g = s.expand("seq:a/b/c").unwrap();
        assert_eq!(step_reward(&g, &s), (1, Some("seq:a/b/c".into())));
    }

    #[test]
    fn match_inside_longer_step() {
        let mut s = space();
        s.register_composite(&["a", "b"], 4, 0).unwrap();
        assert_eq!(
            step_reward(&["x", "a", "b", "y"], &s),
            (1, Some("seq:a/b".into()))
        );
        let r = step_reward_index(&[3, 0, 1, 4], s.composite_sequences());
        assert_eq!(r, StepReward { value: 1, matched: Some(0) });
    }

    #[test]
    fn earliest_registered_match_is_reported() {
        let mut s = space();
        s.register_composite(&["b", "c"], 4, 0).unwrap();
        s.register_composite(&["a", "b"], 4, 0).unwrap();
        assert_eq!(step_reward(&["a", "b", "c"], &s).1.as_deref(), Some("seq:b/c"));
    }

    proptest! {
        #[test]
        fn matcher_agrees_with_naive_scan(
            g in proptest::collection::vec(0u8..6, 0..=15),
            c in proptest::collection::vec(0u8..6, 1..=5),
        ) {
            prop_assert_eq!(contains_contiguous(&g, &c).unwrap(), naive(&g, &c));
        }

        #[test]
        fn reward_monotone_in_registry(
            g in proptest::collection::vec(0usize..5, 0..=6),
            cs in proptest::collection::vec(proptest::collection::vec(0usize..5, 2..=3), 0..6),
            extra in proptest::collection::vec(proptest::collection::vec(0usize..5, 2..=3), 0..4),
        ) {
            let small = step_reward_index(&g, &cs);
            let mut big = cs.clone();
            big.extend(extra);
            let large = step_reward_index(&g, &big);
            prop_assert!(large.value >= small.value);
            prop_assert!(large.value <= 1);
            prop_assert_eq!(large.value == 1, large.matched.is_some());
        }
    }
}
