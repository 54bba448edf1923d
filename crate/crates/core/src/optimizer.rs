//! Stage-1 imitation loss and Stage-2 group-relative policy optimization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{kl_from_log_probs, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Episodes per gradient step.
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.2,
            epochs: 20,
            batch_size: 16,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("sft.learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sft.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Denominator of the importance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// pi_theta / pi_ref
    Reference,
    /// pi_theta / pi_behavior, the policy that sampled the rollout
    OldPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub adv_eps: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Cases sampled per iteration; each gets `group_size` rollouts.
    pub cases_per_iteration: usize,
    pub ratio: RatioMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_coef: 0.04,
            adv_eps: 1e-8,
            learning_rate: 5e-4,
            iterations: 200,
            cases_per_iteration: 16,
            ratio: RatioMode::Reference,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("grpo.group_size must be >= 2".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("grpo.clip_eps must be in (0, 1)".into()));
        }
        if !(self.kl_coef >= 0.0) {
            return Err(Error::Config("grpo.kl_coef must be >= 0".into()));
        }
        if !(self.adv_eps > 0.0) {
            return Err(Error::Config("grpo.adv_eps must be > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("grpo.learning_rate must be > 0".into()));
        }
        if self.cases_per_iteration == 0 {
            return Err(Error::Config("grpo.cases_per_iteration must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// `A = (R - mean) / (std + eps)` with population statistics. Groups whose
/// rewards are all equal get exactly zero advantages.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<GroupStats> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    let advantages = rewards
        .iter()
        .map(|r| if degenerate { 0.0 } else { (r - mean) / (std + eps) })
        .collect();
    Ok(GroupStats {
        rewards: rewards.to_vec(),
        mean,
        std: if degenerate { 0.0 } else { std },
        advantages,
    })
}

/// A decision recorded during a rollout: features, the number of available
/// actions, the chosen action and its log-prob under the behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSnapshot {
    pub phi: Vec<f64>,
    pub n_available: usize,
    pub action: usize,
    pub behavior_logp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<StepSnapshot>,
    pub reward: f64,
}

/// A supervised decision: the student's observation and the teacher label.
#[derive(Debug, Clone, PartialEq)]
pub struct SftSample {
    pub phi: Vec<f64>,
    pub n_available: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check(params: &PolicyParams, phi: &[f64], n: usize) -> Result<()> {
    if phi.is_empty() {
        return Err(Error::MissingSnapshot);
    }
    if n > params.n_actions() {
        return Err(Error::VersionMismatch {
            params: params.version,
            snapshot: n as u64,
        });
    }
    Ok(())
}

/// Summed negative log-likelihood of the teacher labels over every
/// supervised decision in the batch, with its gradient.
pub fn sft_loss(params: &PolicyParams, samples: &[SftSample]) -> Result<LossGrad> {
    let mut grad = vec![0.0; params.n_params()];
    let mut loss = 0.0;
    for s in samples {
        check(params, &s.phi, s.n_available)?;
        let lp = params.log_probs(&s.phi, s.n_available)?;
        loss -= lp[s.label];
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        params.add_logprob_grad(&s.phi, &p, s.label, -1.0, &mut grad);
    }
    Ok(LossGrad { loss, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoTerms {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clipped_fraction: f64,
}

/// Clipped surrogate for one step.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * adv).min(clipped * adv)
}

/// Loss `-mean(min(rho A, clip(rho) A)) + beta * mean KL(pi_theta || pi_ref)`
/// over every step of every rollout, with its gradient. `advantages[i]`
/// belongs to `rollouts[i]`.
pub fn grpo_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    rollouts: &[Rollout],
    advantages: &[f64],
    cfg: &GrpoConfig,
) -> Result<(GrpoTerms, Vec<f64>)> {
    let mut grad = vec![0.0; params.n_params()];
    let n_steps: usize = rollouts.iter().map(|r| r.steps.len()).sum();
    if n_steps == 0 {
        return Ok((
            GrpoTerms {
                loss: 0.0,
                surrogate: 0.0,
                kl: 0.0,
                clipped_fraction: 0.0,
            },
            grad,
        ));
    }
    let inv = 1.0 / n_steps as f64;
    let (mut surr, mut kl, mut clipped) = (0.0, 0.0, 0usize);
    for (r, &adv) in rollouts.iter().zip(advantages) {
        for s in &r.steps {
            check(params, &s.phi, s.n_available)?;
            check(reference, &s.phi, s.n_available)?;
            let lp = params.log_probs(&s.phi, s.n_available)?;
            let lq = reference.log_probs(&s.phi, s.n_available)?;
            let denom = match cfg.ratio {
                RatioMode::Reference => lq[s.action],
                RatioMode::OldPolicy => s.behavior_logp,
            };
            let rho = (lp[s.action] - denom).exp();
            let unclipped = rho * adv;
            let value = clipped_surrogate(rho, adv, cfg.clip_eps);
            surr += value * inv;
            let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            if unclipped <= value {
                // d(rho A) = A rho dlogp; loss carries a minus sign
                params.add_logprob_grad(&s.phi, &p, s.action, -adv * rho * inv, &mut grad);
            } else {
                clipped += 1;
            }
            if cfg.kl_coef > 0.0 {
                let k = kl_from_log_probs(&lp, &lq);
                kl += k * inv;
                let v: Vec<f64> = lp
                    .iter()
                    .zip(&lq)
                    .zip(&p)
                    .map(|((a, b), pa)| pa * (a - b - k))
                    .collect();
                params.add_logit_grad(&s.phi, &v, cfg.kl_coef * inv, &mut grad);
            } else {
                kl += kl_from_log_probs(&lp, &lq) * inv;
            }
        }
    }
    Ok((
        GrpoTerms {
            loss: -surr + cfg.kl_coef * kl,
            surrogate: surr,
            kl,
            clipped_fraction: clipped as f64 * inv,
        },
        grad,
    ))
}

/// Plain gradient descent step.
pub fn apply_gradient(params: &mut PolicyParams, grad: &[f64], lr: f64) {
    params
        .theta_mut()
        .iter_mut()
        .zip(grad)
        .for_each(|(t, g)| *t -= lr * g);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn frozen_advantages() {
        let s = group_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-8).unwrap();
        assert_eq!((s.mean, s.std), (0.5, 0.5));
        for (a, e) in s.advantages.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-7);
        }
        let s = group_advantages(&[1.0, 0.0], 1e-8).unwrap();
        assert!((s.advantages[0] - 1.0).abs() < 1e-7 && (s.advantages[1] + 1.0).abs() < 1e-7);
        assert_eq!(group_advantages(&[0.1; 3], 1e-8).unwrap().advantages, vec![0.0; 3]);
        assert!(matches!(group_advantages(&[1.0], 1e-8), Err(Error::GroupTooSmall(1))));
    }

    #[test]
    fn uniform_policy_sft_loss_is_ln4() {
        let p = PolicyParams::zeros(&ids(4), 2);
        let lg = sft_loss(&p, &[SftSample { phi: vec![0.3, 1.0], n_available: 4, label: 2 }]).unwrap();
        assert!((lg.loss - 1.386294).abs() < 1e-6);
        assert!((lg.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sft_loss_vanishes_with_the_gap() {
        let mut p = PolicyParams::zeros(&ids(3), 1);
        let s = [SftSample { phi: vec![1.0], n_available: 3, label: 1 }];
        let mut last = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 50.0] {
            p.set_bias(1, gap);
            let l = sft_loss(&p, &s).unwrap().loss;
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-20);
    }

    fn random_rollouts(rng: &mut ChaCha8Rng, p: &PolicyParams, dim: usize, n_roll: usize) -> Vec<Rollout> {
        (0..n_roll)
            .map(|_| Rollout {
                steps: (0..rng.random_range(1..4))
                    .map(|_| {
                        let phi: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let n = rng.random_range(2..=p.n_actions());
                        let action = rng.random_range(0..n);
                        StepSnapshot {
                            behavior_logp: p.log_probs(&phi, n).unwrap()[action] + rng.random_range(-0.1..0.1),
                            phi,
                            n_available: n,
                            action,
                        }
                    })
                    .collect(),
                reward: rng.random_range(0..2) as f64,
            })
            .collect()
    }

    #[test]
    fn identical_policies_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = PolicyParams::zeros(&ids(5), 3);
        p.theta_mut().iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        let rollouts = random_rollouts(&mut rng, &p, 3, 4);
        // equal step counts keep the per-step mean of A at zero
        let rollouts: Vec<Rollout> = rollouts
            .into_iter()
            .map(|mut r| {
                r.steps.truncate(1);
                r
            })
            .collect();
        let adv = group_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-8).unwrap().advantages;
        let (t, _) = grpo_loss(&p, &p, &rollouts, &adv, &GrpoConfig::default()).unwrap();
        assert!(t.loss.abs() < 1e-12);
        assert_eq!(t.kl, 0.0);
    }

    #[test]
    fn clip_branch_caps_positive_advantage() {
        let eps = 0.2;
        let adv = 0.7;
        assert!((clipped_surrogate(1.0 + 2.0 * eps, adv, eps) - (1.0 + eps) * adv).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, adv, eps), adv);
        assert!((clipped_surrogate(0.1, -adv, eps) - (0.8 * -adv)).abs() < 1e-15);
    }

    #[test]
    fn missing_snapshot_and_version_mismatch() {
        let p = PolicyParams::zeros(&ids(3), 2);
        let bad = Rollout {
            steps: vec![StepSnapshot { phi: vec![], n_available: 3, action: 0, behavior_logp: 0.0 }],
            reward: 0.0,
        };
        let cfg = GrpoConfig::default();
        assert!(matches!(grpo_loss(&p, &p, &[bad], &[0.0], &cfg), Err(Error::MissingSnapshot)));
        let wide = Rollout {
            steps: vec![StepSnapshot { phi: vec![0.0, 1.0], n_available: 5, action: 0, behavior_logp: 0.0 }],
            reward: 0.0,
        };
        assert!(matches!(
            grpo_loss(&p, &p, &[wide], &[0.0], &cfg),
            Err(Error::VersionMismatch { .. })
        ));
    }

    /// Norm-wise relative error between the analytic gradient and central
    /// differences.
    fn fd_check(f: impl Fn(&PolicyParams) -> f64, p: &PolicyParams, grad: &[f64]) -> f64 {
        let h = 1e-5;
        let (mut diff, mut scale_fd, mut scale_g) = (0.0, 0.0, 0.0);
        for i in 0..p.n_params() {
            let mut q = p.clone();
            q.theta_mut()[i] += h;
            let up = f(&q);
            q.theta_mut()[i] -= 2.0 * h;
            let down = f(&q);
            let fd = (up - down) / (2.0 * h);
            diff += (fd - grad[i]).powi(2);
            scale_fd += fd * fd;
            scale_g += grad[i] * grad[i];
        }
        diff.sqrt() / f64::max(scale_fd, scale_g).sqrt().max(1e-12)
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = PolicyParams::zeros(&ids(5), 4);
        p.theta_mut().iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        let samples: Vec<SftSample> = (0..6)
            .map(|_| {
                let n = rng.random_range(2..=5);
                SftSample {
                    phi: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    n_available: n,
                    label: rng.random_range(0..n),
                }
            })
            .collect();
        let g = sft_loss(&p, &samples).unwrap().grad;
        assert!(fd_check(|q| sft_loss(q, &samples).unwrap().loss, &p, &g) < 1e-6);
    }

    #[test]
    fn grpo_gradient_matches_finite_differences_both_ratio_modes() {
        for ratio in [RatioMode::Reference, RatioMode::OldPolicy] {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let mut p = PolicyParams::zeros(&ids(5), 4);
            p.theta_mut().iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
            let mut r = p.clone();
            r.theta_mut().iter_mut().for_each(|t| *t += rng.random_range(-0.05..0.05));
            let rollouts = random_rollouts(&mut rng, &p, 4, 6);
            let rewards: Vec<f64> = rollouts.iter().map(|x| x.reward).collect();
            let adv = group_advantages(&rewards, 1e-8).unwrap().advantages;
            let cfg = GrpoConfig { ratio, ..GrpoConfig::default() };
            let (_, g) = grpo_loss(&p, &r, &rollouts, &adv, &cfg).unwrap();
            let f = |q: &PolicyParams| grpo_loss(q, &r, &rollouts, &adv, &cfg).unwrap().0.loss;
            assert!(fd_check(f, &p, &g) < 1e-5, "{ratio:?}");
        }
    }

    proptest! {
        #[test]
        fn advantage_normalization(rewards in proptest::collection::vec(-3.0f64..3.0, 2..=16)) {
            let s = group_advantages(&rewards, 1e-8).unwrap();
            let g = rewards.len() as f64;
            let mean = s.advantages.iter().sum::<f64>() / g;
            prop_assert!(mean.abs() < 1e-12);
            if s.std > 1e-3 {
                let sd = (s.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / g).sqrt();
                prop_assert!(sd <= 1.0 && sd >= 1.0 - 1e-6);
            }
        }

        #[test]
        fn clip_bound_and_kl_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = PolicyParams::zeros(&ids(4), 3);
            p.theta_mut().iter_mut().for_each(|t| *t = rng.random_range(-2.0..2.0));
            let mut r = p.clone();
            r.theta_mut().iter_mut().for_each(|t| *t += rng.random_range(-1.0..1.0));
            let rollouts = random_rollouts(&mut rng, &p, 3, 4);
            let adv: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cfg = GrpoConfig::default();
            let (t, _) = grpo_loss(&p, &r, &rollouts, &adv, &cfg).unwrap();
            prop_assert!(t.kl >= 0.0);
            let max_a = adv.iter().fold(0.0f64, |m, a| m.max(a.abs()));
            for ro in &rollouts {
                for s in &ro.steps {
                    let lp = p.log_probs(&s.phi, s.n_available).unwrap()[s.action];
                    let lq = r.log_probs(&s.phi, s.n_available).unwrap()[s.action];
                    for &a in &adv {
                        let v = clipped_surrogate((lp - lq).exp(), a, cfg.clip_eps);
                        if a >= 0.0 {
                            prop_assert!(v <= (1.0 + cfg.clip_eps) * max_a + 1e-12);
                        }
                    }
                }
            }
        }
    }
}
