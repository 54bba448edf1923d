//! Linear-softmax policy over the growing action space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::Observation;
use crate::error::{Error, Result};
use crate::tooling::ActionSpace;

/// Maps observations to fixed-size feature vectors:
/// `[x; tool bag counts; decisive flag; retrieved next-tool histogram]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Featurizer {
    pub dim_x: usize,
    pub n_atomic: usize,
}

impl Featurizer {
    pub fn new(dim_x: usize, n_atomic: usize) -> Self {
        Self { dim_x, n_atomic }
    }

    pub fn for_space(dim_x: usize, space: &ActionSpace) -> Self {
        Self::new(dim_x, space.atomic().len())
    }

    pub fn dim(&self) -> usize {
        self.dim_x + 2 * self.n_atomic + 2
    }

    pub fn featurize(&self, obs: &Observation<'_>, space: &ActionSpace) -> Result<Vec<f64>> {
        let mut phi = vec![0.0; self.dim()];
        self.featurize_into(obs, space, &mut phi)?;
        Ok(phi)
    }

    pub fn featurize_into(
        &self,
        obs: &Observation<'_>,
        space: &ActionSpace,
        phi: &mut [f64],
    ) -> Result<()> {
        let (d, n) = (self.dim_x, self.n_atomic);
        if obs.case.features.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: obs.case.features.len(),
            });
        }
        if space.atomic().len() != n || phi.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: d + 2 * space.atomic().len() + 2,
            });
        }
        phi.fill(0.0);
        phi[..d].copy_from_slice(&obs.case.features);
        let mut done = vec![false; n];
        for e in obs.evidence {
            phi[d + e.tool] += 1.0;
            done[e.tool] = true;
        }
        if obs.has_decisive() {
            phi[d + n] = 1.0;
        }
        let hist = d + n + 1;
        for m in obs.retrieved {
            let mut slot = n;
            for t in &m.t {
                let a = space
                    .atomic_index(t)
                    .ok_or_else(|| Error::UnknownTool(t.clone()))?;
                if !done[a] {
                    slot = a;
                    break;
                }
            }
            phi[hist + slot] += 1.0;
        }
        Ok(())
    }
}

/// One weight row per action, bias stored as the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub version: u64,
    ids: Vec<String>,
    dim: usize,
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ActionWeights {
    id: String,
    w: Vec<f64>,
    b: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    version: u64,
    actions: Vec<ActionWeights>,
}

impl Serialize for PolicyParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsFile {
            version: self.version,
            actions: self
                .ids
                .iter()
                .enumerate()
                .map(|(a, id)| ActionWeights {
                    id: id.clone(),
                    w: self.row(a)[..self.dim].to_vec(),
                    b: self.row(a)[self.dim],
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolicyParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let f = ParamsFile::deserialize(d)?;
        let dim = f.actions.first().map_or(0, |a| a.w.len());
        let mut p = PolicyParams {
            version: f.version,
            ids: Vec::with_capacity(f.actions.len()),
            dim,
            theta: Vec::with_capacity(f.actions.len() * (dim + 1)),
        };
        for a in f.actions {
            if a.w.len() != dim {
                return Err(D::Error::custom(format!(
                    "action {} has {} weights, expected {dim}",
                    a.id,
                    a.w.len()
                )));
            }
            p.ids.push(a.id);
            p.theta.extend_from_slice(&a.w);
            p.theta.push(a.b);
        }
        Ok(p)
    }
}

impl PolicyParams {
    pub fn zeros(ids: &[String], dim: usize) -> Self {
        Self {
            version: 0,
            ids: ids.to_vec(),
            dim,
            theta: vec![0.0; ids.len() * (dim + 1)],
        }
    }

    pub fn n_actions(&self) -> usize {
        self.ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn stride(&self) -> usize {
        self.dim + 1
    }

    pub fn row(&self, a: usize) -> &[f64] {
        let s = self.stride();
        &self.theta[a * s..(a + 1) * s]
    }

    pub fn weights(&self, a: usize) -> &[f64] {
        &self.row(a)[..self.dim]
    }

    pub fn bias(&self, a: usize) -> f64 {
        self.row(a)[self.dim]
    }

    pub fn set_bias(&mut self, a: usize, b: f64) {
        let s = self.stride();
        self.theta[a * s + self.dim] = b;
    }

    pub fn set_weight(&mut self, a: usize, j: usize, w: f64) {
        let s = self.stride();
        self.theta[a * s + j] = w;
    }

    /// Appends zero rows for actions of `space` not yet covered; bumps the
    /// version when anything was added. Returns the number of new rows.
    pub fn extend_to(&mut self, space: &ActionSpace) -> Result<usize> {
        let have = self.ids.len();
        if space.len() < have || space.ids()[..have] != self.ids[..] {
            return Err(Error::VersionMismatch {
                params: self.version,
                snapshot: space.len() as u64,
            });
        }
        let added = space.len() - have;
        if added > 0 {
            self.ids.extend_from_slice(&space.ids()[have..]);
            self.theta.resize(self.ids.len() * self.stride(), 0.0);
            self.version += 1;
        }
        Ok(added)
    }

    /// Logits of the first `n` actions.
    pub fn logits_into(&self, phi: &[f64], n: usize, out: &mut Vec<f64>) -> Result<()> {
        if n > self.ids.len() {
            return Err(Error::UnknownAction(format!("#{}", n - 1)));
        }
        if phi.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: phi.len(),
            });
        }
        out.clear();
        out.extend((0..n).map(|a| {
            let r = self.row(a);
            r[..self.dim].iter().zip(phi).map(|(w, x)| w * x).sum::<f64>() + r[self.dim]
        }));
        Ok(())
    }

    pub fn logits(&self, phi: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        self.logits_into(phi, n, &mut out)?;
        Ok(out)
    }

    pub fn log_probs(&self, phi: &[f64], n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::EmptyActionSet);
        }
        let mut l = self.logits(phi, n)?;
        log_softmax_in_place(&mut l);
        Ok(l)
    }

    pub fn probs(&self, phi: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.log_probs(phi, n)?.into_iter().map(f64::exp).collect())
    }

    /// Categorical sample from the softmax over the first `n` actions.
    pub fn sample(&self, phi: &[f64], n: usize, rng: &mut impl Rng) -> Result<(usize, f64)> {
        let lp = self.log_probs(phi, n)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return Ok((a, *l));
            }
        }
        // Rounding left u above the cumulative sum: take the last positive.
        let a = lp
            .iter()
            .rposition(|l| l.exp() > 0.0)
            .expect("softmax has positive mass");
        Ok((a, lp[a]))
    }

    pub fn argmax(&self, phi: &[f64], n: usize) -> Result<(usize, f64)> {
        let lp = self.log_probs(phi, n)?;
        let mut best = 0;
        for a in 1..n {
            if lp[a] > lp[best] {
                best = a;
            }
        }
        Ok((best, lp[best]))
    }

    /// Adds `coef * d log pi(action | phi) / d theta` into `grad`, given the
    /// probabilities `p` of the first `n` actions.
    pub fn add_logprob_grad(&self, phi: &[f64], p: &[f64], action: usize, coef: f64, grad: &mut [f64]) {
        let s = self.stride();
        for (a, &pa) in p.iter().enumerate() {
            let c = coef * ((a == action) as u8 as f64 - pa);
            if c == 0.0 {
                continue;
            }
            let row = &mut grad[a * s..(a + 1) * s];
            row[..self.dim]
                .iter_mut()
                .zip(phi)
                .for_each(|(g, x)| *g += c * x);
            row[self.dim] += c;
        }
    }

    /// Adds `coef * d score / d theta` where `score = sum_a v[a] * logit_a`.
    pub fn add_logit_grad(&self, phi: &[f64], v: &[f64], coef: f64, grad: &mut [f64]) {
        let s = self.stride();
        for (a, &va) in v.iter().enumerate() {
            let c = coef * va;
            if c == 0.0 {
                continue;
            }
            let row = &mut grad[a * s..(a + 1) * s];
            row[..self.dim]
                .iter_mut()
                .zip(phi)
                .for_each(|(g, x)| *g += c * x);
            row[self.dim] += c;
        }
    }
}

pub fn log_softmax_in_place(l: &mut [f64]) {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = l.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    l.iter_mut().for_each(|x| *x -= z);
}

/// Exact KL(p || q) between categorical distributions given as log-probs.
pub fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{CaseInput, EvidenceEntry};
    use crate::memory::{MemoryEntry, PromptContext};
    use crate::tooling::ToolSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> ActionSpace {
        let mut s = ActionSpace::default();
        for t in ["a", "b", "c"] {
            s.register_atomic(ToolSpec::new(t, 1, "x")).unwrap();
        }
        s.register_answer("y").unwrap();
        s
    }

    fn case() -> CaseInput {
        CaseInput {
            case_id: 0,
            family: 0,
            features: vec![0.5, -1.0],
            hidden_param: 0.7,
            truth: "y".into(),
            heldout: false,
        }
    }

    fn mem(t: &[&str]) -> MemoryEntry {
        MemoryEntry {
            p: PromptContext { history: vec![], evidence: vec![] },
            t: t.iter().map(|s| s.to_string()).collect(),
            r: String::new(),
            f: vec![1.0, 0.0],
            source_case: 0,
            source_step: 0,
        }
    }

    #[test]
    fn fresh_observation_features() {
        let s = space();
        let f = Featurizer::for_space(2, &s);
        assert_eq!(f.dim(), 2 + 6 + 2);
        let c = case();
        let obs = Observation { case: &c, history: &[], evidence: &[], retrieved: &[] };
        let phi = f.featurize(&obs, &s).unwrap();
        assert_eq!(phi, vec![0.5, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bag_decisive_and_histogram() {
        let s = space();
        let f = Featurizer::for_space(2, &s);
        let c = case();
        let ev = [
            EvidenceEntry { tool: 0, decisive: false },
            EvidenceEntry { tool: 0, decisive: false },
            EvidenceEntry { tool: 2, decisive: true },
        ];
        let (m1, m2, m3) = (mem(&["a", "b"]), mem(&["b"]), mem(&["a", "c"]));
        let retrieved = [&m1, &m2, &m3];
        let obs = Observation { case: &c, history: &[0, 0, 2], evidence: &ev, retrieved: &retrieved };
        let phi = f.featurize(&obs, &s).unwrap();
        assert_eq!(&phi[2..5], &[2.0, 0.0, 1.0]);
        assert_eq!(phi[5], 1.0);
        // b suggested twice, the a/c entry is fully matched
        assert_eq!(&phi[6..10], &[0.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_params_are_uniform_and_bias_shift_invariant() {
        let ids: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
        let mut p = PolicyParams::zeros(&ids, 3);
        let phi = [0.3, -0.2, 1.0];
        for q in p.probs(&phi, 4).unwrap() {
            assert!((q - 0.25).abs() < 1e-15);
        }
        p.set_weight(1, 0, 2.0);
        let before = p.probs(&phi, 4).unwrap();
        for a in 0..4 {
            let b = p.bias(a);
            p.set_bias(a, b + 5.0);
        }
        let after = p.probs(&phi, 4).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn widening_a_gap_raises_that_action() {
        let ids: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let mut p = PolicyParams::zeros(&ids, 1);
        p.set_bias(0, 1.0);
        let before = p.probs(&[0.0], 3).unwrap()[0];
        p.set_bias(0, 2.0);
        assert!(p.probs(&[0.0], 3).unwrap()[0] > before);
    }

    #[test]
    fn sampling_frequencies_match_uniform() {
        let ids: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
        let p = PolicyParams::zeros(&ids, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let (a, lp) = p.sample(&[1.0], 4, &mut rng).unwrap();
            assert!((lp - 0.25f64.ln()).abs() < 1e-12);
            counts[a] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.02);
        }
        assert!(matches!(p.sample(&[1.0], 0, &mut rng), Err(Error::EmptyActionSet)));
    }

    #[test]
    fn extension_adds_zero_rows_and_bumps_version() {
        let mut s = space();
        let mut p = PolicyParams::zeros(s.ids(), 2);
        p.set_bias(0, 0.7);
        p.set_weight(2, 1, -0.4);
        let phi = [0.2, 0.9];
        let before = p.probs(&phi, 4).unwrap();
        s.register_composite(&["a", "b"], 4, 0).unwrap();
        assert_eq!(p.extend_to(&s).unwrap(), 1);
        assert_eq!(p.version, 1);
        assert_eq!(p.row(4), &[0.0, 0.0, 0.0]);
        let after = p.probs(&phi, 5).unwrap();
        let ratio = after[0] / before[0];
        for a in 0..4 {
            assert!((after[a] / before[a] - ratio).abs() < 1e-12);
        }
        assert_eq!(p.extend_to(&s).unwrap(), 0);
        assert_eq!(p.version, 1);
    }

    #[test]
    fn zero_policy_extension_is_uniform() {
        let mut s = space();
        let mut p = PolicyParams::zeros(s.ids(), 2);
        s.register_composite(&["a", "b"], 4, 0).unwrap();
        p.extend_to(&s).unwrap();
        for q in p.probs(&[1.0, 1.0], 5).unwrap() {
            assert!((q - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn params_json_shape_and_round_trip() {
        let s = space();
        let mut p = PolicyParams::zeros(s.ids(), 2);
        p.set_weight(1, 1, 0.1 + 0.2);
        p.set_bias(3, -1e-300);
        let js = serde_json::to_string(&p).unwrap();
        assert!(js.starts_with("{\"version\":0,\"actions\":[{\"id\":\"a\",\"w\":[0.0,0.0],\"b\":0.0}"));
        let back: PolicyParams = serde_json::from_str(&js).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(
            theta in proptest::collection::vec(-5.0f64..5.0, 5 * 4),
            phi in proptest::collection::vec(-3.0f64..3.0, 3),
            n in 1usize..=5,
        ) {
            let ids: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
            let mut p = PolicyParams::zeros(&ids, 3);
            p.theta_mut().copy_from_slice(&theta);
            let s: f64 = p.probs(&phi, n).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn logprob_gradient_matches_central_differences(
            theta in proptest::collection::vec(-2.0f64..2.0, 4 * 4),
            phi in proptest::collection::vec(-2.0f64..2.0, 3),
            action in 0usize..4,
        ) {
            let ids: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
            let mut p = PolicyParams::zeros(&ids, 3);
            p.theta_mut().copy_from_slice(&theta);
            let probs = p.probs(&phi, 4).unwrap();
            let mut g = vec![0.0; p.n_params()];
            p.add_logprob_grad(&phi, &probs, action, 1.0, &mut g);
            let h = 1e-5;
            for i in 0..p.n_params() {
                let mut q = p.clone();
                q.theta_mut()[i] += h;
                let up = q.log_probs(&phi, 4).unwrap()[action];
                q.theta_mut()[i] -= 2.0 * h;
                let down = q.log_probs(&phi, 4).unwrap()[action];
                prop_assert!(((up - down) / (2.0 * h) - g[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn extension_preserves_ranking(
            theta in proptest::collection::vec(-3.0f64..3.0, 4 * 3),
            phi in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let mut s = space();
            let mut p = PolicyParams::zeros(s.ids(), 2);
            p.theta_mut().copy_from_slice(&theta);
            let before = p.probs(&phi, 4).unwrap();
            s.register_composite(&["b", "c"], 4, 0).unwrap();
            p.extend_to(&s).unwrap();
            let after = p.probs(&phi, 5).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    if before[i] > before[j] {
                        prop_assert!(after[i] > after[j]);
                    }
                }
            }
        }
    }
}
