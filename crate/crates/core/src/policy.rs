//! Tabular softmax policy trained by weighted maximum likelihood.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RelabeledSample;
use crate::env::{Action, Goal, LayoutId, StateId};
use crate::error::{DawogError, Result};
use crate::scalar::Scalar;
use crate::table_io::{write_sidecar, TableBlob, TableKind};
use crate::value::{from_f64, to_f64};

pub const DEFAULT_POLICY_LEARNING_RATE: f64 = 0.01;

/// Anything that picks an action for a `(state, goal)` pair.
pub trait Controller {
    fn act(&self, s: StateId, g: Goal) -> Action;
}

impl<F: Fn(StateId, Goal) -> Action> Controller for F {
    fn act(&self, s: StateId, g: Goal) -> Action {
        self(s, g)
    }
}

/// Logits over the four actions for every `(s, g)`, row-major `[s][g][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy<T> {
    n: usize,
    logits: Vec<T>,
    pub learning_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    kind: String,
    layout_id: LayoutId,
    num_states: usize,
    learning_rate: f64,
}

impl<T: Scalar> TabularPolicy<T> {
    pub fn new(num_states: usize, learning_rate: f64) -> Self {
        Self {
            n: num_states,
            logits: vec![T::zero(); num_states * num_states * Action::COUNT],
            learning_rate,
        }
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    #[inline]
    fn offset(&self, s: StateId, g: Goal) -> usize {
        (s.idx() * self.n + g.idx()) * Action::COUNT
    }

    #[inline]
    pub fn logits(&self, s: StateId, g: Goal) -> &[T] {
        let o = self.offset(s, g);
        &self.logits[o..o + Action::COUNT]
    }

    pub fn set_logits(&mut self, s: StateId, g: Goal, z: [T; 4]) {
        let o = self.offset(s, g);
        self.logits[o..o + Action::COUNT].copy_from_slice(&z);
    }

    #[inline]
    pub fn probs(&self, s: StateId, g: Goal) -> [T; 4] {
        softmax(self.logits(s, g))
    }

    /// Highest-probability action; ties go to the earliest in
    /// [`Action::ALL`].
    #[inline]
    pub fn greedy(&self, s: StateId, g: Goal) -> Action {
        let z = self.logits(s, g);
        let mut best = 0;
        for a in 1..Action::COUNT {
            if z[a] > z[best] {
                best = a;
            }
        }
        Action::from_index(best)
    }

    pub fn sample<R: Rng>(&self, s: StateId, g: Goal, rng: &mut R) -> Action {
        let p = self.probs(s, g);
        let u = rng.gen::<f64>();
        let mut acc = 0.0;
        for (a, pa) in p.iter().enumerate() {
            acc += pa.as_f64();
            if u < acc {
                return Action::from_index(a);
            }
        }
        Action::from_index(Action::COUNT - 1)
    }

    pub fn to_blob(&self, layout: LayoutId) -> TableBlob {
        TableBlob {
            kind: TableKind::PolicyLogits,
            layout: layout.as_str().to_string(),
            dims: vec![self.n as u64, self.n as u64, Action::COUNT as u64],
            blocks: vec![to_f64(&self.logits)],
        }
    }

    pub fn from_blob(blob: &TableBlob, learning_rate: f64) -> Result<Self> {
        if blob.kind != TableKind::PolicyLogits
            || blob.dims.len() != 3
            || blob.dims[2] != Action::COUNT as u64
            || blob.blocks.len() != 1
        {
            return Err(DawogError::Shape("not a policy logit table".into()));
        }
        Ok(Self {
            n: blob.dims[0] as usize,
            logits: from_f64(&blob.blocks[0]),
            learning_rate,
        })
    }

    pub fn save(&self, path: &Path, layout: LayoutId) -> Result<()> {
        self.to_blob(layout).save(path)?;
        write_sidecar(
            path,
            &PolicyMeta {
                kind: "policy_logits".into(),
                layout_id: layout,
                num_states: self.n,
                learning_rate: self.learning_rate,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = TableBlob::load(path)?;
        let lr = std::fs::read_to_string(crate::table_io::sidecar_path(path))
            .ok()
            .and_then(|t| serde_json::from_str::<PolicyMeta>(&t).ok())
            .map_or(DEFAULT_POLICY_LEARNING_RATE, |m| m.learning_rate);
        Self::from_blob(&blob, lr)
    }
}

impl<T: Scalar> Controller for TabularPolicy<T> {
    fn act(&self, s: StateId, g: Goal) -> Action {
        self.greedy(s, g)
    }
}

#[inline]
pub fn softmax<T: Scalar>(z: &[T]) -> [T; 4] {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut p = [T::zero(); 4];
    let mut sum = T::zero();
    for a in 0..Action::COUNT {
        p[a] = (z[a] - m).exp();
        sum = sum + p[a];
    }
    for pa in &mut p {
        *pa = *pa / sum;
    }
    p
}

/// Shannon entropy `-sum p ln p` (0 ln 0 = 0).
pub fn entropy<T: Scalar>(p: &[T; 4]) -> T {
    p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.ln())
        .sum()
}

/// One ascent step on `sum_b w_b ln pi(a_b | s_b, g_b) + alpha * H(pi(. | s_b, g_b))`.
///
/// Per-sample gradients are evaluated at the pre-update logits and summed,
/// so each row moves by `lr` times the gradient of its own samples. Returns
/// the negative of the batch-mean objective before the step.
pub fn policy_update<T: Scalar>(
    pol: &mut TabularPolicy<T>,
    batch: &[RelabeledSample],
    weights: &[T],
    alpha: f64,
) -> Result<f64> {
    if batch.len() != weights.len() {
        return Err(DawogError::Shape(format!(
            "{} samples but {} weights",
            batch.len(),
            weights.len()
        )));
    }
    if batch.is_empty() {
        return Ok(0.0);
    }
    let lr = T::lit(pol.learning_rate);
    let alpha = T::lit(alpha);
    let use_entropy = alpha > T::zero();
    let mut objective = 0.0;
    let mut steps: Vec<(usize, [T; 4])> = Vec::with_capacity(batch.len());
    for (smp, &w) in batch.iter().zip(weights) {
        let o = pol.offset(smp.s, smp.g);
        let p = softmax(&pol.logits[o..o + 4]);
        let a = smp.a.index();
        let mut grad = [T::zero(); 4];
        for j in 0..4 {
            let onehot = if j == a { T::one() } else { T::zero() };
            grad[j] = w * (onehot - p[j]);
        }
        let mut obj = w * p[a].max(T::min_positive_value()).ln();
        if use_entropy {
            let h = entropy(&p);
            for j in 0..4 {
                let lp = if p[j] > T::zero() { p[j].ln() } else { T::zero() };
                grad[j] = grad[j] - alpha * p[j] * (lp + h);
            }
            obj = obj + alpha * h;
        }
        objective += obj.as_f64();
        steps.push((o, grad));
    }
    for (o, grad) in steps {
        for j in 0..4 {
            pol.logits[o + j] = pol.logits[o + j] + lr * grad[j];
        }
    }
    Ok(-objective / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smp(a: Action) -> RelabeledSample {
        RelabeledSample {
            s: StateId(0),
            a,
            s_next: StateId(1),
            g: Goal(StateId(1)),
            r: 1,
            d: true,
            traj: 0,
            t: 0,
            i: 1,
        }
    }

    #[test]
    fn untrained_policy_is_uniform_and_prefers_left() {
        let pol = TabularPolicy::<f64>::new(2, 0.1);
        assert_eq!(pol.probs(StateId(0), Goal(StateId(1))), [0.25; 4]);
        assert_eq!(pol.greedy(StateId(0), Goal(StateId(1))), Action::Left);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut pol = TabularPolicy::<f64>::new(2, 0.1);
        assert!(policy_update(&mut pol, &[smp(Action::Up)], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn repeated_single_action_converges_to_one() {
        let mut pol = TabularPolicy::<f64>::new(2, 0.1);
        for _ in 0..2000 {
            policy_update(&mut pol, &[smp(Action::Down)], &[10.0], 0.0).unwrap();
        }
        let p = pol.probs(StateId(0), Goal(StateId(1)));
        assert!(p[Action::Down.index()] > 0.999);
    }

    #[test]
    fn equal_weights_match_unweighted_direction() {
        let batch = [smp(Action::Up), smp(Action::Right), smp(Action::Up)];
        let mut a = TabularPolicy::<f64>::new(2, 0.1);
        let mut b = TabularPolicy::<f64>::new(2, 0.3);
        policy_update(&mut a, &batch, &[1.0; 3], 0.0).unwrap();
        policy_update(&mut b, &batch, &[3.0; 3], 0.0).unwrap();
        // same direction, 9x the step
        let za = a.logits(StateId(0), Goal(StateId(1)));
        let zb = b.logits(StateId(0), Goal(StateId(1)));
        for j in 0..4 {
            assert!((zb[j] - 9.0 * za[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_term_flattens_policy() {
        let mut pol = TabularPolicy::<f64>::new(2, 0.5);
        pol.set_logits(StateId(0), Goal(StateId(1)), [2.0, 0.0, 0.0, -1.0]);
        let before = entropy(&pol.probs(StateId(0), Goal(StateId(1))));
        // zero weights isolate the entropy gradient
        policy_update(&mut pol, &[smp(Action::Left)], &[0.0], 0.5).unwrap();
        let after = entropy(&pol.probs(StateId(0), Goal(StateId(1))));
        assert!(after > before);
    }

    #[test]
    fn loss_is_negative_weighted_log_likelihood() {
        let mut pol = TabularPolicy::<f64>::new(2, 0.1);
        let loss = policy_update(&mut pol, &[smp(Action::Up)], &[2.0], 0.0).unwrap();
        assert!((loss - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn probabilities_stay_normalized(
            actions in proptest::collection::vec(0usize..4, 1..40),
            weights in proptest::collection::vec(0.01f64..10.0, 40),
            alpha in 0.0f64..0.2,
        ) {
            let mut pol = TabularPolicy::<f64>::new(2, 0.7);
            let batch: Vec<_> = actions.iter().map(|&a| smp(Action::from_index(a))).collect();
            for _ in 0..20 {
                policy_update(&mut pol, &batch, &weights[..batch.len()], alpha).unwrap();
                let p = pol.probs(StateId(0), Goal(StateId(1)));
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
