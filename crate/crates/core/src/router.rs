//! Softmax top-k routing and the Switch-style load-balancing loss.

use rand::Rng;

use crate::error::{Result, UmoeError};
use crate::tensor::{mat_vec, softmax, Matrix, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T> {
    /// `N × d`; logits are `W_r · x`.
    pub w: Matrix<T>,
}

impl<T: Real> RouterParams<T> {
    pub fn new(w: Matrix<T>) -> Self {
        Self { w }
    }

    pub fn init<R: Rng + ?Sized>(n_experts: usize, dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        Self {
            w: Matrix::randn(n_experts, dim, std, rng),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.w.rows()
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        mat_vec(&self.w, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<T> {
    /// Selected experts, highest probability first.
    pub indices: Vec<usize>,
    /// `gates[j] == probs[indices[j]]`.
    pub gates: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> RoutingDecision<T> {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Gates divided by their sum over the selected set.
    pub fn renormalized_gates(&self) -> Vec<T> {
        let sum: T = self.gates.iter().copied().sum();
        self.gates.iter().map(|&g| g / sum).collect()
    }

    pub fn contains(&self, expert: usize) -> bool {
        self.indices.contains(&expert)
    }
}

/// Indices of the `k` largest values, descending, ties broken by ascending index.
pub fn top_k<T: Real>(values: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Routes from precomputed logits.
pub fn route_logits<T: Real>(logits: &[T], k: usize) -> Result<RoutingDecision<T>> {
    if k > logits.len() {
        return Err(UmoeError::KTooLarge { k, n: logits.len() });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(UmoeError::NonFiniteInput);
    }
    let probs = softmax(logits);
    let indices = top_k(&probs, k);
    let gates = indices.iter().map(|&i| probs[i]).collect();
    Ok(RoutingDecision { indices, gates, probs })
}

pub fn route<T: Real>(params: &RouterParams<T>, x: &[T], k: usize) -> Result<RoutingDecision<T>> {
    if k > params.n_experts() {
        return Err(UmoeError::KTooLarge {
            k,
            n: params.n_experts(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(UmoeError::NonFiniteInput);
    }
    route_logits(&params.logits(x), k)
}

/// Order-independent sufficient statistics for the balance loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BalanceStats {
    pub counts: Vec<u64>,
    pub prob_sums: Vec<f64>,
    pub tokens: u64,
    pub selections: u64,
}

impl BalanceStats {
    pub fn new(n_experts: usize) -> Self {
        Self {
            counts: vec![0; n_experts],
            prob_sums: vec![0.0; n_experts],
            tokens: 0,
            selections: 0,
        }
    }

    pub fn add<T: Real>(&mut self, d: &RoutingDecision<T>) {
        for &i in &d.indices {
            self.counts[i] += 1;
        }
        for (s, p) in self.prob_sums.iter_mut().zip(&d.probs) {
            *s += p.as_f64();
        }
        self.tokens += 1;
        self.selections += d.indices.len() as u64;
    }

    pub fn merge(&mut self, other: &BalanceStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += b;
        }
        self.tokens += other.tokens;
        self.selections += other.selections;
    }

    /// Routed fraction per expert, `f_i = count_i / (tokens · k)`.
    pub fn fractions(&self) -> Vec<f64> {
        if self.selections == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / self.selections as f64).collect()
    }

    pub fn loss(&self) -> Result<f64> {
        if self.tokens == 0 {
            return Err(UmoeError::EmptyBatch);
        }
        let n = self.counts.len() as f64;
        let f = self.fractions();
        let t = self.tokens as f64;
        Ok(n * f.iter().zip(&self.prob_sums).map(|(fi, s)| fi * s / t).sum::<f64>())
    }
}

/// `N · Σ_i f_i · P_i` over a batch of decisions.
pub fn balance_loss<T: Real>(decisions: &[RoutingDecision<T>], n_experts: usize) -> Result<T> {
    if decisions.is_empty() {
        return Err(UmoeError::EmptyBatch);
    }
    let f = routed_fractions(decisions, n_experts);
    let t = T::lit(decisions.len() as f64);
    let mut total = T::zero();
    for (i, &fi) in f.iter().enumerate() {
        let p_mean = decisions.iter().map(|d| d.probs[i]).sum::<T>() / t;
        total += fi * p_mean;
    }
    Ok(T::lit(n_experts as f64) * total)
}

pub fn routed_fractions<T: Real>(decisions: &[RoutingDecision<T>], n_experts: usize) -> Vec<T> {
    let mut counts = vec![0usize; n_experts];
    let mut selections = 0usize;
    for d in decisions {
        for &i in &d.indices {
            counts[i] += 1;
        }
        selections += d.indices.len();
    }
    if selections == 0 {
        return vec![T::zero(); n_experts];
    }
    counts.iter().map(|&c| T::lit(c as f64 / selections as f64)).collect()
}

/// Gradient of the balance loss w.r.t. each decision's probability vector,
/// holding the routed fractions fixed.
pub fn balance_loss_prob_grads<T: Real>(decisions: &[RoutingDecision<T>], n_experts: usize) -> Vec<T> {
    let f = routed_fractions(decisions, n_experts);
    let scale = T::lit(n_experts as f64 / decisions.len().max(1) as f64);
    f.into_iter().map(|fi| fi * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_backward;
    use proptest::prelude::*;

    fn decision_from_logits(logits: &[f64], k: usize) -> RoutingDecision<f64> {
        route_logits(logits, k).unwrap()
    }

    #[test]
    fn uniform_logits_tie_break_by_index() {
        let d = decision_from_logits(&[0.0; 4], 2);
        assert_eq!(d.probs, vec![0.25; 4]);
        assert_eq!(d.indices, vec![0, 1]);
        assert_eq!(d.gates, vec![0.25, 0.25]);
    }

    #[test]
    fn picks_largest_logits() {
        let logits = [2.0, 1.0, 3.0, 0.0];
        let d = decision_from_logits(&logits, 2);
        assert_eq!(d.indices, vec![2, 0]);
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        assert!((d.gates[0] - 3f64.exp() / z).abs() < 1e-15);
        assert!((d.gates[1] - 2f64.exp() / z).abs() < 1e-15);
    }

    #[test]
    fn full_k_is_a_permutation() {
        let d = decision_from_logits(&[0.3, -0.2, 1.5, 0.7, 0.0], 5);
        let mut sorted = d.indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert!((d.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn route_uses_router_matrix() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let d = route(&RouterParams::new(w), &[0.5, 2.0], 1).unwrap();
        assert_eq!(d.indices, vec![2]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            route_logits(&[0.0f64, 1.0], 3),
            Err(UmoeError::KTooLarge { k: 3, n: 2 })
        ));
        assert!(matches!(
            route_logits(&[0.0, f64::NAN], 1),
            Err(UmoeError::NonFiniteInput)
        ));
        let w = Matrix::<f64>::zeros(2, 2);
        assert!(matches!(
            route(&RouterParams::new(w), &[f64::INFINITY, 0.0], 1),
            Err(UmoeError::NonFiniteInput)
        ));
        assert!(matches!(balance_loss::<f64>(&[], 4), Err(UmoeError::EmptyBatch)));
    }

    #[test]
    fn balance_loss_is_one_when_uniform() {
        let n = 4;
        let decisions: Vec<_> = (0..n)
            .map(|t| RoutingDecision {
                indices: vec![t],
                gates: vec![0.25],
                probs: vec![0.25; n],
            })
            .collect();
        let loss = balance_loss(&decisions, n).unwrap();
        assert!((loss - 1.0f64).abs() < 1e-12);
    }

    #[test]
    fn balance_loss_approaches_n_when_collapsed() {
        let n = 8;
        let mut logits = vec![0.0; n];
        logits[0] = 40.0;
        let d = decision_from_logits(&logits, 1);
        let loss = balance_loss(&vec![d; 10], n).unwrap();
        assert!((loss - n as f64).abs() < 1e-9);
    }

    #[test]
    fn balance_stats_agree_with_direct_loss() {
        let decisions: Vec<_> = [[0.1, 0.5, -0.3], [1.0, 0.0, 0.2], [-0.4, 0.9, 0.9]]
            .iter()
            .map(|l| decision_from_logits(l, 2))
            .collect();
        let mut stats = BalanceStats::new(3);
        decisions.iter().for_each(|d| stats.add(d));
        let direct = balance_loss(&decisions, 3).unwrap();
        assert!((stats.loss().unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn balance_logit_gradient_matches_finite_difference() {
        let logits = vec![
            vec![0.3, -1.0, 0.4, 0.9],
            vec![1.2, 0.1, -0.5, 0.0],
            vec![-0.2, 0.8, 0.6, -1.1],
        ];
        let k = 2;
        let decisions: Vec<_> = logits.iter().map(|l| decision_from_logits(l, k)).collect();
        let frozen = decisions.clone();
        let dp = balance_loss_prob_grads(&decisions, 4);
        // Loss with the routed sets frozen, probabilities recomputed from perturbed logits.
        let loss_at = |ls: &Vec<Vec<f64>>| {
            let ds: Vec<_> = ls
                .iter()
                .zip(&frozen)
                .map(|(l, d)| RoutingDecision {
                    indices: d.indices.clone(),
                    gates: d.gates.clone(),
                    probs: softmax(l),
                })
                .collect();
            balance_loss(&ds, 4).unwrap()
        };
        let h = 1e-6;
        for t in 0..3 {
            let analytic = softmax_backward(&decisions[t].probs, &dp);
            for i in 0..4 {
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[t][i] += h;
                dn[t][i] -= h;
                let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-12);
                assert!((fd - analytic[i]).abs() / denom < 1e-4, "t={t} i={i}");
            }
        }
    }

    fn sort_oracle(probs: &[f64], k: usize) -> Vec<usize> {
        let mut pairs: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
        // Bubble sort keeps the oracle independent of the library's comparator.
        for a in 0..pairs.len() {
            for b in 0..pairs.len() - 1 - a {
                let (i, pi) = pairs[b];
                let (j, pj) = pairs[b + 1];
                if pj > pi || (pj == pi && j < i) {
                    pairs.swap(b, b + 1);
                }
            }
        }
        pairs.into_iter().take(k).map(|(i, _)| i).collect()
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_oracle(logits in prop::collection::vec(-5.0f64..5.0, 1..24), k_frac in 0.0f64..1.0) {
            let k = ((logits.len() as f64) * k_frac).round() as usize;
            let d = decision_from_logits(&logits, k);
            prop_assert_eq!(&d.indices, &sort_oracle(&d.probs, k));
            for (j, &i) in d.indices.iter().enumerate() {
                prop_assert_eq!(d.gates[j], d.probs[i]);
            }
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn shift_invariance(logits in prop::collection::vec(-5.0f64..5.0, 2..16), shift in -50.0f64..50.0) {
            let k = logits.len() / 2;
            let a = decision_from_logits(&logits, k);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = decision_from_logits(&shifted, k);
            prop_assert_eq!(a.indices, b.indices);
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn raising_a_logit_keeps_it_selected(logits in prop::collection::vec(-5.0f64..5.0, 2..16), bump in 0.0f64..10.0, pick in 0usize..16) {
            let k = (logits.len() / 2).max(1);
            let d = decision_from_logits(&logits, k);
            let chosen = d.indices[pick % k];
            let mut raised = logits.clone();
            raised[chosen] += bump;
            prop_assert!(decision_from_logits(&raised, k).contains(chosen));
        }

        #[test]
        fn balance_loss_at_least_one_when_fractions_match_probs(weights in prop::collection::vec(1u32..6, 2..8)) {
            // Build a batch whose routed fraction f equals its mean probability P.
            let n = weights.len();
            let total: u32 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|&w| w as f64 / total as f64).collect();
            let mut decisions = Vec::new();
            for (i, &w) in weights.iter().enumerate() {
                for _ in 0..w {
                    decisions.push(RoutingDecision { indices: vec![i], gates: vec![probs[i]], probs: probs.clone() });
                }
            }
            let loss = balance_loss(&decisions, n).unwrap();
            prop_assert!(loss >= 1.0 - 1e-12);
        }
    }
}
