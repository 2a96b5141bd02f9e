//! Exact 1.5-entmax.
//!
//! `chi_i = max(0, kappa_i - tau)^2` with the threshold `tau` chosen so that
//! the weights sum to one. The logits are used as given (no halving), so
//! this differs from the common library variant by a rescaling of the input.

/// Output of the 1.5-entmax map.
#[derive(Clone, Debug, PartialEq)]
pub struct EntmaxResult {
    pub weights: Vec<f64>,
    pub tau: f64,
    /// Indices with `kappa_i > tau`, ascending.
    pub support: Vec<usize>,
}

impl EntmaxResult {
    fn from_tau(kappa: &[f64], tau: f64) -> Self {
        let mut support = Vec::new();
        let weights = kappa
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if k > tau {
                    support.push(i);
                    (k - tau) * (k - tau)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            weights,
            tau,
            support,
        }
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }
}

fn mass(kappa: &[f64], tau: f64) -> f64 {
    kappa
        .iter()
        .map(|&k| if k > tau { (k - tau) * (k - tau) } else { 0.0 })
        .sum()
}

/// Exact solve: sort descending, find the support size whose closed-form
/// threshold is self-consistent, then polish `tau` with Newton steps.
pub fn entmax15(kappa: &[f64]) -> EntmaxResult {
    assert!(!kappa.is_empty(), "entmax15 needs at least one logit");
    let mut sorted = kappa.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mut tau = sorted[0] - 1.0;
    let (mut s1, mut s2) = (0.0, 0.0);
    for s in 1..=sorted.len() {
        let k = sorted[s - 1];
        s1 += k;
        s2 += k * k;
        let n = s as f64;
        let mean = s1 / n;
        // sum of squared deviations from the mean of the top-s logits
        let ss = (s2 - n * mean * mean).max(0.0);
        if ss > 1.0 {
            break;
        }
        let cand = mean - ((1.0 - ss) / n).sqrt();
        let next_ok = s == sorted.len() || sorted[s] <= cand;
        if cand < k && next_ok {
            tau = cand;
            break;
        }
    }

    // Newton on g(tau) = sum (k - tau)_+^2 - 1; g is convex and decreasing.
    for _ in 0..3 {
        let g = mass(kappa, tau) - 1.0;
        if g.abs() <= 1e-15 {
            break;
        }
        let slope: f64 = kappa.iter().map(|&k| (k - tau).max(0.0)).sum();
        if slope <= 0.0 {
            break;
        }
        tau += g / (2.0 * slope);
    }
    EntmaxResult::from_tau(kappa, tau)
}

/// Bisection reference solver on `[max(kappa) - 1, max(kappa)]`.
pub fn entmax15_bisect(kappa: &[f64], iters: usize) -> EntmaxResult {
    assert!(!kappa.is_empty(), "entmax15 needs at least one logit");
    let max = kappa.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if mass(kappa, mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    EntmaxResult::from_tau(kappa, 0.5 * (lo + hi))
}

/// Vector-Jacobian product `J^T upstream` at `kappa`.
///
/// On the support, with `s_i = sqrt(chi_i)`:
/// `J_ij = 2 s_i (delta_ij - s_j / sum_S s)`; zero elsewhere.
pub fn entmax15_jvp(kappa: &[f64], upstream: &[f64]) -> Vec<f64> {
    entmax15_vjp_from(&entmax15(kappa), upstream)
}

/// Same as [`entmax15_jvp`] for an already-computed forward result.
pub fn entmax15_vjp_from(res: &EntmaxResult, upstream: &[f64]) -> Vec<f64> {
    debug_assert_eq!(res.weights.len(), upstream.len());
    let s: Vec<f64> = res.weights.iter().map(|w| w.sqrt()).collect();
    let s_sum: f64 = res.support.iter().map(|&i| s[i]).sum();
    let coupled: f64 = res.support.iter().map(|&i| 2.0 * s[i] * upstream[i]).sum();
    let mut out = vec![0.0; upstream.len()];
    for &j in &res.support {
        out[j] = 2.0 * s[j] * upstream[j] - s[j] / s_sum * coupled;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, RngStream, Tensor};
    use proptest::prelude::*;

    #[test]
    fn uniform_input() {
        for c in [-3.0, 0.0, 0.7, 12.5] {
            let r = entmax15(&[c; 4]);
            for w in &r.weights {
                assert!((w - 0.25).abs() < 1e-15);
            }
            assert!((r.tau - (c - 0.5)).abs() < 1e-14);
        }
    }

    #[test]
    fn forced_singleton() {
        let r = entmax15(&[10.0, 0.0]);
        assert_eq!(r.weights, vec![1.0, 0.0]);
        assert_eq!(r.tau, 9.0);
        assert_eq!(r.support, vec![0]);
    }

    #[test]
    fn single_logit() {
        let r = entmax15_bisect(&[0.0], 200);
        assert!((r.weights[0] - 1.0).abs() < 1e-12);
        assert!((r.tau + 1.0).abs() < 1e-12);
        let r = entmax15(&[0.0]);
        assert_eq!(r.weights, vec![1.0]);
        assert_eq!(r.tau, -1.0);
    }

    #[test]
    fn three_logits_against_bisection() {
        let k = [1.0, 0.5, 0.0];
        let exact = entmax15(&k);
        let oracle = entmax15_bisect(&k, 200);
        for (a, b) in exact.weights.iter().zip(&oracle.weights) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sparsity_exists() {
        let r = entmax15(&[2.0, 0.0, 0.0]);
        assert!(r.support_size() < 3);
        assert!(r.weights.contains(&0.0));
    }

    #[test]
    fn raising_a_logit_never_lowers_its_weight() {
        let mut rng = RngStream::named(11, "test");
        for _ in 0..200 {
            let d = 2 + rng.below(10);
            let mut k: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let j = rng.below(d);
            let before = entmax15_bisect(&k, 200).weights[j];
            k[j] += 0.1 * rng.uniform();
            let after = entmax15_bisect(&k, 200).weights[j];
            assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn vjp_conservation_and_off_support() {
        let k = [0.9, 0.8, 0.1, -2.0, 0.5];
        let r = entmax15(&k);
        assert!(!r.support.contains(&3));
        let g = entmax15_jvp(&k, &[1.0; 5]);
        assert!(g.iter().all(|v| v.abs() < 1e-14));
        let g = entmax15_jvp(&k, &[0.3, -1.0, 2.0, 5.0, 0.7]);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = RngStream::named(5, "test");
        let mut checked = 0;
        while checked < 50 {
            let kappa: Vec<f64> = (0..5).map(|_| 0.6 * rng.normal()).collect();
            let up: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let r = entmax15(&kappa);
            // skip points where the support could flip under +-h
            let margin = kappa
                .iter()
                .map(|k| (k - r.tau).abs())
                .fold(f64::INFINITY, f64::min);
            if margin < 1e-3 {
                continue;
            }
            let x = Tensor::vector(kappa.clone()).unwrap();
            let fd = finite_diff_grad(
                |t| {
                    entmax15(t)
                        .weights
                        .iter()
                        .zip(&up)
                        .map(|(a, b)| a * b)
                        .sum()
                },
                &x,
                1e-6,
            )
            .unwrap();
            let g = entmax15_jvp(&kappa, &up);
            for (a, b) in g.iter().zip(fd.iter()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                assert!(rel < 1e-5, "analytic {a} vs fd {b}");
            }
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn simplex_and_agreement(kappa in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let r = entmax15(&kappa);
            let s: f64 = r.weights.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            let o = entmax15_bisect(&kappa, 200);
            for (a, b) in r.weights.iter().zip(&o.weights) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn permutation_equivariant(kappa in prop::collection::vec(-3.0f64..3.0, 2..20), seed in 0u64..1000) {
            let perm = RngStream::new(seed, 0).permutation(kappa.len());
            let permuted: Vec<f64> = perm.iter().map(|&i| kappa[i]).collect();
            let base = entmax15(&kappa);
            let moved = entmax15(&permuted);
            for (pos, &i) in perm.iter().enumerate() {
                prop_assert!((moved.weights[pos] - base.weights[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn shift_invariant(kappa in prop::collection::vec(-3.0f64..3.0, 1..20), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = kappa.iter().map(|k| k + c).collect();
            let a = entmax15(&kappa);
            let b = entmax15(&shifted);
            prop_assert!((b.tau - a.tau - c).abs() <= 1e-10);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
