//! Connectivity of the per-round random graphs and the choice of `b`.

use serde::{Deserialize, Serialize};

use super::SecAggError;

/// Union bound over `rounds` graphs on the probability that a random graph
/// with `n` vertices and edge probability `p` is disconnected:
///
/// `W * sum_{j=1}^{floor(n/2)} ((e * n / j) * (1 - p)^(n - j))^j`
///
/// The terms are combined in log space and the result is clamped to
/// `[0, 1]`.
pub fn disconnect_bound(n: u64, p: f64, rounds: f64) -> f64 {
    if n < 2 || p >= 1.0 {
        return 0.0;
    }
    let nf = n as f64;
    let ln_q = (-p).ln_1p();
    let logs: Vec<f64> = (1..=n / 2)
        .map(|j| {
            let jf = j as f64;
            jf * (1.0 + nf.ln() - jf.ln() + (nf - jf) * ln_q)
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (log_sum + rounds.ln()).exp().clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub b: u32,
    /// Rounds per epoch, `floor(prf_bits / b) * 2^b`.
    pub rounds: f64,
    pub expected_degree: f64,
    pub bound: f64,
    pub honest: u64,
}

/// Honest parties guaranteed when at most a fraction `alpha` colludes.
pub fn honest_count(parties: u64, alpha: f64) -> u64 {
    // absorb rounding in (1 - alpha) * N, e.g. 0.3 * 10 = 3.0000000000000004
    ((1.0 - alpha) * parties as f64 - 1e-9).ceil().max(0.0) as u64
}

/// Brute force over `b in 1..=prf_bits` for the largest epoch whose
/// union bound stays within `delta`. Ties keep the smaller `b`.
pub fn optimize_b(parties: u64, alpha: f64, delta: f64, prf_bits: u32) -> Result<OptimizationResult, SecAggError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(SecAggError::InvalidParameter(format!("alpha must be in [0, 1), got {alpha}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(SecAggError::InvalidParameter(format!("delta must be in (0, 1), got {delta}")));
    }
    if !(1..=super::PRF_OUTPUT_BITS).contains(&prf_bits) {
        return Err(SecAggError::InvalidParameter(format!("prf_bits must be in 1..=128, got {prf_bits}")));
    }
    let honest = honest_count(parties, alpha);
    let infeasible = SecAggError::Infeasible {
        party_count: parties,
        alpha,
        delta,
    };
    if honest < 2 {
        return Err(infeasible);
    }
    let mut best: Option<OptimizationResult> = None;
    for b in 1..=prf_bits {
        let rounds = (prf_bits / b) as f64 * 2f64.powi(b as i32);
        let bound = disconnect_bound(honest, 2f64.powi(-(b as i32)), rounds);
        if bound > delta || best.is_some_and(|r| rounds <= r.rounds) {
            continue;
        }
        best = Some(OptimizationResult {
            b,
            rounds,
            expected_degree: (parties.saturating_sub(1)) as f64 / 2f64.powi(b as i32),
            bound,
            honest,
        });
    }
    best.ok_or(infeasible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    fn connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
        let mut parent: Vec<usize> = (0..n).collect();
        let mut components = n;
        for (u, v) in edges {
            let (a, b) = (find(&mut parent, u), find(&mut parent, v));
            if a != b {
                parent[a] = b;
                components -= 1;
            }
        }
        components == 1
    }

    fn pairs(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|u| ((u + 1)..n).map(move |v| (u, v))).collect()
    }

    fn monte_carlo(n: usize, p: f64, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = pairs(n);
        let disconnected = (0..samples)
            .filter(|_| {
                let chosen: Vec<_> = all.iter().copied().filter(|_| rng.gen_bool(p)).collect();
                !connected(n, chosen.into_iter())
            })
            .count();
        disconnected as f64 / samples as f64
    }

    #[test]
    fn exact_four_vertex_enumeration() {
        let all = pairs(4);
        let disconnected = (0u32..64)
            .filter(|mask| {
                let edges = all.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, e)| *e);
                !connected(4, edges)
            })
            .count();
        assert_eq!(disconnected, 26);
        let exact = disconnected as f64 / 64.0;
        assert!(disconnect_bound(4, 0.5, 1.0) >= exact);
    }

    #[test]
    fn full_edge_probability_gives_zero() {
        for n in [2, 3, 10, 1000] {
            assert_eq!(disconnect_bound(n, 1.0, 1e6), 0.0);
        }
    }

    #[test]
    fn monte_carlo_below_bound() {
        let empirical = monte_carlo(50, 0.2, 100_000, 1);
        let bound = disconnect_bound(50, 0.2, 1.0);
        assert!(empirical <= bound, "{empirical} > {bound}");
    }

    #[test]
    fn large_n_does_not_overflow() {
        let v = disconnect_bound(5000, 2f64.powi(-6), 1344.0);
        assert!(v.is_finite() && v < 1e-7);
    }

    #[test]
    fn table_rows() {
        for (n, b, w, deg) in [
            (100, 1, 256.0, 49.5),
            (1000, 4, 512.0, 62.4375),
            (5000, 6, 1344.0, 78.109375),
            (10000, 7, 2304.0, 78.1171875),
        ] {
            let r = optimize_b(n, 0.5, 1e-7, 128).unwrap();
            assert_eq!((r.b, r.rounds, r.expected_degree), (b, w, deg), "N = {n}");
            assert!(r.bound <= 1e-7);
            assert_eq!(r.honest, n / 2);
        }
    }

    #[test]
    fn tighter_delta_still_allows_b7() {
        let r = optimize_b(10000, 0.5, 1e-9, 128).unwrap();
        assert_eq!((r.b, r.rounds), (7, 2304.0));
        assert!((r.expected_degree - 78.0).abs() <= 0.5);
    }

    #[test]
    fn single_honest_party_is_infeasible() {
        assert!(matches!(optimize_b(2, 0.99, 1e-20, 128), Err(SecAggError::Infeasible { .. })));
        assert!(matches!(optimize_b(100, 1.0, 1e-7, 128), Err(SecAggError::InvalidParameter(_))));
        assert!(matches!(optimize_b(100, 0.5, 0.0, 128), Err(SecAggError::InvalidParameter(_))));
    }

    #[test]
    fn honest_count_rounds_up() {
        assert_eq!(honest_count(10, 0.7), 3);
        assert_eq!(honest_count(101, 0.5), 51);
        assert_eq!(honest_count(100, 0.0), 100);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn monotone_in_p_and_w(n in 2u64..400, p1 in 0.001f64..1.0, p2 in 0.001f64..1.0, w1 in 1.0f64..1e4, w2 in 1.0f64..1e4) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(disconnect_bound(n, hi, w1) <= disconnect_bound(n, lo, w1) + 1e-15);
            let (wl, wh) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
            prop_assert!(disconnect_bound(n, p1, wl) <= disconnect_bound(n, p1, wh) + 1e-15);
        }

        #[test]
        fn small_graphs_sampled_below_bound(n in 2usize..20, p in 0.05f64..0.95, seed in any::<u64>()) {
            let empirical = monte_carlo(n, p, 2000, seed);
            // allow sampling error when the bound is itself tight
            prop_assert!(empirical <= disconnect_bound(n as u64, p, 1.0) + 0.05);
        }
    }
}
