//! Automatic coherence threshold and kernel bandwidth.
//!
//! Given a desired dictionary size `M`, the threshold is `mu0 = 1/(M-1)`,
//! the largest coherence for which `M` kernel functions are guaranteed to be
//! linearly independent. The bandwidth is then chosen so that the mean
//! off-diagonal entry of the Gram matrix equals `mu0`.
//!
//! With `K1` the unit-bandwidth Gram matrix, the Gram matrix at bandwidth
//! `sigma^2` is `K1^(1/sigma^2)` entrywise, so the mean off-diagonal entry is a
//! strictly decreasing function of `t = 1/sigma^2` whenever some entry lies in
//! `(0, 1)`. The root is found by bisection on `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GramMatrix;

/// Largest acceptable `|mean - mu0|` for a bandwidth solution.
pub const BANDWIDTH_TOLERANCE: f64 = 1e-10;
pub const MAX_BISECTION_ITERS: usize = 200;

const INITIAL_BRACKET: (f64, f64) = (1e-6, 1e6);
const MAX_BRACKET_EXPANSIONS: usize = 300;

/// Threshold and bandwidth derived from a target dictionary size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSetting {
    pub target_m: usize,
    pub mu0: f64,
    pub sigma2: f64,
    /// Achieved `|mean off-diagonal - mu0|`.
    pub residual: f64,
}

/// `mu0 = 1/(M-1)`.
pub fn coherence_threshold(m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::Parameter(format!(
            "target dictionary size must be at least 2, got {m}"
        )));
    }
    Ok(1.0 / (m - 1) as f64)
}

/// Arithmetic mean of the strict upper triangle.
pub fn mean_offdiagonal(k: &GramMatrix) -> f64 {
    mean_upper_power(k, 1.0)
}

/// Mean of the strict upper triangle of `K^t`.
fn mean_upper_power(k: &GramMatrix, t: f64) -> f64 {
    let n = k.len();
    let e = k.entries();
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += if t == 1.0 {
                e[(i, j)]
            } else {
                e[(i, j)].powf(t)
            };
        }
    }
    2.0 * sum / (n * n - n) as f64
}

/// Bandwidth `sigma^2` at which the mean off-diagonal entry of
/// `K1^(1/sigma^2)` equals `mu0`.
pub fn solve_bandwidth(k1: &GramMatrix, mu0: f64) -> Result<f64> {
    if k1.sigma2() != 1.0 {
        return Err(Error::Parameter(format!(
            "bandwidth search expects a unit-bandwidth Gram matrix, got sigma^2 = {}",
            k1.sigma2()
        )));
    }
    if k1.len() < 2 {
        return Err(Error::Parameter(
            "bandwidth search needs at least 2 bands".into(),
        ));
    }
    if !(mu0 > 0.0 && mu0 < 1.0) {
        return Err(Error::Parameter(format!(
            "coherence threshold must be in (0, 1), got {mu0}"
        )));
    }
    let n = k1.len();
    let informative = (0..n).any(|i| {
        ((i + 1)..n).any(|j| {
            let v = k1.get(i, j);
            v > 0.0 && v < 1.0
        })
    });
    if !informative {
        return Err(Error::Parameter(
            "every off-diagonal Gram entry is 0 or 1; the mean does not depend on the bandwidth"
                .into(),
        ));
    }

    // zero entries contribute nothing for t > 0
    let logs: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| k1.get(i, j))
        .filter(|&v| v > 0.0)
        .map(f64::ln)
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    let f = |t: f64| logs.iter().map(|&lv| (t * lv).exp()).sum::<f64>() / pairs - mu0;
    let mut best = (f64::INFINITY, f64::NAN); // (|f|, t)
    let track = |t: f64, v: f64, best: &mut (f64, f64)| {
        if v.abs() < best.0 {
            *best = (v.abs(), t);
        }
    };

    let (mut lo, mut hi) = INITIAL_BRACKET;
    let mut f_lo = f(lo);
    track(lo, f_lo, &mut best);
    let mut expansions = 0;
    while f_lo < 0.0 && expansions < MAX_BRACKET_EXPANSIONS && lo > f64::MIN_POSITIVE * 10.0 {
        hi = lo;
        lo /= 10.0;
        f_lo = f(lo);
        track(lo, f_lo, &mut best);
        expansions += 1;
    }
    let mut f_hi = f(hi);
    track(hi, f_hi, &mut best);
    expansions = 0;
    while f_hi > 0.0 && expansions < MAX_BRACKET_EXPANSIONS && hi < f64::MAX / 10.0 {
        lo = hi;
        f_lo = f_hi;
        hi *= 10.0;
        f_hi = f(hi);
        track(hi, f_hi, &mut best);
        expansions += 1;
    }
    if f_lo == 0.0 {
        return Ok(1.0 / lo);
    }
    if f_hi == 0.0 {
        return Ok(1.0 / hi);
    }
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(Error::Convergence {
            target: mu0,
            lo,
            hi,
            residual: best.0,
        });
    }

    // Geometric bisection until the bracket collapses to adjacent floats.
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        track(mid, v, &mut best);
        if v == 0.0 {
            break;
        } else if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 <= BANDWIDTH_TOLERANCE {
        Ok(1.0 / best.1)
    } else {
        Err(Error::Convergence {
            target: mu0,
            lo,
            hi,
            residual: best.0,
        })
    }
}

/// Threshold and bandwidth for target size `m`.
pub fn auto_params(k1: &GramMatrix, m: usize) -> Result<ParamSetting> {
    let mu0 = coherence_threshold(m)?;
    let sigma2 = solve_bandwidth(k1, mu0)?;
    let residual = (mean_upper_power(k1, 1.0 / sigma2) - mu0).abs();
    Ok(ParamSetting {
        target_m: m,
        mu0,
        sigma2,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{gram_matrix, gram_power, EndmemberMatrix};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_gram(n: usize, c: f64) -> GramMatrix {
        let e = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { c });
        GramMatrix::from_entries(e, 1.0).unwrap()
    }

    fn random_k1(l: usize, r: usize, seed: u64) -> GramMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = EndmemberMatrix::new(DMatrix::from_fn(l, r, |_, _| rng.random::<f64>())).unwrap();
        gram_matrix(&m, 1.0).unwrap()
    }

    #[test]
    fn thresholds() {
        assert_eq!(coherence_threshold(5).unwrap(), 0.25);
        assert_eq!(coherence_threshold(2).unwrap(), 1.0);
        assert!((coherence_threshold(30).unwrap() - 0.0345).abs() < 5e-5);
        assert!(matches!(coherence_threshold(1), Err(Error::Parameter(_))));
        assert!(matches!(coherence_threshold(0), Err(Error::Parameter(_))));
        for m in 2..200 {
            assert!(coherence_threshold(m + 1).unwrap() < coherence_threshold(m).unwrap());
        }
    }

    #[test]
    fn mean_of_constant_and_small_cases() {
        assert!((mean_offdiagonal(&constant_gram(7, 0.37)) - 0.37).abs() < 1e-15);
        let e = DMatrix::from_row_slice(3, 3, &[1.0, 0.1, 0.2, 0.1, 1.0, 0.3, 0.2, 0.3, 1.0]);
        let k = GramMatrix::from_entries(e, 1.0).unwrap();
        assert!((mean_offdiagonal(&k) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mean_matches_naive_double_loop() {
        let k = random_k1(30, 4, 2);
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..30 {
            for j in 0..30 {
                if i != j {
                    sum += k.get(i, j);
                    count += 1;
                }
            }
        }
        assert!((mean_offdiagonal(&k) - sum / count as f64).abs() < 1e-14);
    }

    #[test]
    fn closed_form_bandwidth() {
        let c = (-1.0f64).exp();
        let s = solve_bandwidth(&constant_gram(5, c), 0.25).unwrap();
        assert!((s - 1.0 / 4f64.ln()).abs() < 1e-10, "{s}");
        assert!((s - 0.72135).abs() < 1e-5);
        let s = solve_bandwidth(&constant_gram(5, 0.2), 0.2).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn random_bandwidth_residual_and_ordering() {
        let k1 = random_k1(50, 5, 7);
        let mut prev: Option<f64> = None;
        // mu0 decreasing: 0.25 then 1/9
        for mu0 in [0.25, 1.0 / 9.0] {
            let s = solve_bandwidth(&k1, mu0).unwrap();
            let got = mean_offdiagonal(&gram_power(&k1, s).unwrap());
            assert!((got - mu0).abs() <= BANDWIDTH_TOLERANCE, "{got} vs {mu0}");
            if let Some(p) = prev {
                assert!(s < p, "smaller threshold needs a narrower kernel");
            }
            prev = Some(s);
        }
    }

    #[test]
    fn mean_is_decreasing_in_inverse_bandwidth() {
        let k1 = random_k1(40, 3, 1);
        let grid: Vec<f64> = (0..20).map(|i| 10f64.powf(-2.0 + 0.2 * i as f64)).collect();
        let means: Vec<f64> = grid
            .iter()
            .map(|&s| mean_offdiagonal(&gram_power(&k1, s).unwrap()))
            .collect();
        // s increasing means 1/s decreasing, so the mean must increase strictly
        for w in means.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn solver_is_bitwise_deterministic() {
        let k1 = random_k1(25, 4, 3);
        let a = solve_bandwidth(&k1, 0.1).unwrap();
        let b = solve_bandwidth(&k1, 0.1).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn uninformative_gram_is_rejected() {
        let ones = constant_gram(4, 1.0);
        assert!(matches!(
            solve_bandwidth(&ones, 0.25),
            Err(Error::Parameter(_))
        ));
        let zeros = constant_gram(4, 0.0);
        assert!(matches!(
            solve_bandwidth(&zeros, 0.25),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn unreachable_target_is_a_convergence_error() {
        // half the pairs are exact duplicates: the mean never drops below 1/3
        let e = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 1.0, 1.0, 0.5, 0.5, 0.5, 1.0]);
        let k = GramMatrix::from_entries(e, 1.0).unwrap();
        assert!(matches!(
            solve_bandwidth(&k, 0.25),
            Err(Error::Convergence { .. })
        ));
        // mu0 = 1 (M = 2) is only approached as sigma^2 grows without bound
        assert!(matches!(
            solve_bandwidth(&constant_gram(3, 0.5), 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn auto_params_invariants() {
        let k1 = random_k1(40, 4, 8);
        let p = auto_params(&k1, 10).unwrap();
        assert_eq!(p.mu0, 1.0 / 9.0);
        assert!(p.residual <= BANDWIDTH_TOLERANCE);
    }
}
