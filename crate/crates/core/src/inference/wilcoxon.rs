use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::std_cdf;

/// Minimum number of pairs accepted by the signed-rank test.
pub const WILCOXON_MIN_PAIRS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of positive differences `a − b`.
    pub w_plus: f64,
    /// Pairs with a nonzero difference.
    pub n_used: usize,
    pub z: f64,
    pub p_value: f64,
}

/// Signed-rank statistic `W+` with zero differences dropped and average ranks for ties.
/// Also returns the tie term `Σ(t³ − t)` and the number of nonzero differences.
pub fn wilcoxon_statistic(a: &[f64], b: &[f64]) -> Result<(f64, f64, usize)> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("paired samples differ in length".into()));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("paired differences must be finite".into()));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut w_plus = 0.0;
    let mut ties = 0.0;
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j < d.len() && d[j].abs() == d[i].abs() {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        let t = (j - i) as f64;
        ties += t * t * t - t;
        w_plus += rank * d[i..j].iter().filter(|v| **v > 0.0).count() as f64;
        i = j;
    }
    Ok((w_plus, ties, d.len()))
}

/// Two-sided Wilcoxon signed-rank test of zero median difference, normal approximation
/// with tie correction. All-zero differences give `p = 1`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() < WILCOXON_MIN_PAIRS {
        return Err(Error::InvalidArgument(format!(
            "{} pairs; at least {WILCOXON_MIN_PAIRS} are needed",
            a.len()
        )));
    }
    let (w_plus, ties, n) = wilcoxon_statistic(a, b)?;
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus,
            n_used: 0,
            z: 0.0,
            p_value: 1.0,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    if !(var > 0.0) {
        return Ok(WilcoxonResult {
            w_plus,
            n_used: n,
            z: 0.0,
            p_value: 1.0,
        });
    }
    let z = (w_plus - mean) / var.sqrt();
    Ok(WilcoxonResult {
        w_plus,
        n_used: n,
        z,
        p_value: (2.0 * std_cdf(-z.abs())).min(1.0),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Exact two-sided p-value of `W+` for `n` untied nonzero differences by enumerating
    /// the null distribution of rank subsets.
    fn exact_p(w_plus: f64, n: usize) -> f64 {
        let max = n * (n + 1) / 2;
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for r in 1..=n {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let total = 2f64.powi(n as i32);
        let w = w_plus.round() as usize;
        let upper: f64 = counts[w.max(max - w)..].iter().sum::<f64>() / total;
        (2.0 * upper).min(1.0)
    }

    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
        d.iter()
            .filter(|v| **v > 0.0)
            .map(|v| {
                let less = d.iter().filter(|u| u.abs() < v.abs()).count() as f64;
                let equal = d.iter().filter(|u| u.abs() == v.abs()).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .sum()
    }

    #[test]
    fn identical_samples_give_p_one() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(wilcoxon_signed_rank(&a, &a).unwrap().p_value, 1.0);
    }

    #[test]
    fn all_positive_differences() {
        let a: Vec<f64> = (1..=20).map(|i| i as f64 * 0.37 + 1.0).collect();
        let b: Vec<f64> = (1..=20).map(|i| i as f64 * 0.1).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w_plus, 210.0);
        assert!(r.p_value < 1e-3);
        assert!(exact_p(r.w_plus, 20) < 1e-3);
    }

    #[test]
    fn statistic_matches_brute_force_and_exact_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.random_range(6..30);
            // rounding creates ties and zeros
            let a: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round()).collect();
            let b: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round()).collect();
            let (w, _, _) = wilcoxon_statistic(&a, &b).unwrap();
            assert_eq!(w, brute_force(&a, &b));
        }
        // untied continuous data: the normal approximation tracks the exact null
        for _ in 0..50 {
            let a: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..25).map(|_| rng.random::<f64>() + 0.1).collect();
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            assert!((r.p_value - exact_p(r.w_plus, 25)).abs() < 0.02);
        }
    }

    #[test]
    fn short_input_refused() {
        assert!(wilcoxon_signed_rank(&[1.0; 5], &[2.0; 5]).is_err());
    }
}
