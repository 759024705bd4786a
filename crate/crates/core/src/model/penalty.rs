//! Second-order random-walk structure on yearly effect vectors.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `DᵀD` for the `(T−2)×T` second-difference operator `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix<T> {
    n: usize,
    entries: Vec<T>,
}

pub fn build_penalty<T: Real>(n: usize) -> Result<PenaltyMatrix<T>> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "second-difference penalty needs at least 3 time points, got {n}"
        )));
    }
    // Accumulate in integers, then convert: every entry is exact.
    let mut ints = vec![0_i64; n * n];
    let stencil = [1_i64, -2, 1];
    for row in 0..n - 2 {
        for (a, &ca) in stencil.iter().enumerate() {
            for (b, &cb) in stencil.iter().enumerate() {
                ints[(row + a) * n + row + b] += ca * cb;
            }
        }
    }
    Ok(PenaltyMatrix {
        n,
        entries: ints.into_iter().map(|v| T::lit(v as f64)).collect(),
    })
}

impl<T: Real> PenaltyMatrix<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.n + j]
    }

    pub fn rank(&self) -> usize {
        self.n - 2
    }

    pub fn apply(&self, u: &[T]) -> Vec<T> {
        assert_eq!(u.len(), self.n);
        (0..self.n)
            .map(|i| {
                self.entries[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(u)
                    .map(|(&p, &x)| p * x)
                    .sum()
            })
            .collect()
    }

    /// `uᵀ P u`
    pub fn quad_form(&self, u: &[T]) -> T {
        self.apply(u).iter().zip(u).map(|(&a, &b)| a * b).sum()
    }
}

/// Σ (u[t+1] − 2u[t] + u[t−1])², equal to `uᵀPu` without forming `P`.
pub fn second_difference_energy<T: Real>(u: &[T]) -> T {
    u.windows(3)
        .map(|w| {
            let d = w[2] - T::lit(2.0) * w[1] + w[0];
            d * d
        })
        .sum()
}

/// Removes the constant and linear-in-time parts of `u`.
pub fn project_u<T: Real>(u: &[T]) -> Vec<T> {
    let mut out = u.to_vec();
    project_u_in_place(&mut out);
    out
}

pub fn project_u_in_place<T: Real>(u: &mut [T]) {
    let n = u.len();
    if n == 0 {
        return;
    }
    let nf = T::lit(n as f64);
    let t_bar = T::lit((n as f64 - 1.0) / 2.0);
    let mean = u.iter().copied().sum::<T>() / nf;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (i, &x) in u.iter().enumerate() {
        let dt = T::lit(i as f64) - t_bar;
        sxy = sxy + dt * (x - mean);
        sxx = sxx + dt * dt;
    }
    let slope = if sxx > T::zero() { sxy / sxx } else { T::zero() };
    for (i, x) in u.iter_mut().enumerate() {
        *x = *x - mean - slope * (T::lit(i as f64) - t_bar);
    }
}

/// Mean and least-squares slope (per index step) of `u`.
pub fn mean_and_slope(u: &[f64]) -> (f64, f64) {
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    let t_bar = (n - 1.0) / 2.0;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &x) in u.iter().enumerate() {
        let dt = i as f64 - t_bar;
        sxy += dt * (x - mean);
        sxx += dt * dt;
    }
    (mean, if sxx > 0.0 { sxy / sxx } else { 0.0 })
}

/// Exact draws from the proper part of the RW2 prior with precision `λP`.
#[derive(Debug, Clone)]
pub struct Rw2Sampler {
    n: usize,
    /// (eigenvalue, eigenvector) pairs spanning the non-null space of `P`.
    modes: Vec<(f64, Vec<f64>)>,
}

impl Rw2Sampler {
    pub fn new(n: usize) -> Result<Self> {
        let p = build_penalty::<f64>(n)?;
        let m = DMatrix::from_fn(n, n, |i, j| p.get(i, j));
        let eig = SymmetricEigen::new(m);
        let mut modes: Vec<(f64, Vec<f64>)> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 1e-9)
            .map(|(k, &e)| (e, eig.eigenvectors.column(k).iter().copied().collect()))
            .collect();
        modes.sort_by(|a, b| a.0.total_cmp(&b.0));
        if modes.len() != n - 2 {
            return Err(Error::numeric(
                "rw2 eigendecomposition",
                format!("expected rank {}, found {}", n - 2, modes.len()),
            ));
        }
        Ok(Self { n, modes })
    }

    pub fn draw<R: Rng + ?Sized>(&self, lambda: f64, rng: &mut R) -> Vec<f64> {
        let mut u = vec![0.0; self.n];
        for (e, v) in &self.modes {
            let z: f64 = rng.sample(StandardNormal);
            let s = z / (lambda * e).sqrt();
            for (ui, vi) in u.iter_mut().zip(v) {
                *ui += s * vi;
            }
        }
        project_u_in_place(&mut u);
        u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_point_penalty() {
        let p = build_penalty::<f64>(3).unwrap();
        let expect = [[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]];
        for (i, row) in expect.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(p.get(i, j), v);
            }
        }
        assert!(matches!(build_penalty::<f64>(2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn null_space_is_exact() {
        for n in 3..40 {
            let p = build_penalty::<f64>(n).unwrap();
            let ones = vec![1.0; n];
            let lin: Vec<f64> = (1..=n).map(|t| t as f64).collect();
            assert!(p.apply(&ones).iter().all(|&v| v == 0.0));
            assert!(p.apply(&lin).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_examples() {
        let lin: Vec<f64> = (0..7).map(|t| 3.0 - 0.5 * t as f64).collect();
        assert!(project_u(&lin).iter().all(|v| v.abs() < 1e-14));

        let sq: Vec<f64> = (1..=5).map(|t| (t * t) as f64).collect();
        let r = project_u(&sq);
        let (mean, slope) = mean_and_slope(&r);
        assert!(mean.abs() < 1e-12 && slope.abs() < 1e-12);
        // least-squares residual of t² on {1, t} for t = 1..5: (2, -1, -2, -1, 2)
        for (a, b) in r.iter().zip([2.0, -1.0, -2.0, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = project_u(&r);
        for (a, b) in r.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rw2_draws_are_constrained_with_expected_energy() {
        let n = 12;
        let s = Rw2Sampler::new(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lambda = 4.0;
        let reps = 4000;
        let mut energy = 0.0;
        for _ in 0..reps {
            let u = s.draw(lambda, &mut rng);
            let (m, sl) = mean_and_slope(&u);
            assert!(m.abs() < 1e-10 && sl.abs() < 1e-10);
            energy += lambda * second_difference_energy(&u);
        }
        // λ uᵀPu ~ χ²_{n-2}
        let avg = energy / reps as f64;
        assert!((avg - (n - 2) as f64).abs() < 0.3, "avg {avg}");
    }
}
