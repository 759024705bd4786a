//! Log-adaptive random-walk Metropolis with batch-wise covariance learning.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    /// Target acceptance for blocks of dimension at most `small_dim`.
    pub target_small: f64,
    /// Target acceptance for larger blocks.
    pub target_large: f64,
    pub small_dim: usize,
    /// Proposals per adaptation batch.
    pub batch_len: usize,
    /// Step size after `b` batches is `1 / b^decay`.
    pub decay: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            target_small: 0.44,
            target_large: 0.234,
            small_dim: 4,
            batch_len: 50,
            decay: 0.7,
        }
    }
}

impl AdaptationConfig {
    pub fn target_for(&self, dim: usize) -> f64 {
        if dim > self.small_dim {
            self.target_large
        } else {
            self.target_small
        }
    }
}

/// Proposal state of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    dim: usize,
    target: f64,
    batch_len: usize,
    decay: f64,
    log_scale: f64,
    /// Learn the proposal covariance; otherwise only the scale adapts.
    learn_cov: bool,
    cov: Vec<f64>,
    chol: Vec<f64>,
    batches: u64,
    frozen: bool,
    batch_n: usize,
    batch_acc: usize,
    batch_mean: Vec<f64>,
    batch_m2: Vec<f64>,
    proposed: u64,
    accepted: u64,
}

impl Adapter {
    /// Starts from `N(0, (2.38² / d) · diag(init_sd²))`.
    pub fn new(init_sd: &[f64], learn_cov: bool, config: &AdaptationConfig) -> Self {
        let dim = init_sd.len();
        let mut cov = vec![0.0; dim * dim];
        for (i, s) in init_sd.iter().enumerate() {
            cov[i * dim + i] = s * s;
        }
        let chol = cholesky(&cov, dim).expect("diagonal start is positive definite");
        Self {
            dim,
            target: config.target_for(dim),
            batch_len: config.batch_len.max(1),
            decay: config.decay,
            log_scale: (2.38 / (dim as f64).sqrt()).ln(),
            learn_cov,
            cov,
            chol,
            batches: 0,
            frozen: false,
            batch_n: 0,
            batch_acc: 0,
            batch_mean: vec![0.0; dim],
            batch_m2: vec![0.0; dim * dim],
            proposed: 0,
            accepted: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops adaptation and resets the acceptance counters.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.proposed = 0;
        self.accepted = 0;
    }

    /// Acceptance rate since creation, or since freezing.
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }

    /// Random-walk increment `scale · L z`.
    pub fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let s = self.scale();
        (0..self.dim)
            .map(|i| s * (0..=i).map(|k| self.chol[i * self.dim + k] * z[k]).sum::<f64>())
            .collect()
    }

    /// Records the outcome of one proposal and the block value after it.
    pub fn record(&mut self, accepted: bool, x: &[f64]) {
        self.proposed += 1;
        if accepted {
            self.accepted += 1;
        }
        if self.frozen {
            return;
        }
        self.batch_n += 1;
        if accepted {
            self.batch_acc += 1;
        }
        if self.learn_cov {
            // Welford update of the batch mean and scatter
            let n = self.batch_n as f64;
            let delta: Vec<f64> = x.iter().zip(&self.batch_mean).map(|(a, m)| a - m).collect();
            for (m, d) in self.batch_mean.iter_mut().zip(&delta) {
                *m += d / n;
            }
            for i in 0..self.dim {
                for j in 0..self.dim {
                    self.batch_m2[i * self.dim + j] += delta[i] * (x[j] - self.batch_mean[j]);
                }
            }
        }
        if self.batch_n == self.batch_len {
            self.end_batch();
        }
    }

    fn end_batch(&mut self) {
        self.batches += 1;
        let gamma = 1.0 / (self.batches as f64).powf(self.decay);
        let rate = self.batch_acc as f64 / self.batch_n as f64;
        self.log_scale += gamma * (rate - self.target);
        if self.learn_cov && self.batch_n > 1 {
            let n = self.batch_n as f64;
            let mut next: Vec<f64> = self
                .cov
                .iter()
                .zip(&self.batch_m2)
                .map(|(c, m2)| c + gamma * (m2 / (n - 1.0) - c))
                .collect();
            let trace: f64 = (0..self.dim).map(|i| next[i * self.dim + i]).sum();
            let ridge = 1e-10 * trace / self.dim as f64 + 1e-300;
            for i in 0..self.dim {
                next[i * self.dim + i] += ridge;
            }
            if let Some(l) = cholesky(&next, self.dim) {
                self.cov = next;
                self.chol = l;
            }
        }
        self.batch_n = 0;
        self.batch_acc = 0;
        self.batch_mean.iter_mut().for_each(|v| *v = 0.0);
        self.batch_m2.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn cholesky(cov: &[f64], dim: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(dim, dim, cov);
    let l = m.cholesky()?.l();
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            out[i * dim + j] = l[(i, j)];
        }
    }
    Some(out)
}

/// Outcome of one Metropolis step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub accepted: bool,
    /// Log target at the (possibly unchanged) current point.
    pub log_target: f64,
}

/// One adaptive random-walk Metropolis step on `x`.
///
/// `log_target` may return `-∞` for states outside the support; a NaN aborts with
/// `block` in the error.
pub fn adaptive_rw_update<R, F>(
    block: &str,
    x: &mut [f64],
    current: f64,
    mut log_target: F,
    adapter: &mut Adapter,
    rng: &mut R,
) -> Result<Step>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Result<f64>,
{
    adaptive_rw_update_projected(block, x, current, &mut log_target, |_| {}, adapter, rng)
}

/// As [`adaptive_rw_update`], with the increment passed through `project` (a linear
/// projection onto the block's constraint subspace) before it is applied.
pub fn adaptive_rw_update_projected<R, F, P>(
    block: &str,
    x: &mut [f64],
    current: f64,
    mut log_target: F,
    mut project: P,
    adapter: &mut Adapter,
    rng: &mut R,
) -> Result<Step>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Result<f64>,
    P: FnMut(&mut [f64]),
{
    if current.is_nan() {
        return Err(Error::numeric(
            format!("block {block}"),
            "log target is NaN at the current point",
        ));
    }
    let mut step = adapter.propose(rng);
    project(&mut step);
    let proposal: Vec<f64> = x.iter().zip(&step).map(|(a, d)| a + d).collect();
    let lp = log_target(&proposal)?;
    if lp.is_nan() {
        return Err(Error::numeric(
            format!("block {block}"),
            "log target is NaN at the proposal",
        ));
    }
    let log_u: f64 = rng.random::<f64>().ln();
    let accepted = lp > f64::NEG_INFINITY && log_u < lp - current;
    if accepted {
        x.copy_from_slice(&proposal);
    }
    adapter.record(accepted, x);
    Ok(Step {
        accepted,
        log_target: if accepted { lp } else { current },
    })
}

/// Sample mean and covariance of rows, used by tests and diagnostics.
pub fn sample_moments(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / (n - 1.0))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::sampler::mc_diagnostics;

    #[test]
    fn bivariate_normal_target() {
        let config = AdaptationConfig {
            target_small: 0.234,
            ..Default::default()
        };
        let mut adapter = Adapter::new(&[0.1, 0.1], true, &config);
        assert_eq!(adapter.target(), 0.234);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let log_target = |x: &[f64]| Ok(-0.5 * (x[0] * x[0] + x[1] * x[1]));
        let mut x = vec![3.0, -3.0];
        let mut lp = log_target(&x).unwrap();
        let (burn, keep) = (10_000, 50_000);
        let mut draws = Vec::with_capacity(keep);
        for it in 0..burn + keep {
            if it == burn {
                adapter.freeze();
            }
            lp = adaptive_rw_update("bvn", &mut x, lp, log_target, &mut adapter, &mut rng)
                .unwrap()
                .log_target;
            if it >= burn {
                draws.push(x.clone());
            }
        }
        let rate = adapter.acceptance_rate().unwrap();
        assert!((rate - 0.234).abs() < 0.05, "acceptance {rate}");
        for k in 0..2 {
            let trace: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let diag = mc_diagnostics(&trace).unwrap();
            let mean = trace.iter().sum::<f64>() / trace.len() as f64;
            assert!(mean.abs() < 3.0 * diag.mcse, "mean {mean} mcse {}", diag.mcse);
            // variance MCSE from the squared trace
            let sq: Vec<f64> = trace.iter().map(|v| v * v).collect();
            let dsq = mc_diagnostics(&sq).unwrap();
            let m2 = sq.iter().sum::<f64>() / sq.len() as f64;
            assert!(
                (m2 - 1.0).abs() < 3.0 * dsq.mcse,
                "second moment {m2} mcse {}",
                dsq.mcse
            );
        }
    }

    #[test]
    fn frozen_adapter_keeps_its_proposal() {
        let config = AdaptationConfig::default();
        let mut adapter = Adapter::new(&[1.0], false, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let log_target = |x: &[f64]| Ok(-0.5 * x[0] * x[0]);
        let mut x = vec![0.0];
        let mut lp = 0.0;
        for _ in 0..5000 {
            lp = adaptive_rw_update("n", &mut x, lp, log_target, &mut adapter, &mut rng)
                .unwrap()
                .log_target;
        }
        adapter.freeze();
        let scale = adapter.scale();
        let mut rates = Vec::new();
        for _ in 0..4 {
            let before = adapter.clone();
            let mut acc = 0;
            for _ in 0..10_000 {
                let s = adaptive_rw_update("n", &mut x, lp, log_target, &mut adapter, &mut rng).unwrap();
                lp = s.log_target;
                acc += s.accepted as usize;
            }
            assert_eq!(adapter.scale(), before.scale());
            rates.push(acc as f64 / 10_000.0);
        }
        assert_eq!(adapter.scale(), scale);
        let lo = rates.iter().cloned().fold(1.0, f64::min);
        let hi = rates.iter().cloned().fold(0.0, f64::max);
        assert!(hi - lo < 0.04, "{rates:?}");
    }

    #[test]
    fn nan_target_aborts_with_block_name() {
        let mut adapter = Adapter::new(&[1.0], false, &AdaptationConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = adaptive_rw_update("tau[2]", &mut [0.0], 0.0, |_| Ok(f64::NAN), &mut adapter, &mut rng).unwrap_err();
        assert!(err.to_string().contains("tau[2]"));
    }

    #[test]
    fn out_of_support_is_rejected() {
        let mut adapter = Adapter::new(&[1.0], false, &AdaptationConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = [0.5];
        for _ in 0..200 {
            let lp = if x[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY };
            adaptive_rw_update(
                "pos",
                &mut x,
                lp,
                |p| Ok(if p[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY }),
                &mut adapter,
                &mut rng,
            )
            .unwrap();
            assert!(x[0] > 0.0);
        }
    }
}
