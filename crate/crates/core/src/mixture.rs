//! Finite normal mixtures with probit stick-breaking weights.
//!
//! Everything here is a pure function of immutable values and is generic over the
//! scalar type.

use crate::error::{Error, Result};
use crate::normal::{lower_hazard, std_cdf, std_log_pdf, std_pdf, std_quantile};
use crate::scalar::Real;

/// Shared component locations and scales of the mixture basis.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBasis<T> {
    thetas: Vec<T>,
    sigmas: Vec<T>,
    sigma_cap: T,
}

impl<T: Real> MixtureBasis<T> {
    /// Rejects unsorted locations, non-positive scales, and scales above `sigma_cap`.
    pub fn new(thetas: Vec<T>, sigmas: Vec<T>, sigma_cap: T) -> Result<Self> {
        if thetas.is_empty() || thetas.len() != sigmas.len() {
            return Err(Error::InvalidArgument(format!(
                "basis needs matching non-empty location/scale vectors (got {} and {})",
                thetas.len(),
                sigmas.len()
            )));
        }
        if !(sigma_cap > T::zero()) {
            return Err(Error::InvalidArgument("sigma cap must be positive".into()));
        }
        if thetas.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite component location".into()));
        }
        if let Some(i) = (1..thetas.len()).find(|&i| !(thetas[i - 1] < thetas[i])) {
            return Err(Error::InvalidArgument(format!(
                "component locations must be strictly increasing (index {i})"
            )));
        }
        if let Some(s) = sigmas.iter().find(|&&s| !(s > T::zero() && s <= sigma_cap)) {
            return Err(Error::InvalidArgument(format!(
                "component scale {s} outside (0, {sigma_cap}]"
            )));
        }
        Ok(Self {
            thetas,
            sigmas,
            sigma_cap,
        })
    }

    pub fn thetas(&self) -> &[T] {
        &self.thetas
    }

    pub fn sigmas(&self) -> &[T] {
        &self.sigmas
    }

    pub fn sigma_cap(&self) -> T {
        self.sigma_cap
    }

    /// Number of components (M + 1).
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// Mixture weights: a probability vector over the basis components.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T>(Vec<T>);

impl<T: Real> WeightVector<T> {
    pub fn new(w: Vec<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("empty weight vector".into()));
        }
        if let Some(x) = w.iter().find(|&&x| !(x >= T::zero() && x <= T::one())) {
            return Err(Error::InvalidArgument(format!("weight {x} outside [0, 1]")));
        }
        let total: T = w.iter().copied().sum();
        if (total - T::one()).abs() > Self::sum_tolerance(w.len()) {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        Ok(Self(w))
    }

    fn sum_tolerance(len: usize) -> T {
        T::lit(1e-12).max(T::epsilon() * T::lit(4.0 * len as f64))
    }

    pub(crate) fn from_raw(w: Vec<T>) -> Self {
        Self(w)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `share · self + (1 − share) · other`, the weights of a two-stratum population.
    pub fn blend(&self, other: &Self, share: T) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::InvalidArgument(
                "blending weight vectors of different length".into(),
            ));
        }
        if !(share >= T::zero() && share <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "population share {share} outside [0, 1]"
            )));
        }
        let rest = T::one() - share;
        Ok(Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| share * a + rest * b)
                .collect(),
        ))
    }
}

pub(crate) fn check_pair<T: Real>(basis: &MixtureBasis<T>, w: &WeightVector<T>) -> Result<()> {
    if basis.len() != w.len() {
        return Err(Error::InvalidArgument(format!(
            "basis has {} components but {} weights were given",
            basis.len(),
            w.len()
        )));
    }
    Ok(())
}

/// Probit stick-breaking: `M` scores to `M + 1` weights.
pub fn stick_break<T: Real>(alpha: &[T]) -> Result<WeightVector<T>> {
    if let Some(a) = alpha.iter().find(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite stick-breaking score {a}")));
    }
    let mut w = Vec::with_capacity(alpha.len() + 1);
    stick_break_into(alpha, &mut w);
    Ok(WeightVector(w))
}

/// Unchecked stick-breaking into a reusable buffer.
pub fn stick_break_into<T: Real>(alpha: &[T], out: &mut Vec<T>) {
    out.clear();
    let mut remaining = T::one();
    for &a in alpha {
        out.push(remaining * std_cdf(a));
        remaining = remaining * std_cdf(-a);
    }
    out.push(remaining);
}

/// Scores that reproduce a strictly positive weight vector under [`stick_break`].
pub fn inverse_stick_break<T: Real>(w: &WeightVector<T>) -> Result<Vec<T>> {
    let w = w.as_slice();
    if let Some(x) = w.iter().find(|&&x| !(x > T::zero())) {
        return Err(Error::Domain(format!("weight {x} is not strictly positive")));
    }
    // suffix[m] = Σ_{k ≥ m} w_k
    let mut suffix = vec![T::zero(); w.len() + 1];
    for m in (0..w.len()).rev() {
        suffix[m] = suffix[m + 1] + w[m];
    }
    let half = T::lit(0.5);
    Ok((0..w.len() - 1)
        .map(|m| {
            let take = w[m] / suffix[m];
            if take <= half {
                std_quantile(take)
            } else {
                -std_quantile(suffix[m + 1] / suffix[m])
            }
        })
        .collect())
}

/// Log density of the mixture at `z`, via log-sum-exp.
pub fn mixture_logpdf<T: Real>(z: T, basis: &MixtureBasis<T>, w: &WeightVector<T>) -> Result<T> {
    check_pair(basis, w)?;
    Ok(logpdf_unchecked(z, basis.thetas(), basis.sigmas(), w.as_slice()))
}

pub(crate) fn logpdf_unchecked<T: Real>(z: T, thetas: &[T], sigmas: &[T], w: &[T]) -> T {
    let mut max = T::neg_infinity();
    let terms: Vec<T> = thetas
        .iter()
        .zip(sigmas)
        .zip(w)
        .map(|((&th, &s), &wk)| {
            let t = if wk > T::zero() {
                wk.ln() + std_log_pdf((z - th) / s) - s.ln()
            } else {
                T::neg_infinity()
            };
            max = max.max(t);
            t
        })
        .collect();
    if max == T::neg_infinity() {
        return max;
    }
    let acc: T = terms.iter().map(|&t| (t - max).exp()).sum();
    max + acc.ln()
}

/// P(Z ≤ x) under the mixture.
pub fn mixture_cdf<T: Real>(x: T, basis: &MixtureBasis<T>, w: &WeightVector<T>) -> Result<T> {
    check_pair(basis, w)?;
    let p: T = basis
        .thetas()
        .iter()
        .zip(basis.sigmas())
        .zip(w.as_slice())
        .map(|((&th, &s), &wk)| wk * std_cdf((x - th) / s))
        .sum();
    Ok(p.max(T::zero()).min(T::one()))
}

/// Mixture mean and variance.
pub fn mixture_moments<T: Real>(basis: &MixtureBasis<T>, w: &WeightVector<T>) -> Result<(T, T)> {
    check_pair(basis, w)?;
    let mut mean = T::zero();
    let mut second = T::zero();
    for ((&th, &s), &wk) in basis.thetas().iter().zip(basis.sigmas()).zip(w.as_slice()) {
        mean = mean + wk * th;
        second = second + wk * (th * th + s * s);
    }
    // Σ w (θ_c − θ)² + Σ w σ² avoids cancellation in E[y²] − θ².
    let spread: T = basis
        .thetas()
        .iter()
        .zip(basis.sigmas())
        .zip(w.as_slice())
        .map(|((&th, &s), &wk)| wk * ((th - mean) * (th - mean) + s * s))
        .sum();
    debug_assert!((spread - (second - mean * mean)).abs() <= T::lit(1e-6) * second.abs().max(T::one()));
    Ok((mean, spread))
}

/// Mean of a normal component truncated to `(−∞, x]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedMean<T> {
    pub value: T,
    /// The component CDF at `x` underflowed; `value` comes from the Mills-ratio asymptotics.
    pub underflow: bool,
}

pub fn truncated_component_mean<T: Real>(theta: T, sigma: T, x: T) -> Result<TruncatedMean<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "component scale {sigma} must be positive"
        )));
    }
    if x == T::infinity() {
        return Ok(TruncatedMean {
            value: theta,
            underflow: false,
        });
    }
    let z = (x - theta) / sigma;
    let underflow = std_cdf(z) == T::zero();
    let value = (theta - sigma * lower_hazard(z)).min(x);
    Ok(TruncatedMean { value, underflow })
}

/// Lower-tail mass `p_x` and partial first moment `∫_{−∞}^x y f(y) dy` of the mixture.
pub(crate) fn tail_terms<T: Real>(thetas: &[T], sigmas: &[T], w: &[T], x: T) -> (T, T) {
    let mut p = T::zero();
    let mut first = T::zero();
    for ((&th, &s), &wk) in thetas.iter().zip(sigmas).zip(w) {
        let z = (x - th) / s;
        let f = std_cdf(z);
        p = p + wk * f;
        // F θ̃ = θ F − σ φ(z)
        first = first + wk * (th * f - s * std_pdf(z));
    }
    (p, first)
}

/// Floor below which tail probabilities are treated as degenerate.
pub const TAIL_FLOOR: f64 = 1e-12;

/// Mean of the mixture truncated to `(−∞, x]`.
pub fn truncated_mixture_mean<T: Real>(basis: &MixtureBasis<T>, w: &WeightVector<T>, x: T) -> Result<T> {
    check_pair(basis, w)?;
    if x == T::infinity() {
        return Ok(mixture_moments(basis, w)?.0);
    }
    let p = mixture_cdf(x, basis, w)?;
    if p < T::lit(TAIL_FLOOR) {
        return Err(Error::DegenerateTail {
            cutoff: x.to_f64_lossy(),
            prob: p.to_f64_lossy(),
        });
    }
    let mut acc = T::zero();
    for ((&th, &s), &wk) in basis.thetas().iter().zip(basis.sigmas()).zip(w.as_slice()) {
        if wk == T::zero() {
            continue;
        }
        let f = std_cdf((x - th) / s);
        if f == T::zero() {
            continue;
        }
        acc = acc + wk * f * truncated_component_mean(th, s, x)?.value;
    }
    Ok((acc / p).min(x))
}
