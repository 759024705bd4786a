//! Standard normal distribution functions.
//!
//! `Φ` is evaluated through the complementary error function; the quantile uses
//! Acklam's rational approximation polished by one Halley step, which brings it to
//! roughly full double precision. Lower-tail ratios switch to a continued fraction
//! for the Mills ratio once the CDF stops being representable with full relative
//! accuracy.

use libm::erfc;

use crate::scalar::Real;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this standardized value the lower tail is handled via the Mills ratio.
const MILLS_SWITCH: f64 = -5.0;

pub fn std_pdf<T: Real>(z: T) -> T {
    T::lit(FRAC_1_SQRT_2PI) * (-(z * z) / T::lit(2.0)).exp()
}

pub fn std_log_pdf<T: Real>(z: T) -> T {
    -T::lit(LN_SQRT_2PI) - z * z / T::lit(2.0)
}

/// Φ(z).
pub fn std_cdf<T: Real>(z: T) -> T {
    let z = z.to_f64_lossy();
    T::lit(phi_cdf(z))
}

fn phi_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper-tail Mills ratio `(1 − Φ(x)) / φ(x)` for `x ≥ 0`, by Laplace's continued fraction.
fn upper_mills(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < -MILLS_SWITCH {
        return phi_cdf(-x) / (FRAC_1_SQRT_2PI * (-0.5 * x * x).exp());
    }
    let mut tail = 0.0;
    for k in (1..=80).rev() {
        tail = k as f64 / (x + tail);
    }
    1.0 / (x + tail)
}

/// ln Φ(z), accurate far into the lower tail.
pub fn std_log_cdf<T: Real>(z: T) -> T {
    let z = z.to_f64_lossy();
    let v = if z < MILLS_SWITCH {
        -LN_SQRT_2PI - 0.5 * z * z + upper_mills(-z).ln()
    } else {
        phi_cdf(z).ln()
    };
    T::lit(v)
}

/// Inverse Mills ratio `φ(z) / Φ(z)` without forming the ratio of two underflowing numbers.
pub fn lower_hazard<T: Real>(z: T) -> T {
    let z = z.to_f64_lossy();
    let v = if z < MILLS_SWITCH {
        1.0 / upper_mills(-z)
    } else {
        FRAC_1_SQRT_2PI * (-0.5 * z * z).exp() / phi_cdf(z)
    };
    T::lit(v)
}

/// Φ⁻¹(p) for `p` in (0, 1); returns ∓∞ at the endpoints.
pub fn std_quantile<T: Real>(p: T) -> T {
    T::lit(quantile_f64(p.to_f64_lossy()))
}

fn quantile_f64(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement on the side with the smaller tail.
    let (e, xx) = if x <= 0.0 {
        (phi_cdf(x) - p, x)
    } else {
        (-(phi_cdf(-x) - (1.0 - p)), x)
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * xx * xx).exp();
    xx - u / (1.0 + 0.5 * xx * u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cdf_reference_values() {
        assert!(close(std_cdf(0.0_f64), 0.5, 1e-15));
        assert!(close(std_cdf(-2.0_f64), 0.022_750_131_948_179_2, 1e-15));
        assert!(close(std_cdf(-3.0_f64), 0.001_349_898_031_630_094_6, 1e-16));
        assert!(close(std_cdf(1.96_f64), 0.975_002_104_851_780, 1e-14));
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-300, 1e-12, 1e-5, 0.02, 0.2, 0.25, 1.0 / 3.0, 0.5, 0.9, 0.999_999] {
            let z: f64 = std_quantile(p);
            let back: f64 = std_cdf(z);
            assert!((back - p).abs() <= 1e-14 * p.max(1e-3), "p={p} z={z} back={back}");
        }
        assert!(close(std_quantile(0.2_f64), -0.841_621_233_572_914_4, 1e-13));
    }

    #[test]
    fn log_cdf_and_hazard_are_continuous_at_switch() {
        let eps = 1e-9;
        let below: f64 = std_log_cdf(MILLS_SWITCH - eps);
        let above: f64 = std_log_cdf(MILLS_SWITCH + eps);
        assert!((below - above).abs() < 1e-7);
        let hb: f64 = lower_hazard(MILLS_SWITCH - eps);
        let ha: f64 = lower_hazard(MILLS_SWITCH + eps);
        assert!((hb - ha).abs() < 1e-7);
        // Far tail: φ/Φ ~ -z
        let h: f64 = lower_hazard(-60.0);
        assert!((h - 60.0).abs() < 0.02);
    }
}
