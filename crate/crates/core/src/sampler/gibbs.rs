//! Exact conditional draws for hierarchy means.
//!
//! Country effects have t4 priors around their region mean. Each t4 is written as a
//! normal with a latent variance `s ~ IG(ν/2, ν τ²/2)`; drawing `s` given the current
//! values and then the mean given `s` leaves the marginal conditional of the mean
//! invariant, so the latent variances are discarded after each update.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::model::{HierarchyConfig, ModelContext, ModelState, T_DF};

/// Conditional mean and variance of a normal location given children
/// `y_i ~ N(μ, v_i)` and an optional `N(prior_mean, prior_var)` prior (flat otherwise).
pub fn normal_mean_conditional(children: &[f64], child_vars: &[f64], prior: Option<(f64, f64)>) -> (f64, f64) {
    let mut precision = 0.0;
    let mut weighted = 0.0;
    for (y, v) in children.iter().zip(child_vars) {
        precision += 1.0 / v;
        weighted += y / v;
    }
    if let Some((m, v)) = prior {
        precision += 1.0 / v;
        weighted += m / v;
    }
    (weighted / precision, 1.0 / precision)
}

/// Latent variance of a t prior given the deviation `diff` from its location:
/// `IG((ν + 1)/2, (ν scale² + diff²)/2)`.
pub fn draw_t_latent_variance<R: Rng + ?Sized>(diff: f64, scale: f64, df: f64, rng: &mut R) -> f64 {
    let shape = (df + 1.0) / 2.0;
    let rate = (df * scale * scale + diff * diff) / 2.0;
    let g = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    rate / g
}

/// Exact draw of a standard Student-t variate.
pub fn draw_t<R: Rng + ?Sized>(df: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let g = Gamma::new(df / 2.0, 2.0 / df).expect("positive shape").sample(rng);
    z / g.sqrt()
}

/// Conditions independent normal draws `y_m` with variances `v_m` on `Σ y = 0`.
pub fn condition_sum_zero(draws: &mut [f64], vars: &[f64]) {
    let total: f64 = draws.iter().sum();
    let vsum: f64 = vars.iter().sum();
    for (y, v) in draws.iter_mut().zip(vars) {
        *y -= v / vsum * total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HierarchyLevel {
    Region,
    Global,
}

/// Per-level draws of one family (δ, φ, γ, ρ or a main effect) before they are written.
struct LevelDraw {
    values: Vec<f64>,
    vars: Vec<f64>,
}

fn draw_region_family<R: Rng + ?Sized>(
    hier: &HierarchyConfig,
    country: &[f64],
    global: f64,
    tau_c: f64,
    tau_r: f64,
    region: &[f64],
    rng: &mut R,
) -> LevelDraw {
    let mut values = Vec::with_capacity(region.len());
    let mut vars = Vec::with_capacity(region.len());
    let mut ys = Vec::new();
    let mut vs = Vec::new();
    for (k, &current) in region.iter().enumerate() {
        ys.clear();
        vs.clear();
        for j in hier.countries_in_region(k) {
            ys.push(country[j]);
            vs.push(draw_t_latent_variance(country[j] - current, tau_c, T_DF, rng));
        }
        let (mean, var) = normal_mean_conditional(&ys, &vs, Some((global, tau_r * tau_r)));
        let z: f64 = rng.sample(StandardNormal);
        values.push(mean + var.sqrt() * z);
        vars.push(var);
    }
    LevelDraw { values, vars }
}

fn draw_global_family<R: Rng + ?Sized>(region: &[f64], tau_r: f64, rng: &mut R) -> (f64, f64) {
    let vars = vec![tau_r * tau_r; region.len()];
    let (mean, var) = normal_mean_conditional(region, &vars, None);
    let z: f64 = rng.sample(StandardNormal);
    (mean + var.sqrt() * z, var)
}

/// Exact conditional update of every region-level or global mean (δ, φ, stratum γ/ρ and
/// main effects). With main effects, component contrasts are drawn jointly over
/// components conditional on summing to zero.
pub fn gibbs_update_hierarchy<R: Rng + ?Sized>(
    level: HierarchyLevel,
    state: &mut ModelState,
    ctx: &ModelContext,
    rng: &mut R,
) {
    let hier = &ctx.hier;
    let zero_sum = state.effects.main.is_some();
    let n_m = state.effects.components.len();
    let n_regions = hier.n_regions();

    // δ and φ, possibly coupled across components
    for family in 0..2 {
        match level {
            HierarchyLevel::Region => {
                let draws: Vec<LevelDraw> = (0..n_m)
                    .map(|m| {
                        let c = &state.effects.components[m];
                        let h = &state.hyper.components[m];
                        if family == 0 {
                            draw_region_family(
                                hier,
                                &c.delta_c,
                                c.delta_g,
                                h.tau_delta_c,
                                h.tau_delta_r,
                                &c.delta_r,
                                rng,
                            )
                        } else {
                            draw_region_family(hier, &c.phi_c, c.phi_g, h.tau_phi_c, h.tau_phi_r, &c.phi_r, rng)
                        }
                    })
                    .collect();
                for k in 0..n_regions {
                    let mut ys: Vec<f64> = draws.iter().map(|d| d.values[k]).collect();
                    if zero_sum {
                        let vs: Vec<f64> = draws.iter().map(|d| d.vars[k]).collect();
                        condition_sum_zero(&mut ys, &vs);
                    }
                    for (m, y) in ys.into_iter().enumerate() {
                        let c = &mut state.effects.components[m];
                        if family == 0 {
                            c.delta_r[k] = y;
                        } else {
                            c.phi_r[k] = y;
                        }
                    }
                }
            }
            HierarchyLevel::Global => {
                let mut ys = Vec::with_capacity(n_m);
                let mut vs = Vec::with_capacity(n_m);
                for m in 0..n_m {
                    let c = &state.effects.components[m];
                    let h = &state.hyper.components[m];
                    let (y, v) = if family == 0 {
                        draw_global_family(&c.delta_r, h.tau_delta_r, rng)
                    } else {
                        draw_global_family(&c.phi_r, h.tau_phi_r, rng)
                    };
                    ys.push(y);
                    vs.push(v);
                }
                if zero_sum {
                    condition_sum_zero(&mut ys, &vs);
                }
                for (m, y) in ys.into_iter().enumerate() {
                    let c = &mut state.effects.components[m];
                    if family == 0 {
                        c.delta_g = y;
                    } else {
                        c.phi_g = y;
                    }
                }
            }
        }
    }

    // stratum effects, independent per component
    for m in 0..n_m {
        let Some(sh) = state.hyper.components[m].strata.clone() else {
            continue;
        };
        let Some(s) = state.effects.components[m].strata.as_mut() else {
            continue;
        };
        match level {
            HierarchyLevel::Region => {
                s.gamma_r = draw_region_family(
                    hier,
                    &s.gamma_c,
                    s.gamma_g,
                    sh.tau_gamma_c,
                    sh.tau_gamma_r,
                    &s.gamma_r,
                    rng,
                )
                .values;
                s.rho_r = draw_region_family(hier, &s.rho_c, s.rho_g, sh.tau_rho_c, sh.tau_rho_r, &s.rho_r, rng).values;
            }
            HierarchyLevel::Global => {
                s.gamma_g = draw_global_family(&s.gamma_r, sh.tau_gamma_r, rng).0;
                s.rho_g = draw_global_family(&s.rho_r, sh.tau_rho_r, rng).0;
            }
        }
    }

    if let (Some(e), Some(h)) = (state.effects.main.as_mut(), state.hyper.main.clone()) {
        match level {
            HierarchyLevel::Region => {
                e.delta0_r = draw_region_family(
                    hier,
                    &e.delta0_c,
                    e.delta0_g,
                    h.tau_delta0_c,
                    h.tau_delta0_r,
                    &e.delta0_r,
                    rng,
                )
                .values;
                e.phi0_r =
                    draw_region_family(hier, &e.phi0_c, e.phi0_g, h.tau_phi0_c, h.tau_phi0_r, &e.phi0_r, rng).values;
            }
            HierarchyLevel::Global => {
                e.delta0_g = draw_global_family(&e.delta0_r, h.tau_delta0_r, rng).0;
                e.phi0_g = draw_global_family(&e.phi0_r, h.tau_phi0_r, rng).0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn flat_prior_single_child() {
        let (m, v) = normal_mean_conditional(&[1.7], &[0.3], None);
        assert_eq!(m, 1.7);
        assert!((v - 0.3).abs() < 1e-15);
        // prior variance → ∞ approaches the flat limit
        let (m, _) = normal_mean_conditional(&[1.7], &[0.3], Some((-5.0, 1e12)));
        assert!((m - 1.7).abs() < 1e-9);
    }

    #[test]
    fn precision_weighted_average() {
        let ys = [0.5, -1.0, 2.0, 0.1];
        let vs = [0.2, 1.0, 4.0, 0.5];
        let (m, v) = normal_mean_conditional(&ys, &vs, Some((0.3, 2.0)));
        // oracle: expand the quadratic form in μ and read off its coefficients
        let a: f64 = vs.iter().map(|v| 1.0 / v).sum::<f64>() + 0.5;
        let b: f64 = ys.iter().zip(&vs).map(|(y, v)| y / v).sum::<f64>() + 0.3 / 2.0;
        assert!((m - b / a).abs() < 1e-14);
        assert!((v - 1.0 / a).abs() < 1e-14);
    }

    #[test]
    fn latent_variance_mixture_is_t4() {
        // s ~ IG(ν/2, ν/2), x | s ~ N(0, s) has a t4 marginal: Var = ν/(ν − 2) = 2
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200_000;
        let mut sum2 = 0.0;
        let mut tail = 0;
        for _ in 0..n {
            let x = draw_t(4.0, &mut rng);
            sum2 += x * x;
            if x.abs() > 2.776_445_105_197_793 {
                tail += 1;
            }
        }
        assert!((sum2 / n as f64 - 2.0).abs() < 0.1);
        // two-sided 5% quantile of t4
        assert!((tail as f64 / n as f64 - 0.05).abs() < 0.003);
    }

    #[test]
    fn conditional_draws_match_analytic_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ys = [0.4, 1.1, -0.2];
        let vs = [0.5, 0.25, 1.0];
        let (m, v) = normal_mean_conditional(&ys, &vs, Some((0.0, 1.0)));
        let n = 50_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - m).abs() < 3.0 * (v / n as f64).sqrt());
        assert!((var - v).abs() < 3.0 * v * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn sum_zero_conditioning() {
        let mut y = vec![0.3, -0.1, 0.5];
        let v = [1.0, 2.0, 0.5];
        condition_sum_zero(&mut y, &v);
        assert!(y.iter().sum::<f64>().abs() < 1e-15);
    }
}
