use crate::error::{Error, Result};

/// Potential scale reduction factor of equal-length chains (between/within variance form).
/// Returns `+∞` when the within-chain variance is zero.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::InvalidArgument("at least two chains are required".into()));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument(
            "chains must have equal length of at least 2".into(),
        ));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let within = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    if !(within > 0.0) {
        return Ok(f64::INFINITY);
    }
    let grand = means.iter().sum::<f64>() / m as f64;
    let between_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let pooled = (nf - 1.0) / nf * within + between_over_n;
    Ok((pooled / within).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McDiagnostics {
    pub ess: f64,
    pub mcse: f64,
    pub sd: f64,
    /// The trace is constant; `ess` and `mcse` are not meaningful.
    pub degenerate: bool,
}

/// Effective sample size by the initial positive sequence estimator, and the MCSE of the
/// mean.
pub fn mc_diagnostics(trace: &[f64]) -> Result<McDiagnostics> {
    let n = trace.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "trace of length {n} is shorter than 10"
        )));
    }
    let nf = n as f64;
    let mean = trace.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = trace.iter().map(|v| v - mean).collect();
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / nf
    };
    let gamma0 = autocov(0);
    let sd = (gamma0 * nf / (nf - 1.0)).sqrt();
    if !(gamma0 > 0.0) {
        return Ok(McDiagnostics {
            ess: f64::NAN,
            mcse: 0.0,
            sd: 0.0,
            degenerate: true,
        });
    }
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = (autocov(2 * k) + autocov(2 * k + 1)) / gamma0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    let tau = tau.max(1.0 / nf);
    let ess = nf / tau;
    Ok(McDiagnostics {
        ess,
        mcse: sd / ess.sqrt(),
        sd,
        degenerate: false,
    })
}
