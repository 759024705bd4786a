//! Single-chain Metropolis-within-Gibbs driver and multi-chain orchestration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adapt::{adaptive_rw_update_projected, AdaptationConfig, Adapter};
use super::blocks::{build_blocks, lambda, Affected, BlockGroup, BlockId, Level};
use super::diagnostics::gelman_rubin;
use super::gibbs::{draw_t, gibbs_update_hierarchy, HierarchyLevel};
use crate::error::{Error, Result};
use crate::likelihood::{MicroTable, PreparedStudies, Statistic};
use crate::mixture::inverse_stick_break;
use crate::model::{
    apply_zero_sum, check_constraints, project_u_in_place, weights_into, ModelContext, ModelState, Rw2Sampler, Stratum,
    WeightScratch, T_DF,
};
use crate::normal::std_cdf;
use crate::Weights;

/// First iteration at which a block group is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStart {
    pub block: BlockGroup,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Total iterations per chain, burn-in included.
    pub n_iter: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Groups not listed start at iteration 0.
    pub phase_schedule: Vec<PhaseStart>,
    pub adaptation: AdaptationConfig,
    /// Keep the mixture basis at its initial value.
    pub fix_basis: bool,
    /// Switch the likelihood off to sample from the prior.
    pub use_likelihood: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::with_iterations(30_000, 22_000, 30)
    }
}

impl SamplerConfig {
    /// Default settings for the given run length, with phases scaled to the burn-in.
    pub fn with_iterations(n_iter: usize, burnin: usize, thin: usize) -> Self {
        Self {
            n_chains: 5,
            n_iter,
            burnin,
            thin,
            seed: 1,
            phase_schedule: Self::default_phases(burnin),
            adaptation: AdaptationConfig::default(),
            fix_basis: false,
            use_likelihood: true,
        }
    }

    /// Study effects from the start, then basis and country effects, then hyperparameters.
    pub fn default_phases(burnin: usize) -> Vec<PhaseStart> {
        vec![
            PhaseStart {
                block: BlockGroup::StudyEffects,
                start: 0,
            },
            PhaseStart {
                block: BlockGroup::Basis,
                start: burnin / 10,
            },
            PhaseStart {
                block: BlockGroup::CountryEffects,
                start: burnin / 10,
            },
            PhaseStart {
                block: BlockGroup::Hierarchy,
                start: burnin / 5,
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be at least 1".into()));
        }
        if self.burnin >= self.n_iter {
            return Err(Error::Config(format!(
                "burnin ({}) must be smaller than n_iter ({})",
                self.burnin, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.phase_schedule.windows(2).any(|w| w[1].start < w[0].start) {
            return Err(Error::Config("phase starts must be nondecreasing".into()));
        }
        Ok(())
    }

    fn phase_start(&self, group: BlockGroup) -> usize {
        self.phase_schedule
            .iter()
            .find(|p| p.block == group)
            .map_or(0, |p| p.start)
    }

    /// Number of retained draws per chain.
    pub fn n_retained(&self) -> usize {
        (self.n_iter - self.burnin) / self.thin
    }
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub chain: usize,
    /// Iteration index of each retained draw.
    pub iterations: Vec<usize>,
    /// Flattened parameter vectors, one per retained draw.
    pub params: Vec<Vec<f64>>,
    /// Derived functionals, one vector per retained draw.
    pub functionals: Vec<Vec<f64>>,
    /// Post-adaptation acceptance rate averaged over blocks of each kind.
    pub acceptance: BTreeMap<String, f64>,
}

/// Draws of every chain plus what is needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub param_names: Vec<String>,
    pub functional_names: Vec<String>,
    pub context: ModelContext,
    pub config: SamplerConfig,
    pub chains: Vec<ChainTrace>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.params.len()).sum()
    }

    pub fn functional_index(&self, name: &str) -> Result<usize> {
        self.functional_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("no functional named '{name}'")))
    }

    /// Per-chain trace of one functional.
    pub fn functional_traces(&self, index: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.functionals.iter().map(|f| f[index]).collect())
            .collect()
    }

    /// Per-chain trace of one parameter.
    pub fn param_traces(&self, index: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.params.iter().map(|p| p[index]).collect())
            .collect()
    }

    /// Parameter state of one retained draw.
    pub fn state(&self, chain: usize, draw: usize) -> Result<ModelState> {
        let mut s = ModelState::zeros(&self.context.dims()?);
        let values = self
            .chains
            .get(chain)
            .and_then(|c| c.params.get(draw))
            .ok_or_else(|| Error::Lookup(format!("no draw {draw} in chain {chain}")))?;
        s.unflatten(values)?;
        Ok(s)
    }

    /// Iterates over every retained state, chain by chain.
    pub fn states(&self) -> impl Iterator<Item = Result<ModelState>> + '_ {
        self.chains
            .iter()
            .enumerate()
            .flat_map(move |(c, t)| (0..t.params.len()).map(move |d| self.state(c, d)))
    }

    /// Gelman–Rubin statistic of every functional (needs at least two chains).
    pub fn functional_rhat(&self) -> Result<Vec<f64>> {
        (0..self.functional_names.len())
            .map(|i| {
                let traces = self.functional_traces(i);
                let refs: Vec<&[f64]> = traces.iter().map(Vec::as_slice).collect();
                gelman_rubin(&refs)
            })
            .collect()
    }
}

/// Names of the derived functionals, in storage order: country, then year, then statistic.
pub fn functional_names(ctx: &ModelContext) -> Vec<String> {
    let hier = &ctx.hier;
    let mut out = Vec::with_capacity(hier.n_countries() * hier.n_years() * 3);
    for c in hier.countries() {
        for t in 0..hier.n_years() {
            let year = hier.first_year() + t as i32;
            for s in Statistic::ALL {
                out.push(format!("{}[{c},{year}]", s.as_str()));
            }
        }
    }
    out
}

/// Storage index of a functional.
pub fn functional_index(ctx: &ModelContext, country: usize, year: usize, stat: Statistic) -> usize {
    (country * ctx.hier.n_years() + year) * 3 + stat.index()
}

/// Mean and the two prevalences of a mixture given as raw slices.
pub fn mixture_functionals(thetas: &[f64], sigmas: &[f64], w: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for ((t, s), wk) in thetas.iter().zip(sigmas).zip(w) {
        out[0] += wk * t;
        out[1] += wk * std_cdf((-2.0 - t) / s);
        out[2] += wk * std_cdf((-3.0 - t) / s);
    }
    out
}

/// Population-level functionals of every country-year at one state.
pub fn compute_functionals(state: &ModelState, ctx: &ModelContext, out: &mut Vec<f64>) -> Result<()> {
    let hier = &ctx.hier;
    out.clear();
    let mut scratch = WeightScratch::default();
    let mut w = Vec::new();
    for j in 0..hier.n_countries() {
        for t in 0..hier.n_years() {
            weights_into(
                &state.effects,
                hier,
                &ctx.options,
                j,
                t,
                Stratum::All,
                None,
                &mut scratch,
                &mut w,
            )?;
            out.extend(mixture_functionals(&state.thetas, &state.sigmas, &w));
        }
    }
    Ok(())
}

/// Everything needed to continue a chain exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub chain: usize,
    pub next_iteration: usize,
    pub state: ModelState,
    pub adapters: Vec<Adapter>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    /// Word position of the generator, split into high and low halves.
    pub rng_word_pos: [u64; 2],
    pub trace: ChainTrace,
}

/// Likelihood evaluation with reusable buffers.
struct Evaluator<'a> {
    ctx: &'a ModelContext,
    studies: &'a PreparedStudies,
    use_likelihood: bool,
    scratch: WeightScratch,
    w: Vec<f64>,
}

impl Evaluator<'_> {
    fn study(&mut self, state: &ModelState, tables: &[Option<MicroTable>], i: usize) -> Result<f64> {
        if !self.use_likelihood {
            return Ok(0.0);
        }
        let d = self.ctx.designs[i];
        weights_into(
            &state.effects,
            &self.ctx.hier,
            &self.ctx.options,
            d.country,
            d.year,
            d.stratum,
            Some((i, d)),
            &mut self.scratch,
            &mut self.w,
        )?;
        match &tables[i] {
            Some(t) => Ok(self
                .studies
                .item(i)
                .micro_loglik_table(t, &state.thetas, &state.sigmas, &self.w)),
            None => self.studies.study(i, &state.thetas, &state.sigmas, &self.w),
        }
    }

    fn tables(&self, thetas: &[f64], sigmas: &[f64]) -> Vec<Option<MicroTable>> {
        (0..self.studies.len())
            .map(|i| {
                if self.use_likelihood {
                    self.studies.item(i).micro_table(thetas, sigmas)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// One chain's sampler state.
pub struct ChainSampler<'a> {
    chain: usize,
    config: &'a SamplerConfig,
    eval: Evaluator<'a>,
    state: ModelState,
    ll: Vec<f64>,
    tables: Vec<Option<MicroTable>>,
    blocks: Vec<BlockId>,
    affected: Vec<Vec<usize>>,
    adapters: Vec<Adapter>,
    has_data: Vec<bool>,
    rw2: Rw2Sampler,
    rng: ChaCha20Rng,
    iteration: usize,
    trace: ChainTrace,
    trial_ll: Vec<f64>,
    functionals: Vec<f64>,
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Pooled data values used to place the initial basis: micro observations and reported
/// means.
fn pooled_values(studies: &PreparedStudies) -> Vec<f64> {
    (0..studies.len())
        .flat_map(|i| studies.item(i).location_values())
        .collect()
}

/// A valid random starting state.
pub fn initial_state<R: Rng + ?Sized>(
    ctx: &ModelContext,
    studies: &PreparedStudies,
    rng: &mut R,
) -> Result<ModelState> {
    let dims = ctx.dims()?;
    let mut state = ModelState::zeros(&dims);
    let b = &ctx.bounds;
    let k = ctx.options.components;
    let mut values = pooled_values(studies);
    values.retain(|v| v.is_finite());
    values.sort_by(f64::total_cmp);
    let (centre, spread) = if values.len() >= 2 {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (mean, sd.max(1e-3))
    } else {
        (0.5 * (b.theta_lo + b.theta_hi), (b.theta_hi - b.theta_lo) / 6.0)
    };
    let mut thetas: Vec<f64> = (0..k)
        .map(|q| {
            let p = (q as f64 + 0.5) / k as f64;
            let base = if values.len() >= 2 {
                values[((p * values.len() as f64) as usize).min(values.len() - 1)]
            } else {
                centre + spread * crate::normal::std_quantile(p)
            };
            let jitter: f64 = rng.sample(StandardNormal);
            (base + 0.05 * spread * jitter).clamp(b.theta_lo, b.theta_hi)
        })
        .collect();
    thetas.sort_by(f64::total_cmp);
    // break ties left by clamping or repeated quantiles
    let gap = 1e-3 * (b.theta_hi - b.theta_lo) / k as f64;
    for q in 1..k {
        if thetas[q] <= thetas[q - 1] {
            thetas[q] = thetas[q - 1] + gap;
        }
    }
    if thetas[k - 1] > b.theta_hi {
        let shift = thetas[k - 1] - b.theta_hi;
        thetas.iter_mut().for_each(|t| *t -= shift);
    }
    state.thetas = thetas;
    state.sigmas = (0..k)
        .map(|_| {
            let f: f64 = rng.random_range(0.8..1.2);
            (0.5 * spread * f).min(0.9 * b.sigma_cap)
        })
        .collect();

    let equal = Weights::new(vec![1.0 / k as f64; k])?;
    let base = inverse_stick_break(&equal)?;
    for (m, c) in state.effects.components.iter_mut().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let d = base[m] + 0.2 * z;
        c.delta_g = d;
        c.delta_r.iter_mut().for_each(|v| *v = d);
        c.delta_c.iter_mut().for_each(|v| *v = d);
    }
    apply_zero_sum(&mut state.effects);
    check_constraints(&state, ctx)?;
    Ok(state)
}

fn affected_studies(block: &BlockId, ctx: &ModelContext) -> Vec<usize> {
    let studies = 0..ctx.designs.len();
    match block.affected() {
        Affected::None => Vec::new(),
        Affected::One(i) => vec![i],
        Affected::Country(j) => studies.filter(|&i| ctx.designs[i].country == j).collect(),
        Affected::Region(k) => studies
            .filter(|&i| ctx.hier.region_of(ctx.designs[i].country) == k)
            .collect(),
        Affected::All => studies.collect(),
    }
}

impl<'a> ChainSampler<'a> {
    /// Starts chain `chain` from a random initial state.
    pub fn new(
        ctx: &'a ModelContext,
        studies: &'a PreparedStudies,
        config: &'a SamplerConfig,
        chain: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = chain_rng(config.seed, chain);
        let state = initial_state(ctx, studies, &mut rng)?;
        let mut s = Self::assemble(ctx, studies, config, chain, state, rng)?;
        s.adapters = s
            .blocks
            .iter()
            .map(|b| Adapter::new(&b.init_sd(&s.state, ctx), !b.projected(), &config.adaptation))
            .collect();
        Ok(s)
    }

    /// Continues a chain from a checkpoint; the result is identical to an unbroken run.
    pub fn resume(
        ctx: &'a ModelContext,
        studies: &'a PreparedStudies,
        config: &'a SamplerConfig,
        checkpoint: ChainCheckpoint,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::from_seed(checkpoint.rng_seed);
        rng.set_stream(checkpoint.rng_stream);
        rng.set_word_pos(((checkpoint.rng_word_pos[0] as u128) << 64) | checkpoint.rng_word_pos[1] as u128);
        let mut s = Self::assemble(ctx, studies, config, checkpoint.chain, checkpoint.state, rng)?;
        if checkpoint.adapters.len() != s.blocks.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} adapters, model has {} blocks",
                checkpoint.adapters.len(),
                s.blocks.len()
            )));
        }
        s.adapters = checkpoint.adapters;
        s.iteration = checkpoint.next_iteration;
        s.trace = checkpoint.trace;
        Ok(s)
    }

    fn assemble(
        ctx: &'a ModelContext,
        studies: &'a PreparedStudies,
        config: &'a SamplerConfig,
        chain: usize,
        state: ModelState,
        rng: ChaCha20Rng,
    ) -> Result<Self> {
        if studies.len() != ctx.designs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} study designs for {} studies",
                ctx.designs.len(),
                studies.len()
            )));
        }
        let mut has_data = vec![false; ctx.hier.n_countries()];
        for d in &ctx.designs {
            has_data[d.country] = true;
        }
        let blocks = build_blocks(ctx, &has_data);
        let affected = blocks.iter().map(|b| affected_studies(b, ctx)).collect();
        let eval = Evaluator {
            ctx,
            studies,
            use_likelihood: config.use_likelihood,
            scratch: WeightScratch::default(),
            w: Vec::new(),
        };
        let tables = eval.tables(&state.thetas, &state.sigmas);
        let mut s = Self {
            chain,
            config,
            eval,
            state,
            ll: Vec::new(),
            tables,
            blocks,
            affected,
            adapters: Vec::new(),
            has_data,
            rw2: Rw2Sampler::new(ctx.hier.n_years())?,
            rng,
            iteration: 0,
            trace: ChainTrace {
                chain,
                iterations: Vec::new(),
                params: Vec::new(),
                functionals: Vec::new(),
                acceptance: BTreeMap::new(),
            },
            trial_ll: Vec::new(),
            functionals: Vec::new(),
        };
        s.ll = (0..studies.len())
            .map(|i| s.eval.study(&s.state, &s.tables, i))
            .collect::<Result<_>>()?;
        Ok(s)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    /// Current total log-likelihood, summed in study-id order.
    pub fn log_likelihood(&self) -> f64 {
        self.eval.studies.sum(&self.ll)
    }

    pub fn checkpoint(&self) -> ChainCheckpoint {
        let pos = self.rng.get_word_pos();
        ChainCheckpoint {
            chain: self.chain,
            next_iteration: self.iteration,
            state: self.state.clone(),
            adapters: self.adapters.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: [(pos >> 64) as u64, pos as u64],
            trace: self.trace.clone(),
        }
    }

    /// Runs until `until` iterations (capped at `n_iter`) have completed.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.config.n_iter);
        while self.iteration < until {
            let it = self.iteration;
            self.sweep(it).map_err(|e| Error::Sampler {
                chain: self.chain,
                iteration: it,
                checkpoint: None,
                source: Box::new(e),
            })?;
            self.iteration += 1;
        }
        Ok(())
    }

    /// Runs the remaining iterations and returns the trace.
    pub fn run(mut self) -> Result<ChainTrace> {
        self.run_until(self.config.n_iter)?;
        Ok(self.finish())
    }

    pub fn finish(mut self) -> ChainTrace {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (b, a) in self.blocks.iter().zip(&self.adapters) {
            if let Some(r) = a.acceptance_rate() {
                let e = sums.entry(b.kind().to_string()).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            }
        }
        self.trace.acceptance = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        self.trace
    }

    fn active(&self, group: BlockGroup, it: usize) -> bool {
        if group == BlockGroup::Basis && self.config.fix_basis {
            return false;
        }
        it >= self.config.phase_start(group)
    }

    fn sweep(&mut self, it: usize) -> Result<()> {
        if it == self.config.burnin {
            self.adapters.iter_mut().for_each(Adapter::freeze);
        }
        let mut gibbs_done = false;
        for b in 0..self.blocks.len() {
            let block = self.blocks[b];
            let group = block.group();
            if group == BlockGroup::Hierarchy && !gibbs_done {
                // exact draws come between the basis and the Metropolis hyperparameter blocks
                if self.active(BlockGroup::CountryEffects, it) {
                    self.draw_data_free();
                }
                if self.active(BlockGroup::Hierarchy, it) {
                    gibbs_update_hierarchy(HierarchyLevel::Region, &mut self.state, self.eval.ctx, &mut self.rng);
                    gibbs_update_hierarchy(HierarchyLevel::Global, &mut self.state, self.eval.ctx, &mut self.rng);
                }
                gibbs_done = true;
            }
            if !self.active(group, it) {
                continue;
            }
            match block {
                BlockId::LambdaU { level, m } => self.lambda_u_step(b, level, m)?,
                _ => self.metropolis_step(b)?,
            }
        }
        if it >= self.config.burnin && (it + 1 - self.config.burnin).is_multiple_of(self.config.thin) {
            self.record(it)?;
        }
        Ok(())
    }

    fn record(&mut self, it: usize) -> Result<()> {
        compute_functionals(&self.state, self.eval.ctx, &mut self.functionals)?;
        self.trace.iterations.push(it);
        self.trace.params.push(self.state.flatten());
        self.trace.functionals.push(self.functionals.clone());
        Ok(())
    }

    fn metropolis_step(&mut self, b: usize) -> Result<()> {
        let Self {
            eval,
            state,
            ll,
            tables,
            blocks,
            affected,
            adapters,
            rng,
            trial_ll,
            ..
        } = self;
        let block = blocks[b];
        let ctx = eval.ctx;
        let aff = &affected[b];
        let n_m = state.effects.components.len();
        let is_basis = block == BlockId::Basis;
        let mut x = block.read(state, ctx);
        let current = block.local_log_prior(state, ctx) + aff.iter().map(|&i| ll[i]).sum::<f64>();
        let mut trial_tables: Option<Vec<Option<MicroTable>>> = None;
        let step = adaptive_rw_update_projected(
            block.kind(),
            &mut x,
            current,
            |prop| {
                block.write(state, ctx, prop);
                trial_ll.clear();
                let lp = block.local_log_prior(state, ctx);
                if lp == f64::NEG_INFINITY {
                    return Ok(lp);
                }
                let tabs = if is_basis {
                    &*trial_tables.insert(eval.tables(&state.thetas, &state.sigmas))
                } else {
                    &*tables
                };
                let mut total = lp;
                for &i in aff {
                    let v = eval.study(state, tabs, i)?;
                    trial_ll.push(v);
                    total += v;
                }
                Ok(total)
            },
            |step| block.project(n_m, step),
            &mut adapters[b],
            rng,
        )?;
        if step.accepted {
            if matches!(
                block,
                BlockId::CountryU { .. } | BlockId::RegionU { .. } | BlockId::GlobalU { .. }
            ) {
                project_u_in_place(&mut x);
            }
            for (&i, &v) in aff.iter().zip(trial_ll.iter()) {
                ll[i] = v;
            }
            if let Some(t) = trial_tables {
                *tables = t;
            }
        }
        block.write(state, ctx, &x);
        Ok(())
    }

    /// Joint move of `log λ` and every trend vector it governs: `u ← u·e^{−ε/2}` keeps the
    /// prior energy fixed, so only the λ prior and the likelihood enter the ratio.
    fn lambda_u_step(&mut self, b: usize, level: Level, m: usize) -> Result<()> {
        let ctx = self.eval.ctx;
        let old = lambda(&self.state, level, m);
        let eps = self.adapters[b].propose(&mut self.rng)[0];
        let log_u: f64 = self.rng.random::<f64>().ln();
        let new_log = old.ln() + eps;
        let new = new_log.exp();
        let h = &self.state.hyper.components[m];
        let (lc, lr, lg) = match level {
            Level::Country => (new, h.lambda_r, h.lambda_g),
            Level::Region => (h.lambda_c, new, h.lambda_g),
            Level::Global => (h.lambda_c, h.lambda_r, new),
        };
        let valid = new_log <= ctx.bounds.log_lambda_max
            && new_log >= ctx.bounds.log_lambda_min
            && lc < lr
            && lr < lg
            && new.is_finite()
            && new > 0.0;
        if !valid {
            self.adapters[b].record(false, &[old.ln()]);
            return Ok(());
        }
        let factor = (-0.5 * eps).exp();
        let saved = self.trend_vectors(level, m).clone();
        self.scale_trends(level, m, factor, None);
        self.set_lambda(level, m, new);
        self.trial_ll.clear();
        let mut delta = 0.0;
        if self.config.use_likelihood {
            for i in 0..self.ll.len() {
                let v = self.eval.study(&self.state, &self.tables, i)?;
                delta += v - self.ll[i];
                self.trial_ll.push(v);
            }
        }
        let ratio = -0.5 * eps + delta;
        if ratio.is_nan() {
            return Err(Error::numeric(
                format!("block {}", self.blocks[b].kind()),
                "log ratio is NaN",
            ));
        }
        let accepted = log_u < ratio;
        if accepted {
            if self.config.use_likelihood {
                self.ll.copy_from_slice(&self.trial_ll);
            }
            self.adapters[b].record(true, &[new_log]);
        } else {
            self.scale_trends(level, m, 1.0, Some(saved));
            self.set_lambda(level, m, old);
            self.adapters[b].record(false, &[old.ln()]);
        }
        Ok(())
    }

    fn trend_vectors(&self, level: Level, m: usize) -> Vec<Vec<f64>> {
        let c = &self.state.effects.components[m];
        match level {
            Level::Country => c.u_c.clone(),
            Level::Region => c.u_r.clone(),
            Level::Global => vec![c.u_g.clone()],
        }
    }

    /// Multiplies the trend vectors of one level by `factor`, or restores saved values.
    fn scale_trends(&mut self, level: Level, m: usize, factor: f64, restore: Option<Vec<Vec<f64>>>) {
        let c = &mut self.state.effects.components[m];
        let target: Vec<&mut Vec<f64>> = match level {
            Level::Country => c.u_c.iter_mut().collect(),
            Level::Region => c.u_r.iter_mut().collect(),
            Level::Global => vec![&mut c.u_g],
        };
        match restore {
            Some(saved) => {
                for (u, s) in target.into_iter().zip(saved) {
                    *u = s;
                }
            }
            None => {
                for u in target {
                    u.iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
    }

    fn set_lambda(&mut self, level: Level, m: usize, value: f64) {
        let h = &mut self.state.hyper.components[m];
        match level {
            Level::Country => h.lambda_c = value,
            Level::Region => h.lambda_r = value,
            Level::Global => h.lambda_g = value,
        }
    }

    /// Countries without data have no likelihood term, so their effects are drawn
    /// exactly from the hierarchy.
    fn draw_data_free(&mut self) {
        let ctx = self.eval.ctx;
        let main = ctx.options.main_effects;
        for j in 0..ctx.hier.n_countries() {
            if self.has_data[j] {
                continue;
            }
            let k = ctx.hier.region_of(j);
            for m in 0..self.state.effects.components.len() {
                let h = self.state.hyper.components[m].clone();
                if !main {
                    let z1 = draw_t(T_DF, &mut self.rng);
                    let z2 = draw_t(T_DF, &mut self.rng);
                    let c = &mut self.state.effects.components[m];
                    c.delta_c[j] = c.delta_r[k] + h.tau_delta_c * z1;
                    c.phi_c[j] = c.phi_r[k] + h.tau_phi_c * z2;
                }
                let u = self.rw2.draw(h.lambda_c, &mut self.rng);
                self.state.effects.components[m].u_c[j] = u;
                if let Some(sh) = &h.strata {
                    let z1 = draw_t(T_DF, &mut self.rng);
                    let z2 = draw_t(T_DF, &mut self.rng);
                    let s = self.state.effects.components[m].strata.as_mut().expect("strata");
                    s.gamma_c[j] = s.gamma_r[k] + sh.tau_gamma_c * z1;
                    s.rho_c[j] = s.rho_r[k] + sh.tau_rho_c * z2;
                }
            }
            if let Some(h) = self.state.hyper.main.clone() {
                let z1 = draw_t(T_DF, &mut self.rng);
                let z2 = draw_t(T_DF, &mut self.rng);
                let e = self.state.effects.main.as_mut().expect("main effects");
                e.delta0_c[j] = e.delta0_r[k] + h.tau_delta0_c * z1;
                e.phi0_c[j] = e.phi0_r[k] + h.tau_phi0_c * z2;
            }
        }
    }
}

/// Runs one chain from scratch.
pub fn run_chain(
    ctx: &ModelContext,
    studies: &PreparedStudies,
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainTrace> {
    ChainSampler::new(ctx, studies, config, chain)?.run()
}

/// Path of the checkpoint written when chain `chain` fails.
pub fn checkpoint_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("chain{chain}.ckpt"))
}

fn run_one(
    ctx: &ModelContext,
    studies: &PreparedStudies,
    config: &SamplerConfig,
    chain: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<ChainTrace> {
    let mut sampler = ChainSampler::new(ctx, studies, config, chain)?;
    match sampler.run_until(config.n_iter) {
        Ok(()) => Ok(sampler.finish()),
        Err(Error::Sampler {
            chain,
            iteration,
            source,
            ..
        }) => {
            let checkpoint = match checkpoint_dir {
                Some(dir) => {
                    let path = checkpoint_path(dir, chain);
                    crate::io::write_checkpoint(&path, &sampler.checkpoint())?;
                    Some(path)
                }
                None => None,
            };
            Err(Error::Sampler {
                chain,
                iteration,
                checkpoint,
                source,
            })
        }
        Err(e) => Err(e),
    }
}

/// Runs every chain on its own thread. On a numeric failure the failing chain's state is
/// written to `checkpoint_dir` (when given) and the error names the chain and iteration.
pub fn run_chains(
    ctx: &ModelContext,
    studies: &PreparedStudies,
    config: &SamplerConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let results: Vec<Result<ChainTrace>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.n_chains)
            .map(|chain| scope.spawn(move || run_one(ctx, studies, config, chain, checkpoint_dir)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::numeric("chain worker", "thread panicked")))
            })
            .collect()
    });
    let chains = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        param_names: ModelState::zeros(&ctx.dims()?).param_names(),
        functional_names: functional_names(ctx),
        context: ctx.clone(),
        config: config.clone(),
        chains,
    })
}
