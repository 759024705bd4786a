//! Adaptive Metropolis-within-Gibbs sampling, multi-chain runs, and convergence diagnostics.

mod adapt;
mod blocks;
mod chain;
mod diagnostics;
mod gibbs;

pub use adapt::{adaptive_rw_update, adaptive_rw_update_projected, sample_moments, AdaptationConfig, Adapter, Step};
pub use blocks::{build_blocks, BlockGroup, BlockId, Level, ScaleId};
pub use chain::{
    checkpoint_path, compute_functionals, functional_index, functional_names, initial_state, mixture_functionals,
    run_chain, run_chains, ChainCheckpoint, ChainSampler, ChainTrace, PhaseStart, PosteriorDraws, SamplerConfig,
};
pub use diagnostics::{gelman_rubin, mc_diagnostics, McDiagnostics};
pub use gibbs::{
    condition_sum_zero, draw_t, draw_t_latent_variance, gibbs_update_hierarchy, normal_mean_conditional, HierarchyLevel,
};
