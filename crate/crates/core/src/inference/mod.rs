//! Posterior summaries, region aggregation, synthetic data, CLT checks, and
//! cross-validation.

mod aggregate;
mod clt;
mod cv;
mod kde;
mod simulate;
mod summary;
mod wilcoxon;

pub use aggregate::{aggregate_region, AggregateLevel, GLOBAL_LABEL};
pub use clt::{
    clt_check, clt_check_values, empirical_moments, ks_normal, ks_normal_lattice, relative_error, sample_summaries,
    CltReport, CLT_MIN_OBS,
};
pub use cv::{
    country_folds, crossvalidate, density_strata, predict_new_study, predict_retained_study, study_folds, CvConfig,
    CvMetricSummary, CvPrediction, CvReport, CvTest, DensityStratum,
};
pub use kde::{kde, kde_with_bandwidth, silverman_bandwidth, NormalMixture};
pub use simulate::{micro_summaries, simulate_synthetic, SyntheticSpec, Truth, TruthSpec};
pub use summary::{
    all_targets, density_grid, functionals_from_grid, mixture_density_on_grid, posterior_density_grid, quantile,
    summarize_posterior, summarize_traces, write_density_grids, write_summary_table, DensityGrid, SummaryRow, Target,
    GRID_MAX, GRID_MIN, GRID_POINTS, TABLE_HEADER,
};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_statistic, WilcoxonResult, WILCOXON_MIN_PAIRS};
