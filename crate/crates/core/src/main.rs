use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbsmix::inference::{
    aggregate_region, all_targets, clt_check, clt_check_values, crossvalidate, posterior_density_grid,
    simulate_synthetic, summarize_posterior, wilcoxon_signed_rank, write_density_grids, write_summary_table,
    AggregateLevel, CvPrediction, CvReport, CvTest, NormalMixture, SummaryRow, Target, WILCOXON_MIN_PAIRS,
};
use pbsmix::io::{
    load_dataset, load_draws, save_dataset, save_draws, ChainOutcome, DatasetBundle, DatasetPaths, LoadOptions,
    RunConfig, RunManifest,
};
use pbsmix::likelihood::{Statistic, StudyData};
use pbsmix::model::{ModelContext, PriorBounds};
use pbsmix::sampler::{mc_diagnostics, run_chains, PosteriorDraws};
use pbsmix::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Parser)]
#[command(
    name = "pbsmix",
    version,
    about = "Fit and query hierarchical probit stick-breaking normal mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed; the sampler seed of the configuration when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Input table directory, overriding the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DrawsArg {
    /// Draw file; `<out>/draws.smx` when absent.
    #[arg(long)]
    draws: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampler and write draws, a summary table, and diagnostics.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        chains: Option<usize>,
        /// Iterations per chain, burn-in included.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
    },
    /// Summaries (and optional density grids) for the configured targets.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        draws: DrawsArg,
    },
    /// Summaries for every country-year of a fit.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        draws: DrawsArg,
    },
    /// Population-weighted region or global summaries.
    Aggregate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        draws: DrawsArg,
        #[arg(long, value_enum, default_value = "region")]
        level: AggregateLevel,
    },
    /// Generate a synthetic dataset and its ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the simulated sampling distribution of the summaries with the normal approximation.
    CltCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Five-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        /// 1 holds out countries, 2 holds out metrics of studies.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        test: u8,
        /// With test 2, also refit with the studies removed and compare errors.
        #[arg(long)]
        baseline: bool,
    },
    /// Convergence diagnostics of a draw file.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        draws: DrawsArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit { .. } => "fit",
            Command::Predict { .. } => "predict",
            Command::Summarize { .. } => "summarize",
            Command::Aggregate { .. } => "aggregate",
            Command::Simulate { .. } => "simulate",
            Command::CltCheck { .. } => "clt-check",
            Command::Cv { .. } => "cv",
            Command::Diagnose { .. } => "diagnose",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Fit { common, .. }
            | Command::Predict { common, .. }
            | Command::Summarize { common, .. }
            | Command::Aggregate { common, .. }
            | Command::Simulate { common }
            | Command::CltCheck { common }
            | Command::Cv { common, .. }
            | Command::Diagnose { common, .. } => common,
        }
    }
}

enum Outcome {
    Done,
    NotConverged(usize),
}

/// Shared state of one invocation.
struct Run {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn open(command: &str, common: &Common) -> Result<Self> {
        let (mut cfg, sha) = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => (RunConfig::default(), pbsmix::io::sha256_hex(b"")),
        };
        if let Some(dir) = &common.data {
            cfg.data.dir = dir.clone();
        }
        let seed = common.seed.unwrap_or(cfg.sampler.seed);
        cfg.sampler.seed = seed;
        if let Some(s) = cfg.cv.sampler.as_mut() {
            s.seed = seed;
        }
        fs::create_dir_all(&common.out)?;
        let manifest_path = RunManifest::path_in(&common.out, command);
        if manifest_path.exists() {
            return Err(Error::Config(format!(
                "{} exists; use a fresh output directory",
                manifest_path.display()
            )));
        }
        Ok(Self {
            cfg,
            seed,
            out: common.out.clone(),
            manifest: RunManifest::start(command, sha, seed),
        })
    }

    fn dataset(&mut self) -> Result<DatasetBundle> {
        let options = LoadOptions {
            percent: self.cfg.data.percent,
            strata: self.cfg.model.strata,
        };
        let bundle = load_dataset(&DatasetPaths::in_dir(&self.cfg.data.dir), options)?;
        for w in &bundle.warnings {
            eprintln!("warning: {w}");
        }
        self.manifest.dataset_sha256 = Some(bundle.digest());
        Ok(bundle)
    }

    fn bounds(&self, bundle: &DatasetBundle) -> PriorBounds {
        self.cfg.priors.apply(PriorBounds::from_data(&bundle.pooled_values()))
    }

    fn context(&self, bundle: &DatasetBundle) -> Result<ModelContext> {
        bundle.context(self.cfg.model, Some(self.bounds(bundle)))
    }

    fn draws(&self, arg: &DrawsArg) -> Result<PosteriorDraws> {
        load_draws(&arg.draws.clone().unwrap_or_else(|| self.out.join("draws.smx")))
    }

    /// Creates `name` in the output directory, fills it, and records its digest.
    fn output(&mut self, name: &str, fill: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.out.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        fill(&mut w)?;
        w.flush()?;
        drop(w);
        self.manifest.add_output(&path)
    }

    fn finish(self) -> Result<()> {
        let path = self.manifest.finish(&self.out)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

fn write_table(run: &mut Run, name: &str, rows: &[SummaryRow]) -> Result<()> {
    run.output(name, |w| write_summary_table(rows, w))
}

/// Per-functional R̂, ESS and MCSE; returns the report and the number of functionals at or
/// above the threshold.
fn diagnostics_report(draws: &PosteriorDraws, threshold: f64) -> Result<(String, usize)> {
    let rhat = if draws.chains.len() >= 2 {
        draws.functional_rhat()?
    } else {
        vec![f64::NAN; draws.functional_names.len()]
    };
    let mut text = String::new();
    let per_chain = draws.chains.first().map_or(0, |c| c.functionals.len());
    text.push_str(&format!(
        "chains: {}\ndraws_per_chain: {per_chain}\n",
        draws.chains.len()
    ));
    text.push_str(&format!(
        "iterations: {}\nburnin: {}\nthin: {}\nrhat_threshold: {threshold}\n",
        draws.config.n_iter, draws.config.burnin, draws.config.thin
    ));
    let bad: Vec<usize> = (0..rhat.len()).filter(|&i| rhat[i] >= threshold).collect();
    if draws.chains.len() < 2 {
        text.push_str("rhat: unavailable with one chain\n");
    } else {
        let (imax, max) = rhat
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, f64::NAN));
        text.push_str(&format!(
            "max_rhat: {max:.4} ({})\nnot_converged: {}\n",
            draws.functional_names.get(imax).map_or("", String::as_str),
            bad.len()
        ));
        for &i in &bad {
            text.push_str(&format!("  {} rhat={:.4}\n", draws.functional_names[i], rhat[i]));
        }
    }
    let mut min_ess = f64::INFINITY;
    let mut max_mcse: f64 = 0.0;
    for i in 0..draws.functional_names.len() {
        let traces = draws.functional_traces(i);
        let pooled: Vec<f64> = traces.iter().flatten().copied().collect();
        if let Ok(d) = mc_diagnostics(&pooled) {
            if !d.degenerate {
                min_ess = min_ess.min(d.ess);
                max_mcse = max_mcse.max(d.mcse);
            }
        }
    }
    text.push_str(&format!(
        "min_functional_ess: {min_ess:.1}\nmax_functional_mcse: {max_mcse:.3e}\n"
    ));
    for c in &draws.chains {
        for (kind, rate) in &c.acceptance {
            text.push_str(&format!("acceptance chain={} block={kind}: {rate:.3}\n", c.chain));
        }
    }
    Ok((text, bad.len()))
}

fn cmd_fit(
    run: &mut Run,
    chains: Option<usize>,
    iters: Option<usize>,
    burnin: Option<usize>,
    thin: Option<usize>,
) -> Result<Outcome> {
    let s = &mut run.cfg.sampler;
    if let Some(v) = chains {
        s.n_chains = v;
    }
    if let Some(v) = thin {
        s.thin = v;
    }
    if let Some(v) = iters {
        s.n_iter = v;
    }
    if let Some(v) = burnin {
        s.burnin = v;
        s.phase_schedule = pbsmix::sampler::SamplerConfig::default_phases(v);
    }
    run.cfg.validate()?;
    let bundle = run.dataset()?;
    let ctx = run.context(&bundle)?;
    let draws = match run_chains(&ctx, &bundle.prepared()?, &run.cfg.sampler, Some(&run.out)) {
        Ok(d) => d,
        Err(e) => {
            if let Error::Sampler { chain, .. } = &e {
                run.manifest.chains.push(ChainOutcome {
                    chain: *chain,
                    n_draws: 0,
                    status: e.to_string(),
                });
            }
            return Err(e);
        }
    };
    run.manifest.chains = draws
        .chains
        .iter()
        .map(|c| ChainOutcome {
            chain: c.chain,
            n_draws: c.params.len(),
            status: "ok".into(),
        })
        .collect();
    let path = run.out.join("draws.smx");
    save_draws(&draws, &path)?;
    run.manifest.add_output(&path)?;
    let rows = summarize_posterior(&draws, &all_targets(&draws))?;
    write_table(run, "summary.csv", &rows)?;
    let (report, bad) = diagnostics_report(&draws, run.cfg.rhat_threshold)?;
    run.output("diagnostics.txt", |w| Ok(w.write_all(report.as_bytes())?))?;
    Ok(if bad > 0 {
        Outcome::NotConverged(bad)
    } else {
        Outcome::Done
    })
}

fn cmd_predict(run: &mut Run, arg: &DrawsArg) -> Result<Outcome> {
    let draws = run.draws(arg)?;
    let targets: Vec<Target> = if run.cfg.predict.targets.is_empty() {
        all_targets(&draws)
    } else {
        run.cfg.predict.targets.clone()
    };
    let rows = summarize_posterior(&draws, &targets)?;
    write_table(run, "predict.csv", &rows)?;
    if run.cfg.predict.density_grid {
        let grids = targets
            .iter()
            .map(|t| posterior_density_grid(&draws, t))
            .collect::<Result<Vec<_>>>()?;
        run.output("density_grid.csv", |w| write_density_grids(&grids, w))?;
    }
    Ok(Outcome::Done)
}

fn cmd_summarize(run: &mut Run, arg: &DrawsArg) -> Result<Outcome> {
    let draws = run.draws(arg)?;
    let rows = summarize_posterior(&draws, &all_targets(&draws))?;
    write_table(run, "summary.csv", &rows)?;
    Ok(Outcome::Done)
}

fn cmd_aggregate(run: &mut Run, arg: &DrawsArg, level: AggregateLevel) -> Result<Outcome> {
    let draws = run.draws(arg)?;
    let bundle = run.dataset()?;
    let rows = aggregate_region(&draws, level, &bundle.populations)?;
    let name = match level {
        AggregateLevel::Region => "aggregate-region.csv",
        AggregateLevel::Global => "aggregate-global.csv",
    };
    write_table(run, name, &rows)?;
    Ok(Outcome::Done)
}

fn cmd_simulate(run: &mut Run) -> Result<Outcome> {
    let (bundle, truth) = simulate_synthetic(&run.cfg.simulate, run.seed)?;
    let dir = run.out.join("data");
    save_dataset(&bundle, &dir)?;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        run.manifest.add_output(&path)?;
    }
    run.output("truth.json", |w| Ok(serde_json::to_writer_pretty(w, &truth)?))?;
    Ok(Outcome::Done)
}

/// Unimodal, mildly skewed base density of the synthetic check.
fn synthetic_base_density() -> Result<NormalMixture> {
    NormalMixture::new(vec![-1.5, -0.8], vec![1.0, 1.2], vec![0.5, 0.5])
}

fn cmd_clt(run: &mut Run) -> Result<Outcome> {
    let clt = run.cfg.clt.clone();
    let report = match &clt.study {
        Some(id) => {
            let bundle = run.dataset()?;
            let study = bundle
                .studies
                .iter()
                .find(|s| &s.study_id == id)
                .ok_or_else(|| Error::Lookup(format!("no study '{id}'")))?;
            let StudyData::Micro(obs) = &study.data else {
                return Err(Error::InvalidArgument(format!("study '{id}' has no microdata")));
            };
            let values: Vec<f64> = obs.iter().map(|o| o.value).collect();
            let weights: Vec<f64> = obs.iter().map(|o| o.weight).collect();
            clt_check_values(&values, Some(&weights), clt.n, clt.reps, run.seed)?
        }
        None => clt_check(
            &synthetic_base_density()?,
            clt.n,
            clt.reps,
            &mut ChaCha20Rng::seed_from_u64(run.seed),
        )?,
    };
    eprintln!(
        "KS mean={:.4} prev2={:.4} prev3={:.4}",
        report.ks[0], report.ks[1], report.ks[2]
    );
    run.output("clt.json", |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
    Ok(Outcome::Done)
}

fn write_report(run: &mut Run, stem: &str, report: &CvReport) -> Result<()> {
    run.output(&format!("{stem}.csv"), |w| report.write_summary(w))?;
    run.output(&format!("{stem}-predictions.csv"), |w| report.write_predictions(w))?;
    eprintln!("{stem}: overall coverage {:.3}", report.overall_coverage());
    Ok(())
}

/// Paired signed-rank comparison of absolute errors, per statistic.
fn compare_reports(retained: &CvReport, removed: &CvReport) -> Result<String> {
    let key = |p: &CvPrediction| (p.study_id.clone(), p.stat);
    let removed: std::collections::BTreeMap<_, f64> =
        removed.predictions.iter().map(|p| (key(p), p.abs_error())).collect();
    let mut out = String::from("stat,n,median_abs_error_retained,median_abs_error_removed,w_plus,z,p_value\n");
    for stat in [Statistic::Mean, Statistic::Prev3] {
        let (a, b): (Vec<f64>, Vec<f64>) = retained
            .predictions
            .iter()
            .filter(|p| p.stat == stat)
            .filter_map(|p| removed.get(&key(p)).map(|e| (p.abs_error(), *e)))
            .unzip();
        let med = |v: &[f64]| {
            let mut v = v.to_vec();
            pbsmix::likelihood::median(&mut v).unwrap_or(f64::NAN)
        };
        let line = if a.len() >= WILCOXON_MIN_PAIRS {
            let r = wilcoxon_signed_rank(&a, &b)?;
            format!(
                "{},{},{},{},{},{},{}\n",
                stat.as_str(),
                a.len(),
                med(&a),
                med(&b),
                r.w_plus,
                r.z,
                r.p_value
            )
        } else {
            format!("{},{},{},{},,,\n", stat.as_str(), a.len(), med(&a), med(&b))
        };
        out.push_str(&line);
    }
    Ok(out)
}

fn cmd_cv(run: &mut Run, test: u8, baseline: bool) -> Result<Outcome> {
    if baseline && test != 2 {
        return Err(Error::Config(
            "the removed-study baseline applies to test 2 only".into(),
        ));
    }
    run.cfg.validate()?;
    let bundle = run.dataset()?;
    let bounds = run.bounds(&bundle);
    let cv = |kind: CvTest| {
        crossvalidate(
            &bundle,
            run.cfg.model,
            Some(bounds),
            &run.cfg.sampler,
            &run.cfg.cv,
            kind,
            run.seed,
        )
    };
    let main = cv(CvTest::from_number(test, false)?)?;
    let removed = if baseline {
        Some(cv(CvTest::MetricsRemoved)?)
    } else {
        None
    };
    write_report(run, &format!("cv-test{test}"), &main)?;
    if let Some(removed) = removed {
        write_report(run, "cv-test2-removed", &removed)?;
        let table = compare_reports(&main, &removed)?;
        run.output("cv-test2-wilcoxon.csv", |w| Ok(w.write_all(table.as_bytes())?))?;
    }
    Ok(Outcome::Done)
}

fn cmd_diagnose(run: &mut Run, arg: &DrawsArg) -> Result<Outcome> {
    let draws = run.draws(arg)?;
    let (report, bad) = diagnostics_report(&draws, run.cfg.rhat_threshold)?;
    print!("{report}");
    run.output("diagnostics.txt", |w| Ok(w.write_all(report.as_bytes())?))?;
    Ok(if bad > 0 {
        Outcome::NotConverged(bad)
    } else {
        Outcome::Done
    })
}

fn execute(command: &Command) -> Result<Outcome> {
    let mut run = Run::open(command.name(), command.common())?;
    let result = match command {
        Command::Fit {
            chains,
            iters,
            burnin,
            thin,
            ..
        } => cmd_fit(&mut run, *chains, *iters, *burnin, *thin),
        Command::Predict { draws, .. } => cmd_predict(&mut run, draws),
        Command::Summarize { draws, .. } => cmd_summarize(&mut run, draws),
        Command::Aggregate { draws, level, .. } => cmd_aggregate(&mut run, draws, *level),
        Command::Simulate { .. } => cmd_simulate(&mut run),
        Command::CltCheck { .. } => cmd_clt(&mut run),
        Command::Cv { test, baseline, .. } => cmd_cv(&mut run, *test, *baseline),
        Command::Diagnose { draws, .. } => cmd_diagnose(&mut run, draws),
    };
    match result {
        Ok(outcome) => {
            run.finish()?;
            Ok(outcome)
        }
        Err(e) => {
            // A failed chain is still recorded.
            if !run.manifest.chains.is_empty() {
                run.finish()?;
            }
            Err(e)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_validation() => 2,
        Error::Io(_) | Error::Json(_) | Error::Checksum(_) | Error::Version { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged(n)) => {
            eprintln!("{n} functionals have R-hat at or above the threshold");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
