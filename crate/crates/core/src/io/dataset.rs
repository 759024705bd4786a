//! Study, microdata, hierarchy, covariate, and population tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, RowIssue};
use crate::likelihood::{
    estimate_design_effect, impute_ess, median_design_effect, MicroObs, PreparedStudies, StudyData, StudyKind,
    StudyRecord, Summaries,
};
use crate::model::{HierarchyConfig, ModelContext, ModelOptions, PriorBounds, Stratum};

/// Locations of the five input tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub studies: PathBuf,
    pub micro: PathBuf,
    pub hierarchy: PathBuf,
    pub covariates: PathBuf,
    /// Optional; a missing file means no population data.
    pub populations: PathBuf,
}

impl DatasetPaths {
    /// The standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            studies: dir.join("studies.csv"),
            micro: dir.join("micro.csv"),
            hierarchy: dir.join("hierarchy.csv"),
            covariates: dir.join("covariates.csv"),
            populations: dir.join("populations.csv"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Prevalences in `studies.csv` are percentages rather than fractions.
    pub percent: bool,
    /// Urban and rural records are modeled; requires stratum populations.
    pub strata: bool,
}

pub type PopulationKey = (String, i32, Stratum);

/// Validated input data with effective sample sizes filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub studies: Vec<StudyRecord>,
    pub hierarchy: HierarchyConfig,
    pub region_of: BTreeMap<String, String>,
    pub covariate_names: Vec<String>,
    /// Raw covariate rows keyed by `(country, year)`.
    pub covariates: BTreeMap<(String, i32), Vec<f64>>,
    /// Persons per `(country, year, stratum)` as supplied.
    pub populations: BTreeMap<PopulationKey, f64>,
    /// SHA-256 of each source file, keyed by file name.
    pub digests: BTreeMap<String, String>,
    /// Non-fatal notes from design-effect estimation.
    pub warnings: Vec<String>,
}

fn file_label(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parsed table: header plus rows of trimmed fields.
struct Table {
    label: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path, digests: &mut BTreeMap<String, String>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let label = file_label(path);
        digests.insert(label.clone(), sha256_hex(&bytes));
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(bytes.as_slice());
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { label, header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Validation(vec![RowIssue {
                file: self.label.clone(),
                row: 0,
                message: format!("missing column '{name}'"),
            }])
        })
    }

    fn optional_column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn issue(&self, row: usize, message: impl Into<String>) -> RowIssue {
        RowIssue {
            file: self.label.clone(),
            row: row + 1,
            message: message.into(),
        }
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("'{s}' is not a finite number"))
}

fn parse_opt_f64(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("'{s}' is not 0 or 1")),
    }
}

fn parse_year(s: &str) -> std::result::Result<i32, String> {
    s.parse::<i32>().map_err(|_| format!("'{s}' is not a year"))
}

fn finish(issues: Vec<RowIssue>) -> Result<()> {
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(issues))
    }
}

fn load_hierarchy(path: &Path, digests: &mut BTreeMap<String, String>) -> Result<BTreeMap<String, String>> {
    let t = Table::read(path, digests)?;
    let (c, r) = (t.column("country")?, t.column("region")?);
    let mut out = BTreeMap::new();
    let mut issues = Vec::new();
    for (i, row) in t.rows.iter().enumerate() {
        if row[c].is_empty() || row[r].is_empty() {
            issues.push(t.issue(i, "empty country or region"));
        } else if out.insert(row[c].clone(), row[r].clone()).is_some() {
            issues.push(t.issue(i, format!("duplicate country '{}'", row[c])));
        }
    }
    finish(issues)?;
    Ok(out)
}

type CovariateGrid = (Vec<String>, BTreeMap<(String, i32), Vec<f64>>);

fn load_covariates(
    path: &Path,
    countries: &BTreeMap<String, String>,
    digests: &mut BTreeMap<String, String>,
) -> Result<CovariateGrid> {
    let t = Table::read(path, digests)?;
    let (c, y) = (t.column("country")?, t.column("year")?);
    let names: Vec<String> = t
        .header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != c && *i != y)
        .map(|(_, h)| h.clone())
        .collect();
    let cols: Vec<usize> = (0..t.header.len()).filter(|i| *i != c && *i != y).collect();
    let mut out = BTreeMap::new();
    let mut issues = Vec::new();
    for (i, row) in t.rows.iter().enumerate() {
        if !countries.contains_key(&row[c]) {
            issues.push(t.issue(i, format!("unknown country '{}'", row[c])));
            continue;
        }
        let year = match parse_year(&row[y]) {
            Ok(v) => v,
            Err(e) => {
                issues.push(t.issue(i, e));
                continue;
            }
        };
        let mut values = Vec::with_capacity(cols.len());
        for &k in &cols {
            match parse_f64(&row[k]) {
                Ok(v) => values.push(v),
                Err(e) => issues.push(t.issue(i, format!("{}: {e}", t.header[k]))),
            }
        }
        if values.len() == cols.len() && out.insert((row[c].clone(), year), values).is_some() {
            issues.push(t.issue(i, format!("duplicate covariate row for {} {year}", row[c])));
        }
    }
    finish(issues)?;
    Ok((names, out))
}

fn load_populations(
    path: &Path,
    countries: &BTreeMap<String, String>,
    digests: &mut BTreeMap<String, String>,
) -> Result<BTreeMap<PopulationKey, f64>> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let t = Table::read(path, digests)?;
    let (c, y, s, p) = (
        t.column("country")?,
        t.column("year")?,
        t.column("stratum")?,
        t.column("persons")?,
    );
    let mut out = BTreeMap::new();
    let mut issues = Vec::new();
    for (i, row) in t.rows.iter().enumerate() {
        if !countries.contains_key(&row[c]) {
            issues.push(t.issue(i, format!("unknown country '{}'", row[c])));
            continue;
        }
        let parsed = (|| -> std::result::Result<(i32, Stratum, f64), String> {
            let year = parse_year(&row[y])?;
            let stratum = Stratum::parse(&row[s]).map_err(|e| e.to_string())?;
            let persons = parse_f64(&row[p])?;
            if persons < 0.0 {
                return Err(format!("negative population {persons}"));
            }
            Ok((year, stratum, persons))
        })();
        match parsed {
            Ok((year, stratum, persons)) => {
                if out.insert((row[c].clone(), year, stratum), persons).is_some() {
                    issues.push(t.issue(i, format!("duplicate population row for {} {year} {stratum}", row[c])));
                }
            }
            Err(e) => issues.push(t.issue(i, e)),
        }
    }
    // stratum rows must add up to the total where both are given
    for ((country, year, stratum), total) in &out {
        if *stratum != Stratum::All {
            continue;
        }
        let u = out.get(&(country.clone(), *year, Stratum::Urban));
        let r = out.get(&(country.clone(), *year, Stratum::Rural));
        if let (Some(u), Some(r)) = (u, r) {
            if ((u + r) - total).abs() > 1e-9 * total.max(1.0) {
                issues.push(RowIssue {
                    file: t.label.clone(),
                    row: 0,
                    message: format!("urban + rural population of {country} {year} differs from the total"),
                });
            }
        }
    }
    finish(issues)?;
    Ok(out)
}

fn load_studies(
    path: &Path,
    hier: &HierarchyConfig,
    options: LoadOptions,
    digests: &mut BTreeMap<String, String>,
) -> Result<(Vec<StudyRecord>, Vec<bool>)> {
    let t = Table::read(path, digests)?;
    let col = |n: &str| t.column(n);
    let (id, country, year) = (col("study_id")?, col("country")?, col("year")?);
    let (national, full_age, stratum, kind) = (col("national")?, col("full_age")?, col("stratum")?, col("kind")?);
    let (mean, prev2, prev3) = (col("mean")?, col("prev2")?, col("prev3")?);
    let (n_nominal, clusters) = (col("n_nominal")?, col("cluster_col_present")?);
    let scale = if options.percent { 0.01 } else { 1.0 };
    let mut issues = Vec::new();
    let mut out = Vec::new();
    let mut flags = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, row) in t.rows.iter().enumerate() {
        let before = issues.len();
        let mut bad = |msg: String| issues.push(t.issue(i, msg));
        if row[id].is_empty() {
            bad("empty study_id".into());
        } else if !seen.insert(row[id].clone()) {
            bad(format!("duplicate study_id '{}'", row[id]));
        }
        if hier.country_index(&row[country]).is_err() {
            bad(format!("unknown country '{}'", row[country]));
        }
        let yr = parse_year(&row[year]).map_err(&mut bad).ok();
        if let Some(yr) = yr {
            if hier.year_index(yr).is_err() {
                bad(format!(
                    "year {yr} outside {}..={}",
                    hier.first_year(),
                    hier.last_year()
                ));
            }
        }
        let nat = parse_flag(&row[national])
            .map_err(|e| bad(format!("national: {e}")))
            .ok();
        let full = parse_flag(&row[full_age])
            .map_err(|e| bad(format!("full_age: {e}")))
            .ok();
        let strat = Stratum::parse(&row[stratum]).map_err(|e| bad(e.to_string())).ok();
        if let Some(s) = strat {
            if s != Stratum::All && !options.strata {
                bad(format!("stratum '{s}' but strata are not modeled"));
            }
        }
        let knd = match row[kind].as_str() {
            "micro" => Some(StudyKind::Micro),
            "agg" => Some(StudyKind::Aggregate),
            other => {
                bad(format!("kind '{other}' is not micro or agg"));
                None
            }
        };
        let m = parse_opt_f64(&row[mean])
            .map_err(|e| bad(format!("mean: {e}")))
            .ok()
            .flatten();
        let p2 = parse_opt_f64(&row[prev2])
            .map_err(|e| bad(format!("prev2: {e}")))
            .ok()
            .flatten();
        let p3 = parse_opt_f64(&row[prev3])
            .map_err(|e| bad(format!("prev3: {e}")))
            .ok()
            .flatten();
        let n = if row[n_nominal].is_empty() {
            Some(0)
        } else {
            row[n_nominal]
                .parse::<u64>()
                .map_err(|_| bad(format!("n_nominal '{}' is not a count", row[n_nominal])))
                .ok()
        };
        let cl = parse_flag(&row[clusters])
            .map_err(|e| bad(format!("cluster_col_present: {e}")))
            .ok();
        if issues.len() > before {
            continue;
        }
        let data = match knd.expect("checked") {
            StudyKind::Micro => StudyData::Micro(Vec::new()),
            StudyKind::Aggregate => StudyData::Aggregate {
                summaries: Summaries {
                    mean: m,
                    prev2: p2.map(|v| v * scale),
                    prev3: p3.map(|v| v * scale),
                },
                nominal_n: n.expect("checked"),
            },
        };
        let rec = StudyRecord {
            study_id: row[id].clone(),
            country: row[country].clone(),
            year: yr.expect("checked"),
            national: nat.expect("checked"),
            full_age: full.expect("checked"),
            stratum: strat.expect("checked"),
            data,
            ess: 0.0,
        };
        if rec.kind() == StudyKind::Aggregate {
            for msg in rec.issues() {
                issues.push(t.issue(i, msg));
            }
        }
        out.push((i, rec));
        flags.push(cl.expect("checked"));
    }
    finish(issues)?;
    Ok((out.into_iter().map(|(_, r)| r).collect(), flags))
}

fn load_micro(
    path: &Path,
    studies: &mut [StudyRecord],
    clustered: &[bool],
    digests: &mut BTreeMap<String, String>,
) -> Result<()> {
    let t = Table::read(path, digests)?;
    let (id, value, weight) = (t.column("study_id")?, t.column("value")?, t.column("weight")?);
    let cluster = t.optional_column("cluster_id");
    let index: BTreeMap<&str, usize> = studies
        .iter()
        .enumerate()
        .map(|(i, s)| (s.study_id.as_str(), i))
        .collect();
    let mut obs: Vec<Vec<MicroObs>> = vec![Vec::new(); studies.len()];
    let mut issues = Vec::new();
    for (i, row) in t.rows.iter().enumerate() {
        let Some(&s) = index.get(row[id].as_str()) else {
            issues.push(t.issue(i, format!("unknown study_id '{}'", row[id])));
            continue;
        };
        if studies[s].kind() != StudyKind::Micro {
            issues.push(t.issue(i, format!("study '{}' is not a micro study", row[id])));
            continue;
        }
        let v = parse_f64(&row[value])
            .map_err(|e| issues.push(t.issue(i, format!("value: {e}"))))
            .ok();
        let w = parse_f64(&row[weight])
            .map_err(|e| issues.push(t.issue(i, format!("weight: {e}"))))
            .ok();
        if let Some(w) = w {
            if w <= 0.0 {
                issues.push(t.issue(i, format!("nonpositive weight {w}")));
                continue;
            }
        }
        let c = cluster.map(|k| row[k].clone()).filter(|c| !c.is_empty());
        if clustered[s] && c.is_none() {
            issues.push(t.issue(i, format!("study '{}' declares clusters but the row has none", row[id])));
            continue;
        }
        if let (Some(value), Some(weight)) = (v, w) {
            obs[s].push(MicroObs {
                value,
                weight,
                cluster: if clustered[s] { c } else { None },
            });
        }
    }
    for (s, o) in obs.into_iter().enumerate() {
        if let StudyData::Micro(slot) = &mut studies[s].data {
            if o.is_empty() {
                issues.push(RowIssue {
                    file: t.label.clone(),
                    row: 0,
                    message: format!("micro study '{}' has no observations", studies[s].study_id),
                });
            }
            *slot = o;
        }
    }
    finish(issues)
}

/// Fills every study's ESS: design-effect estimates for microdata, and the nominal size
/// divided by the median microdata design effect for aggregates. Returns warnings.
pub fn fill_ess(studies: &mut [StudyRecord]) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let mut deffs = Vec::new();
    for s in studies.iter_mut() {
        if let StudyData::Micro(obs) = &s.data {
            let d = estimate_design_effect(obs)?;
            if let Some(w) = &d.warning {
                warnings.push(format!("study {}: {w}", s.study_id));
            }
            s.ess = d.ess(obs.len());
            deffs.push(d.deff);
        }
    }
    if studies.iter().any(|s| s.kind() == StudyKind::Aggregate) {
        let median = if deffs.is_empty() {
            warnings.push("no microdata studies; aggregate ESS imputed with design effect 1".into());
            1.0
        } else {
            median_design_effect(&deffs)?
        };
        for s in studies.iter_mut() {
            if let StudyData::Aggregate { nominal_n, .. } = s.data {
                s.ess = impute_ess(nominal_n, median)?;
            }
        }
    }
    Ok(warnings)
}

impl DatasetBundle {
    /// Assembles and validates a bundle from in-memory parts.
    pub fn from_parts(
        mut studies: Vec<StudyRecord>,
        region_of: BTreeMap<String, String>,
        covariate_names: Vec<String>,
        covariates: BTreeMap<(String, i32), Vec<f64>>,
        populations: BTreeMap<PopulationKey, f64>,
        strata: bool,
    ) -> Result<Self> {
        let years: BTreeSet<i32> = covariates.keys().map(|(_, y)| *y).collect();
        let (first, last) = match (years.first(), years.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::Config("no covariate rows".into())),
        };
        let mut hierarchy = HierarchyConfig::new(&region_of, first, last, covariate_names.clone(), &covariates)?;
        if strata {
            let shares = urban_shares(&hierarchy, &populations)?;
            hierarchy = hierarchy.with_urban_share(shares)?;
        }
        let mut issues = Vec::new();
        for (i, s) in studies.iter().enumerate() {
            if let Err(e) = s.design(&hierarchy) {
                issues.push(RowIssue {
                    file: "studies".into(),
                    row: i + 1,
                    message: e.to_string(),
                });
            }
            for msg in s.issues() {
                issues.push(RowIssue {
                    file: "studies".into(),
                    row: i + 1,
                    message: msg,
                });
            }
        }
        finish(issues)?;
        let warnings = fill_ess(&mut studies)?;
        Ok(Self {
            studies,
            hierarchy,
            region_of,
            covariate_names,
            covariates,
            populations,
            digests: BTreeMap::new(),
            warnings,
        })
    }

    /// Total persons of a country-year, from the combined row or the two stratum rows.
    pub fn population(&self, country: &str, year: i32) -> Option<f64> {
        let get = |s| self.populations.get(&(country.to_string(), year, s)).copied();
        get(Stratum::All).or_else(|| Some(get(Stratum::Urban)? + get(Stratum::Rural)?))
    }

    /// Model context with prior bounds from the data unless given.
    pub fn context(&self, options: ModelOptions, bounds: Option<PriorBounds>) -> Result<ModelContext> {
        let designs = self
            .studies
            .iter()
            .map(|s| s.design(&self.hierarchy))
            .collect::<Result<_>>()?;
        let bounds = match bounds {
            Some(b) => b,
            None => PriorBounds::from_data(&self.pooled_values()),
        };
        Ok(ModelContext {
            hier: self.hierarchy.clone(),
            designs,
            options,
            bounds,
        })
    }

    /// Microdata values and reported means.
    pub fn pooled_values(&self) -> Vec<f64> {
        self.studies
            .iter()
            .flat_map(|s| match &s.data {
                StudyData::Micro(obs) => obs.iter().map(|o| o.value).collect::<Vec<_>>(),
                StudyData::Aggregate { summaries, .. } => summaries.mean.into_iter().collect(),
            })
            .collect()
    }

    pub fn prepared(&self) -> Result<PreparedStudies> {
        PreparedStudies::new(&self.studies)
    }

    /// Digest over all source digests, in file-name order.
    pub fn digest(&self) -> String {
        let joined: String = self.digests.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        sha256_hex(joined.as_bytes())
    }

    /// A copy restricted to the given studies (ESS is re-estimated).
    pub fn with_studies(&self, studies: Vec<StudyRecord>) -> Result<Self> {
        let mut out = Self::from_parts(
            studies,
            self.region_of.clone(),
            self.covariate_names.clone(),
            self.covariates.clone(),
            self.populations.clone(),
            self.hierarchy.has_urban_share(),
        )?;
        out.digests = self.digests.clone();
        Ok(out)
    }
}

pub fn urban_shares(hier: &HierarchyConfig, pops: &BTreeMap<PopulationKey, f64>) -> Result<Vec<Vec<f64>>> {
    let mut missing = Vec::new();
    let mut out = vec![vec![0.0; hier.n_years()]; hier.n_countries()];
    for (j, c) in hier.countries().iter().enumerate() {
        for (t, slot) in out[j].iter_mut().enumerate() {
            let year = hier.first_year() + t as i32;
            let u = pops.get(&(c.clone(), year, Stratum::Urban));
            let r = pops.get(&(c.clone(), year, Stratum::Rural));
            match (u, r) {
                (Some(u), Some(r)) if u + r > 0.0 => *slot = u / (u + r),
                _ => missing.push(format!("{c} {year}")),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "urban and rural populations missing for: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

/// Loads and validates all tables.
pub fn load_dataset(paths: &DatasetPaths, options: LoadOptions) -> Result<DatasetBundle> {
    let mut digests = BTreeMap::new();
    let region_of = load_hierarchy(&paths.hierarchy, &mut digests)?;
    let (covariate_names, covariates) = load_covariates(&paths.covariates, &region_of, &mut digests)?;
    let populations = load_populations(&paths.populations, &region_of, &mut digests)?;
    let years: BTreeSet<i32> = covariates.keys().map(|(_, y)| *y).collect();
    let (first, last) = match (years.first(), years.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Config("covariates.csv has no rows".into())),
    };
    let hier = HierarchyConfig::new(&region_of, first, last, covariate_names.clone(), &covariates)?;
    let (mut studies, clustered) = load_studies(&paths.studies, &hier, options, &mut digests)?;
    if paths.micro.exists() {
        load_micro(&paths.micro, &mut studies, &clustered, &mut digests)?;
    } else if studies.iter().any(|s| s.kind() == StudyKind::Micro) {
        return Err(Error::Config(format!(
            "{} is required for micro studies",
            paths.micro.display()
        )));
    }
    let mut bundle = DatasetBundle::from_parts(
        studies,
        region_of,
        covariate_names,
        covariates,
        populations,
        options.strata,
    )?;
    bundle.digests = digests;
    Ok(bundle)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the bundle as the standard tables in `dir` (prevalences as fractions).
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let paths = DatasetPaths::in_dir(dir);

    let mut w = csv::Writer::from_path(&paths.hierarchy)?;
    w.write_record(["country", "region"])?;
    for (c, r) in &bundle.region_of {
        w.write_record([c, r])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.covariates)?;
    let mut header = vec!["country".to_string(), "year".to_string()];
    header.extend(bundle.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for ((c, y), values) in &bundle.covariates {
        let mut row = vec![c.clone(), y.to_string()];
        row.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    if !bundle.populations.is_empty() {
        let mut w = csv::Writer::from_path(&paths.populations)?;
        w.write_record(["country", "year", "stratum", "persons"])?;
        for ((c, y, s), p) in &bundle.populations {
            w.write_record([c.clone(), y.to_string(), s.to_string(), p.to_string()])?;
        }
        w.flush()?;
    }

    let mut ws = csv::Writer::from_path(&paths.studies)?;
    ws.write_record([
        "study_id",
        "country",
        "year",
        "national",
        "full_age",
        "stratum",
        "kind",
        "mean",
        "prev2",
        "prev3",
        "n_nominal",
        "cluster_col_present",
    ])?;
    let mut wm = csv::Writer::from_path(&paths.micro)?;
    wm.write_record(["study_id", "value", "weight", "cluster_id"])?;
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    for s in &bundle.studies {
        let (kind, summaries, n, clustered) = match &s.data {
            StudyData::Micro(obs) => {
                let clustered = !obs.is_empty() && obs.iter().all(|o| o.cluster.is_some());
                for o in obs {
                    wm.write_record([
                        s.study_id.clone(),
                        o.value.to_string(),
                        o.weight.to_string(),
                        o.cluster.clone().unwrap_or_default(),
                    ])?;
                }
                ("micro", Summaries::default(), String::new(), clustered)
            }
            StudyData::Aggregate { summaries, nominal_n } => ("agg", *summaries, nominal_n.to_string(), false),
        };
        ws.write_record([
            s.study_id.clone(),
            s.country.clone(),
            s.year.to_string(),
            flag(s.national),
            flag(s.full_age),
            s.stratum.to_string(),
            kind.to_string(),
            fmt_opt(summaries.mean),
            fmt_opt(summaries.prev2),
            fmt_opt(summaries.prev3),
            n,
            flag(clustered),
        ])?;
    }
    ws.flush()?;
    wm.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn minimal(dir: &Path) {
        write(dir, "hierarchy.csv", "country,region\nAAA,R1\n");
        write(
            dir,
            "covariates.csv",
            "country,year,gdp\nAAA,2000,1.0\nAAA,2001,1.5\nAAA,2002,2.5\n",
        );
        write(
            dir,
            "studies.csv",
            "study_id,country,year,national,full_age,stratum,kind,mean,prev2,prev3,n_nominal,cluster_col_present\n\
             s1,AAA,2001,1,1,all,micro,,,,,1\n",
        );
        let mut micro = String::from("study_id,value,weight,cluster_id\n");
        for i in 0..40 {
            let v = -1.5 + 0.1 * i as f64 + if i % 3 == 0 { 0.05 } else { 0.0 };
            micro.push_str(&format!("s1,{v},{},c{}\n", 1.0 + (i % 4) as f64 * 0.5, i % 8));
        }
        write(dir, "micro.csv", &micro);
    }

    #[test]
    fn minimal_bundle_round_trips() {
        let a = tempfile::tempdir().unwrap();
        minimal(a.path());
        let first = load_dataset(&DatasetPaths::in_dir(a.path()), LoadOptions::default()).unwrap();
        assert!(first.studies[0].ess > 0.0);
        let b = tempfile::tempdir().unwrap();
        save_dataset(&first, b.path()).unwrap();
        let second = load_dataset(&DatasetPaths::in_dir(b.path()), LoadOptions::default()).unwrap();
        assert_eq!(first.studies, second.studies);
        assert_eq!(first.hierarchy, second.hierarchy);
        assert_eq!(first.covariates, second.covariates);
        // saving the reloaded bundle reproduces the same files byte for byte
        let c = tempfile::tempdir().unwrap();
        save_dataset(&second, c.path()).unwrap();
        for f in ["studies.csv", "micro.csv", "hierarchy.csv", "covariates.csv"] {
            assert_eq!(
                fs::read(b.path().join(f)).unwrap(),
                fs::read(c.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn prev2_only_aggregate_and_percent_flag() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        write(
            d.path(),
            "studies.csv",
            "study_id,country,year,national,full_age,stratum,kind,mean,prev2,prev3,n_nominal,cluster_col_present\n\
             s1,AAA,2001,1,1,all,micro,,,,,1\n\
             s2,AAA,2002,0,1,all,agg,,31.5,,400,0\n",
        );
        let b = load_dataset(
            &DatasetPaths::in_dir(d.path()),
            LoadOptions {
                percent: true,
                strata: false,
            },
        )
        .unwrap();
        let StudyData::Aggregate { summaries, .. } = &b.studies[1].data else {
            panic!("expected aggregate");
        };
        assert_eq!(summaries.reported().len(), 1);
        assert!((summaries.prev2.unwrap() - 0.315).abs() < 1e-15);
        let micro_deff = 40.0 / b.studies[0].ess;
        assert!((b.studies[1].ess - 400.0 / micro_deff).abs() < 1e-9);
    }

    #[test]
    fn invalid_rows_are_all_reported() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        write(
            d.path(),
            "studies.csv",
            "study_id,country,year,national,full_age,stratum,kind,mean,prev2,prev3,n_nominal,cluster_col_present\n\
             s1,AAA,2001,1,1,all,micro,,,,,1\n\
             s2,AAA,2002,0,1,all,agg,-1.2,0.20,0.30,400,0\n\
             s3,ZZZ,2002,0,1,all,agg,-1.2,0.30,0.10,400,0\n",
        );
        let err = load_dataset(&DatasetPaths::in_dir(d.path()), LoadOptions::default()).unwrap_err();
        let Error::Validation(issues) = err else {
            panic!("expected validation error");
        };
        assert!(issues.iter().any(|i| i.row == 2 && i.message.contains("prev3")));
        assert!(issues
            .iter()
            .any(|i| i.row == 3 && i.message.contains("unknown country")));
    }

    #[test]
    fn nonpositive_weight_rejected_with_row() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        let mut body = fs::read_to_string(d.path().join("micro.csv")).unwrap();
        body.push_str("s1,0.3,0,c1\n");
        write(d.path(), "micro.csv", &body);
        let Error::Validation(issues) =
            load_dataset(&DatasetPaths::in_dir(d.path()), LoadOptions::default()).unwrap_err()
        else {
            panic!("expected validation error");
        };
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].row, 41);
    }

    #[test]
    fn missing_covariate_year_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        write(d.path(), "hierarchy.csv", "country,region\nAAA,R1\nBBB,R1\n");
        let mut cov = fs::read_to_string(d.path().join("covariates.csv")).unwrap();
        cov.push_str("BBB,2000,1.0\nBBB,2002,1.0\n");
        write(d.path(), "covariates.csv", &cov);
        let err = load_dataset(&DatasetPaths::in_dir(d.path()), LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("BBB 2001"), "{err}");
    }
}
