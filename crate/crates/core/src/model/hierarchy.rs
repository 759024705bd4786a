use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Countries, regions, the modeled year grid, and the standardized covariate grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    countries: Vec<String>,
    regions: Vec<String>,
    region_of: Vec<usize>,
    first_year: i32,
    n_years: usize,
    time_codes: Vec<f64>,
    covariate_names: Vec<String>,
    /// `[country][year]` standardized covariate rows.
    covariates: Vec<Vec<Vec<f64>>>,
    /// `[country][year]` urban population share, when strata are modeled.
    urban_share: Option<Vec<Vec<f64>>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl HierarchyConfig {
    /// Builds the hierarchy from raw (unstandardized) covariates keyed by `(country, year)`.
    ///
    /// Every country needs a covariate row for every year in `first_year..=last_year`.
    pub fn new(
        region_of: &BTreeMap<String, String>,
        first_year: i32,
        last_year: i32,
        covariate_names: Vec<String>,
        raw_covariates: &BTreeMap<(String, i32), Vec<f64>>,
    ) -> Result<Self> {
        if last_year < first_year || (last_year - first_year + 1) < 3 {
            return Err(Error::Config(format!(
                "year range {first_year}..={last_year} has fewer than 3 points"
            )));
        }
        if region_of.is_empty() {
            return Err(Error::Config("hierarchy has no countries".into()));
        }
        let n_years = (last_year - first_year + 1) as usize;
        let countries: Vec<String> = region_of.keys().cloned().collect();
        let mut regions: Vec<String> = region_of.values().cloned().collect();
        regions.sort();
        regions.dedup();
        let region_idx: HashMap<&str, usize> = regions.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
        let region_of_idx = countries.iter().map(|c| region_idx[region_of[c].as_str()]).collect();

        let p = covariate_names.len();
        let mut missing = Vec::new();
        let mut grid = vec![vec![Vec::new(); n_years]; countries.len()];
        for (j, c) in countries.iter().enumerate() {
            for (t, row) in grid[j].iter_mut().enumerate() {
                let year = first_year + t as i32;
                match raw_covariates.get(&(c.clone(), year)) {
                    Some(v) if v.len() == p && v.iter().all(|x| x.is_finite()) => *row = v.clone(),
                    Some(_) => {
                        return Err(Error::Config(format!(
                            "covariate row for {c} {year} has the wrong width or non-finite values"
                        )))
                    }
                    None => missing.push(format!("{c} {year}")),
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "covariates missing for country-years: {}",
                missing.join(", ")
            )));
        }
        standardize(&mut grid, p);

        let center = (first_year as f64 + last_year as f64) / 2.0;
        let time_codes = (0..n_years)
            .map(|t| (first_year as f64 + t as f64 - center) / 10.0)
            .collect();
        let mut h = Self {
            countries,
            regions,
            region_of: region_of_idx,
            first_year,
            n_years,
            time_codes,
            covariate_names,
            covariates: grid,
            urban_share: None,
            index: HashMap::new(),
        };
        h.rebuild_index();
        Ok(h)
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self.countries.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    }

    /// Attaches urban population shares (`[country][year]`, each in `[0, 1]`).
    pub fn with_urban_share(mut self, share: Vec<Vec<f64>>) -> Result<Self> {
        if share.len() != self.countries.len()
            || share.iter().any(|r| r.len() != self.n_years)
            || share.iter().flatten().any(|&s| !(0.0..=1.0).contains(&s))
        {
            return Err(Error::Config("urban share grid malformed".into()));
        }
        self.urban_share = Some(share);
        Ok(self)
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years as i32 - 1
    }

    pub fn region_of(&self, country: usize) -> usize {
        self.region_of[country]
    }

    pub fn countries_in_region(&self, region: usize) -> impl Iterator<Item = usize> + '_ {
        self.region_of
            .iter()
            .enumerate()
            .filter(move |(_, &r)| r == region)
            .map(|(j, _)| j)
    }

    pub fn country_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .or_else(|| self.countries.iter().position(|c| c == name))
            .ok_or_else(|| Error::Lookup(format!("unknown country '{name}'")))
    }

    pub fn year_index(&self, year: i32) -> Result<usize> {
        if year < self.first_year || year > self.last_year() {
            return Err(Error::Lookup(format!(
                "year {year} outside modeled range {}..={}",
                self.first_year,
                self.last_year()
            )));
        }
        Ok((year - self.first_year) as usize)
    }

    pub fn time_code(&self, year_idx: usize) -> f64 {
        self.time_codes[year_idx]
    }

    pub fn time_codes(&self) -> &[f64] {
        &self.time_codes
    }

    pub fn covariates(&self, country: usize, year_idx: usize) -> &[f64] {
        &self.covariates[country][year_idx]
    }

    pub fn urban_share(&self, country: usize, year_idx: usize) -> Option<f64> {
        self.urban_share.as_ref().map(|s| s[country][year_idx])
    }

    pub fn has_urban_share(&self) -> bool {
        self.urban_share.is_some()
    }
}

/// Centers and scales each covariate column to mean 0, SD 1 over the whole grid.
fn standardize(grid: &mut [Vec<Vec<f64>>], p: usize) {
    let rows: usize = grid.iter().map(Vec::len).sum();
    for k in 0..p {
        let mean = grid.iter().flatten().map(|r| r[k]).sum::<f64>() / rows as f64;
        let var = grid.iter().flatten().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (rows as f64 - 1.0).max(1.0);
        let sd = var.sqrt();
        for r in grid.iter_mut().flatten() {
            r[k] = if sd > 0.0 { (r[k] - mean) / sd } else { 0.0 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HierarchyConfig {
        let regions: BTreeMap<String, String> = [("A", "R1"), ("B", "R1"), ("C", "R2")]
            .iter()
            .map(|(c, r)| (c.to_string(), r.to_string()))
            .collect();
        let mut cov = BTreeMap::new();
        for (j, c) in ["A", "B", "C"].iter().enumerate() {
            for y in 2000..=2004 {
                cov.insert((c.to_string(), y), vec![j as f64 + 0.1 * (y - 2000) as f64]);
            }
        }
        HierarchyConfig::new(&regions, 2000, 2004, vec!["x1".into()], &cov).unwrap()
    }

    #[test]
    fn time_codes_are_centered_decades() {
        let h = small();
        assert_eq!(h.time_codes(), &[-0.2, -0.1, 0.0, 0.1, 0.2]);
        assert_eq!(h.year_index(2003).unwrap(), 3);
        assert!(matches!(h.year_index(2005), Err(Error::Lookup(_))));
    }

    #[test]
    fn covariates_are_standardized() {
        let h = small();
        let vals: Vec<f64> = (0..3)
            .flat_map(|j| (0..5).map(move |t| (j, t)))
            .map(|(j, t)| h.covariates(j, t)[0])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regions_and_lookup() {
        let h = small();
        assert_eq!(h.n_regions(), 2);
        assert_eq!(h.countries_in_region(0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(h.country_index("C").unwrap(), 2);
        assert!(h.country_index("Z").is_err());
    }

    #[test]
    fn missing_covariate_is_an_error() {
        let regions: BTreeMap<String, String> = [("A".to_string(), "R".to_string())].into_iter().collect();
        let mut cov = BTreeMap::new();
        for y in 2000..=2003 {
            cov.insert(("A".to_string(), y), vec![1.0]);
        }
        let err = HierarchyConfig::new(&regions, 2000, 2004, vec!["x".into()], &cov).unwrap_err();
        assert!(err.to_string().contains("A 2004"));
        assert!(HierarchyConfig::new(&regions, 2000, 2001, vec!["x".into()], &cov).is_err());
    }
}
