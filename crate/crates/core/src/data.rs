//! Stratified count data: record/dataset types, design vectors, CSV ingestion.
//!
//! The unit of data is one stratum of one drug's pre/post cohort: a
//! demographic cell (age group, sex, their interaction) in one time window,
//! with the number of persons at risk and the number of events observed.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Length of the design vector: intercept + 3 demographic covariates + exposure.
pub const DESIGN_DIM: usize = 5;

/// Number of non-exposure covariates (age, sex, age-sex interaction).
pub const COVARIATE_DIM: usize = 3;

/// Index of the exposure indicator inside the design vector.
pub const EXPOSURE_COL: usize = DESIGN_DIM - 1;

/// One row of the aggregated count table: a (drug, demographic stratum,
/// time window) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratumRecord {
    /// Dense drug index in `0..n_drugs`.
    pub drug: usize,
    /// 1 = age over 18.
    pub age_adult: bool,
    /// 1 = female.
    pub sex_female: bool,
    /// Product of the two above; validated, not recomputed, so upstream
    /// corruption is caught at ingestion.
    pub age_sex: bool,
    /// 1 = post-exposure window.
    pub post_exposure: bool,
    /// Persons at risk in this stratum.
    pub n_at_risk: u64,
    /// Events observed in this stratum.
    pub n_events: u64,
}

impl StratumRecord {
    /// Design vector `[1, age, sex, age*sex, exposure]`.
    ///
    /// The intercept occupies index 0 and the exposure indicator is always
    /// the last element; drug-specific and shared coefficient vectors use
    /// the same layout.
    pub fn design_vector(&self) -> [f64; DESIGN_DIM] {
        [
            1.0,
            self.age_adult as u8 as f64,
            self.sex_female as u8 as f64,
            self.age_sex as u8 as f64,
            self.post_exposure as u8 as f64,
        ]
    }

    fn validate(&self, location: &str) -> Result<()> {
        if self.n_events > self.n_at_risk {
            return Err(Error::Validation(format!(
                "{location}: n_events ({}) exceeds n_at_risk ({}) in stratum \
                 (drug={}, age={}, sex={}, time={})",
                self.n_events,
                self.n_at_risk,
                self.drug,
                self.age_adult as u8,
                self.sex_female as u8,
                self.post_exposure as u8,
            )));
        }
        if self.age_sex != (self.age_adult && self.sex_female) {
            return Err(Error::Validation(format!(
                "{location}: age_sex is not the product of age and sex \
                 (drug={}, age={}, sex={}, age_sex={})",
                self.drug, self.age_adult as u8, self.sex_female as u8, self.age_sex as u8,
            )));
        }
        Ok(())
    }
}

/// A validated collection of stratum records with a dense drug index.
///
/// Immutable after construction; shareable across threads.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<StratumRecord>,
    n_drugs: usize,
    covariate_dim: usize,
    drug_names: Vec<String>,
    // Record indices grouped by drug, for per-drug likelihood work.
    by_drug: Vec<Vec<usize>>,
}

impl Dataset {
    /// Build a dataset from records and the dense-index-to-label map.
    ///
    /// Validates every record, rejects duplicate (drug, age, sex, time)
    /// strata, and requires all drug indices to be below `drug_names.len()`.
    /// Drugs missing a pre- or post-exposure record are logged as warnings
    /// but accepted.
    pub fn new(records: Vec<StratumRecord>, drug_names: Vec<String>) -> Result<Self> {
        let n_drugs = drug_names.len();
        if n_drugs == 0 {
            return Err(Error::EmptyInput("dataset has no drugs".into()));
        }
        let mut seen: HashMap<(usize, bool, bool, bool), usize> = HashMap::new();
        for (idx, rec) in records.iter().enumerate() {
            rec.validate(&format!("record {idx}"))?;
            if rec.drug >= n_drugs {
                return Err(Error::Validation(format!(
                    "record {idx}: drug index {} out of range (n_drugs={n_drugs})",
                    rec.drug
                )));
            }
            let key = (rec.drug, rec.age_adult, rec.sex_female, rec.post_exposure);
            if let Some(prev) = seen.insert(key, idx) {
                return Err(Error::Validation(format!(
                    "records {prev} and {idx}: duplicate stratum \
                     (drug={}, age={}, sex={}, time={})",
                    rec.drug, rec.age_adult as u8, rec.sex_female as u8, rec.post_exposure as u8,
                )));
            }
        }
        let mut by_drug = vec![Vec::new(); n_drugs];
        for (idx, rec) in records.iter().enumerate() {
            by_drug[rec.drug].push(idx);
        }
        for (drug, idxs) in by_drug.iter().enumerate() {
            let has_pre = idxs.iter().any(|&i| !records[i].post_exposure);
            let has_post = idxs.iter().any(|&i| records[i].post_exposure);
            if !has_pre || !has_post {
                log::warn!(
                    "drug {} ({}) is missing {} records",
                    drug,
                    drug_names[drug],
                    if !has_pre { "pre-exposure" } else { "post-exposure" },
                );
            }
        }
        Ok(Dataset {
            records,
            n_drugs,
            covariate_dim: COVARIATE_DIM,
            drug_names,
            by_drug,
        })
    }

    pub fn records(&self) -> &[StratumRecord] {
        &self.records
    }

    pub fn n_drugs(&self) -> usize {
        self.n_drugs
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn drug_names(&self) -> &[String] {
        &self.drug_names
    }

    /// Records belonging to one drug.
    pub fn drug_records(&self, drug: usize) -> impl Iterator<Item = &StratumRecord> {
        self.by_drug[drug].iter().map(move |&i| &self.records[i])
    }

    pub fn total_events(&self) -> u64 {
        self.records.iter().map(|r| r.n_events).sum()
    }

    pub fn total_at_risk(&self) -> u64 {
        self.records.iter().map(|r| r.n_at_risk).sum()
    }

    /// Read a dataset from a stratum CSV with header
    /// `drug,age,sex,age_sex,time,n,events`.
    ///
    /// Drug labels are remapped to a dense 0-based index in order of first
    /// appearance; the label map is retained in the dataset.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let header = reader.headers()?.clone();
        let expected = ["drug", "age", "sex", "age_sex", "time", "n", "events"];
        let got: Vec<&str> = header.iter().collect();
        if got != expected {
            return Err(Error::parse(
                format!("{}:1", path.display()),
                format!("header must be `{}`, got `{}`", expected.join(","), got.join(",")),
            ));
        }

        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2; // 1-based, after the header
            let loc = format!("{}:{line}", path.display());
            let row = row?;
            if row.len() != expected.len() {
                return Err(Error::parse(loc, format!("expected 7 fields, got {}", row.len())));
            }
            let label = row[0].to_string();
            let drug = *index.entry(label.clone()).or_insert_with(|| {
                names.push(label);
                names.len() - 1
            });
            let bit = |field: usize, name: &str| -> Result<bool> {
                match &row[field] {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::parse(
                        loc.clone(),
                        format!("column `{name}` must be 0 or 1, got `{other}`"),
                    )),
                }
            };
            let count = |field: usize, name: &str| -> Result<u64> {
                row[field].parse().map_err(|_| {
                    Error::parse(
                        loc.clone(),
                        format!("column `{name}` must be a nonnegative integer, got `{}`", &row[field]),
                    )
                })
            };
            records.push(StratumRecord {
                drug,
                age_adult: bit(1, "age")?,
                sex_female: bit(2, "sex")?,
                age_sex: bit(3, "age_sex")?,
                post_exposure: bit(4, "time")?,
                n_at_risk: count(5, "n")?,
                n_events: count(6, "events")?,
            });
        }
        Dataset::new(records, names)
    }

    /// Write the dataset back out in the stratum CSV format.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "drug,age,sex,age_sex,time,n,events")?;
        for rec in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.drug_names[rec.drug],
                rec.age_adult as u8,
                rec.sex_female as u8,
                rec.age_sex as u8,
                rec.post_exposure as u8,
                rec.n_at_risk,
                rec.n_events,
            )?;
        }
        Ok(())
    }

    /// Write the companion two-column map from dense index to drug label.
    pub fn write_drug_names(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "index,drug")?;
        for (i, name) in self.drug_names.iter().enumerate() {
            writeln!(out, "{i},{name}")?;
        }
        Ok(())
    }
}
