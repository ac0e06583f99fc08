//! Pooled multi-study data model: target sample (study 0) plus one or more
//! studies, with validation of the structural assumptions and CSV I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{mean, variance, Scalar};

/// One unit as supplied to [`PooledDataset::from_records`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord<T> {
    /// 0 for the target sample, otherwise the study label.
    pub study: u32,
    pub treatment: Option<bool>,
    pub outcome: Option<T>,
    /// Values in the dataset's covariate column order.
    pub covariates: Vec<T>,
}

impl<T> UnitRecord<T> {
    pub fn in_studies(&self) -> bool {
        self.study != 0
    }
}

/// A named covariate; categorical covariates span several indicator columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub columns: Vec<usize>,
}

impl Variable {
    pub fn single(name: impl Into<String>, column: usize) -> Self {
        Self { name: name.into(), columns: vec![column] }
    }
}

/// Treated/control counts over all studies and per study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArmCounts {
    pub n_treated: usize,
    pub n_control: usize,
    pub per_study: BTreeMap<u32, (usize, usize)>,
}

impl ArmCounts {
    pub fn total(&self) -> usize {
        self.n_treated + self.n_control
    }
}

/// Validated, immutable pooled dataset stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledDataset<T> {
    covariate_names: Vec<String>,
    study: Vec<u32>,
    treatment: Vec<Option<bool>>,
    outcome: Vec<Option<T>>,
    covariates: Vec<T>,
    modifiers: Vec<Variable>,
    adjusters: Vec<Variable>,
    study_sizes: BTreeMap<u32, usize>,
    study_units: Vec<usize>,
    target_units: Vec<usize>,
}

impl<T: Scalar> PooledDataset<T> {
    /// Builds a dataset where every modifier/adjuster name is one covariate column.
    pub fn from_records(
        records: Vec<UnitRecord<T>>,
        covariate_names: Vec<String>,
        modifier_names: &[&str],
        adjuster_names: &[&str],
    ) -> Result<Self> {
        let lookup = |name: &str| -> Result<Variable> {
            covariate_names
                .iter()
                .position(|c| c == name)
                .map(|j| Variable::single(name, j))
                .ok_or_else(|| Error::Schema(format!("unknown covariate `{name}`")))
        };
        let modifiers = modifier_names.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
        let adjusters = adjuster_names.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
        Self::new(records, covariate_names, modifiers, adjusters)
    }

    pub fn new(
        records: Vec<UnitRecord<T>>,
        covariate_names: Vec<String>,
        modifiers: Vec<Variable>,
        adjusters: Vec<Variable>,
    ) -> Result<Self> {
        let p = covariate_names.len();
        let n = records.len();
        let mut study = Vec::with_capacity(n);
        let mut treatment = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        let mut covariates = Vec::with_capacity(n * p);
        for (i, r) in records.into_iter().enumerate() {
            let row = i + 1;
            if r.covariates.len() != p {
                return Err(Error::Validation {
                    row,
                    message: format!("expected {p} covariates, found {}", r.covariates.len()),
                });
            }
            if let Some(j) = r.covariates.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation {
                    row,
                    message: format!("missing or non-finite value for covariate `{}`", covariate_names[j]),
                });
            }
            match (r.in_studies(), r.treatment.is_some(), r.outcome.is_some()) {
                (false, false, false) | (true, true, true) => {}
                (false, _, _) => {
                    return Err(Error::Validation {
                        row,
                        message: "target unit (study 0) must not carry treatment or outcome".into(),
                    })
                }
                (true, _, _) => {
                    return Err(Error::Validation {
                        row,
                        message: format!("study {} unit requires both treatment and outcome", r.study),
                    })
                }
            }
            if let Some(y) = r.outcome {
                if !y.is_finite() {
                    return Err(Error::Validation { row, message: "non-finite outcome".into() });
                }
            }
            study.push(r.study);
            treatment.push(r.treatment);
            outcome.push(r.outcome);
            covariates.extend(r.covariates);
        }
        let ds = Self::assemble(covariate_names, study, treatment, outcome, covariates, modifiers, adjusters);
        ds.validate()?;
        Ok(ds)
    }

    fn assemble(
        covariate_names: Vec<String>,
        study: Vec<u32>,
        treatment: Vec<Option<bool>>,
        outcome: Vec<Option<T>>,
        covariates: Vec<T>,
        modifiers: Vec<Variable>,
        adjusters: Vec<Variable>,
    ) -> Self {
        let mut study_sizes = BTreeMap::new();
        let mut study_units = Vec::new();
        let mut target_units = Vec::new();
        for (i, &s) in study.iter().enumerate() {
            *study_sizes.entry(s).or_insert(0usize) += 1;
            if s == 0 {
                target_units.push(i);
            } else {
                study_units.push(i);
            }
        }
        Self {
            covariate_names,
            study,
            treatment,
            outcome,
            covariates,
            modifiers,
            adjusters,
            study_sizes,
            study_units,
            target_units,
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.covariate_names.len();
        for v in self.modifiers.iter().chain(&self.adjusters) {
            if v.columns.is_empty() || v.columns.iter().any(|&c| c >= p) {
                return Err(Error::Schema(format!("variable `{}` has invalid columns", v.name)));
            }
        }
        for v in &self.modifiers {
            if !self.adjusters.iter().any(|a| a.name == v.name) {
                return Err(Error::Schema(format!(
                    "modifier `{}` must also be an adjustment covariate",
                    v.name
                )));
            }
        }
        if self.target_units.is_empty() {
            return Err(Error::Dataset("target sample (study 0) is empty".into()));
        }
        if self.study_units.is_empty() {
            return Err(Error::Dataset("no study units (study id != 0)".into()));
        }
        for (s, (t, c)) in self.arm_counts().per_study {
            if t == 0 {
                return Err(Error::Positivity { study: s, arm: "treated" });
            }
            if c == 0 {
                return Err(Error::Positivity { study: s, arm: "control" });
            }
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.study.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn modifiers(&self) -> &[Variable] {
        &self.modifiers
    }

    pub fn adjusters(&self) -> &[Variable] {
        &self.adjusters
    }

    pub fn modifier_columns(&self) -> Vec<usize> {
        flatten_columns(&self.modifiers)
    }

    pub fn adjuster_columns(&self) -> Vec<usize> {
        flatten_columns(&self.adjusters)
    }

    /// Modifier columns with variable `name` removed (all of its indicator columns).
    pub fn modifier_columns_without(&self, name: &str) -> Result<Vec<usize>> {
        if !self.modifiers.iter().any(|v| v.name == name) {
            return Err(Error::UnknownModifier(name.to_string()));
        }
        let kept: Vec<Variable> = self.modifiers.iter().filter(|v| v.name != name).cloned().collect();
        Ok(flatten_columns(&kept))
    }

    pub fn study_sizes(&self) -> &BTreeMap<u32, usize> {
        &self.study_sizes
    }

    /// Study labels `s >= 1` in ascending order.
    pub fn study_ids(&self) -> Vec<u32> {
        self.study_sizes.keys().copied().filter(|&s| s != 0).collect()
    }

    pub fn n_target(&self) -> usize {
        self.target_units.len()
    }

    /// Indices of units with R = 1, in dataset order. Per-unit weight vectors
    /// are aligned with this ordering.
    pub fn study_units(&self) -> &[usize] {
        &self.study_units
    }

    pub fn target_units(&self) -> &[usize] {
        &self.target_units
    }

    #[inline]
    pub fn study_of(&self, i: usize) -> u32 {
        self.study[i]
    }

    #[inline]
    pub fn in_studies(&self, i: usize) -> bool {
        self.study[i] != 0
    }

    #[inline]
    pub fn treatment_of(&self, i: usize) -> Option<bool> {
        self.treatment[i]
    }

    #[inline]
    pub fn outcome_of(&self, i: usize) -> Option<T> {
        self.outcome[i]
    }

    /// Treatment of a study unit; panics on target units.
    #[inline]
    pub fn treated(&self, i: usize) -> bool {
        self.treatment[i].expect("study unit has a treatment")
    }

    /// Outcome of a study unit; panics on target units.
    #[inline]
    pub fn outcome(&self, i: usize) -> T {
        self.outcome[i].expect("study unit has an outcome")
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let p = self.covariate_names.len();
        &self.covariates[i * p..(i + 1) * p]
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> T {
        self.covariates[i * self.covariate_names.len() + j]
    }

    pub fn record(&self, i: usize) -> UnitRecord<T> {
        UnitRecord {
            study: self.study[i],
            treatment: self.treatment[i],
            outcome: self.outcome[i],
            covariates: self.row(i).to_vec(),
        }
    }

    pub fn records(&self) -> Vec<UnitRecord<T>> {
        (0..self.n_units()).map(|i| self.record(i)).collect()
    }

    pub fn arm_counts(&self) -> ArmCounts {
        let mut per_study: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for &i in &self.study_units {
            let e = per_study.entry(self.study[i]).or_default();
            if self.treated(i) {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        let n_treated = per_study.values().map(|c| c.0).sum();
        let n_control = per_study.values().map(|c| c.1).sum();
        ArmCounts { n_treated, n_control, per_study }
    }

    /// Gathers the given units (duplicates allowed) into a new dataset.
    ///
    /// Arm positivity is not re-checked; callers resampling within
    /// (study, arm) strata preserve it by construction.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let p = self.covariate_names.len();
        let mut covariates = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            covariates.extend_from_slice(self.row(i));
        }
        Self::assemble(
            self.covariate_names.clone(),
            indices.iter().map(|&i| self.study[i]).collect(),
            indices.iter().map(|&i| self.treatment[i]).collect(),
            indices.iter().map(|&i| self.outcome[i]).collect(),
            covariates,
            self.modifiers.clone(),
            self.adjusters.clone(),
        )
    }

    /// Target sample plus the units of study `s`.
    pub fn restrict_to_study(&self, s: u32) -> Result<Self> {
        if s == 0 || !self.study_sizes.contains_key(&s) {
            return Err(Error::Dataset(format!("study {s} not present")));
        }
        let idx: Vec<usize> = (0..self.n_units()).filter(|&i| self.study[i] == 0 || self.study[i] == s).collect();
        Ok(self.subset(&idx))
    }

    /// Same units with a different modifier set (must stay within the adjusters).
    pub fn with_modifiers(&self, modifiers: Vec<Variable>) -> Result<Self> {
        let mut ds = self.clone();
        ds.modifiers = modifiers;
        ds.validate()?;
        Ok(ds)
    }

    pub fn column(&self, j: usize, units: &[usize]) -> Vec<T> {
        units.iter().map(|&i| self.value(i, j)).collect()
    }
}

fn flatten_columns(vars: &[Variable]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut cols = Vec::new();
    for v in vars {
        for &c in &v.columns {
            if seen.insert(c) {
                cols.push(c);
            }
        }
    }
    cols
}

/// Column-role configuration for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default = "default_study")]
    pub study: String,
    #[serde(default = "default_treatment")]
    pub treatment: String,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    /// Covariate columns; all remaining columns when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    /// Columns forced to categorical encoding (non-numeric columns are detected).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categorical: Vec<String>,
    /// Named variables made of several already-encoded numeric columns.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, Vec<String>>,
    pub modifiers: Vec<String>,
    /// Confounding-adjustment variables; all covariates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjusters: Option<Vec<String>>,
}

fn default_study() -> String {
    "study".into()
}
fn default_treatment() -> String {
    "treatment".into()
}
fn default_outcome() -> String {
    "outcome".into()
}

impl Schema {
    pub fn new(modifiers: &[&str], adjusters: &[&str]) -> Self {
        Self {
            study: default_study(),
            treatment: default_treatment(),
            outcome: default_outcome(),
            covariates: None,
            categorical: Vec::new(),
            groups: BTreeMap::new(),
            modifiers: modifiers.iter().map(|s| s.to_string()).collect(),
            adjusters: Some(adjusters.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Schema that reloads a dataset written by [`write_csv`] with the same
    /// variable structure.
    pub fn for_dataset<T: Scalar>(ds: &PooledDataset<T>) -> Self {
        let names = ds.covariate_names();
        let mut groups = BTreeMap::new();
        for v in ds.modifiers().iter().chain(ds.adjusters()) {
            let single = v.columns.len() == 1 && names[v.columns[0]] == v.name;
            if !single {
                groups.insert(v.name.clone(), v.columns.iter().map(|&c| names[c].clone()).collect());
            }
        }
        Self {
            study: default_study(),
            treatment: default_treatment(),
            outcome: default_outcome(),
            covariates: Some(names.to_vec()),
            categorical: Vec::new(),
            groups,
            modifiers: ds.modifiers().iter().map(|v| v.name.clone()).collect(),
            adjusters: Some(ds.adjusters().iter().map(|v| v.name.clone()).collect()),
        }
    }
}

fn parse_scalar<T: Scalar>(s: &str) -> Option<T> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<T>().ok().filter(|v| v.is_finite())
}

/// Reads a pooled dataset from CSV text.
pub fn read_csv<T: Scalar, R: std::io::Read>(reader: R, schema: &Schema) -> Result<PooledDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let study_col = find(&schema.study)?;
    let treat_col = find(&schema.treatment)?;
    let out_col = find(&schema.outcome)?;
    let cov_source: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != study_col && *k != treat_col && *k != out_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_idx = cov_source.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;

    // Decide encoding per source column.
    let mut categorical = vec![false; cov_source.len()];
    for (k, name) in cov_source.iter().enumerate() {
        for (r, rec) in rows.iter().enumerate() {
            let cell = rec.get(cov_idx[k]).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(Error::Validation { row: r + 1, message: format!("missing value for covariate `{name}`") });
            }
        }
        categorical[k] = schema.categorical.contains(name)
            || rows.iter().any(|rec| parse_scalar::<T>(rec.get(cov_idx[k]).unwrap_or("")).is_none());
    }

    // Output columns, and which output columns each source column produced.
    let mut out_names: Vec<String> = Vec::new();
    let mut source_columns: Vec<Vec<usize>> = Vec::new();
    let mut levels: Vec<Vec<String>> = Vec::new();
    for (k, name) in cov_source.iter().enumerate() {
        if categorical[k] {
            let lv: BTreeSet<String> = rows.iter().map(|rec| rec.get(cov_idx[k]).unwrap_or("").trim().to_string()).collect();
            let lv: Vec<String> = lv.into_iter().collect();
            let mut cols = Vec::new();
            for level in lv.iter().skip(1) {
                cols.push(out_names.len());
                out_names.push(format!("{name}={level}"));
            }
            source_columns.push(cols);
            levels.push(lv);
        } else {
            source_columns.push(vec![out_names.len()]);
            out_names.push(name.clone());
            levels.push(Vec::new());
        }
    }

    let mut records = Vec::with_capacity(rows.len());
    for (r, rec) in rows.iter().enumerate() {
        let row = r + 1;
        let get = |c: usize| rec.get(c).unwrap_or("").trim();
        let study: u32 = get(study_col).parse().map_err(|_| Error::Validation {
            row,
            message: format!("study id `{}` is not a non-negative integer", get(study_col)),
        })?;
        let treatment = match get(treat_col) {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => {
                return Err(Error::Validation { row, message: format!("treatment `{other}` is not 0/1") })
            }
        };
        let outcome = match get(out_col) {
            "" => None,
            s => Some(parse_scalar::<T>(s).ok_or_else(|| Error::Validation {
                row,
                message: format!("outcome `{s}` is not a number"),
            })?),
        };
        let mut covariates = vec![T::zero(); out_names.len()];
        for (k, cols) in source_columns.iter().enumerate() {
            let cell = get(cov_idx[k]);
            if categorical[k] {
                if let Some(pos) = levels[k].iter().position(|l| l == cell) {
                    if pos > 0 {
                        covariates[cols[pos - 1]] = T::one();
                    }
                }
            } else {
                covariates[cols[0]] = parse_scalar::<T>(cell).ok_or_else(|| Error::Validation {
                    row,
                    message: format!("covariate `{}` value `{cell}` is not a number", cov_source[k]),
                })?;
            }
        }
        records.push(UnitRecord { study, treatment, outcome, covariates });
    }

    let resolve = |name: &str| -> Result<Variable> {
        if let Some(members) = schema.groups.get(name) {
            let columns = members
                .iter()
                .map(|m| {
                    out_names
                        .iter()
                        .position(|o| o == m)
                        .ok_or_else(|| Error::Schema(format!("group `{name}` member `{m}` is not a covariate")))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(Variable { name: name.to_string(), columns });
        }
        cov_source
            .iter()
            .position(|c| c == name)
            .map(|k| Variable { name: name.to_string(), columns: source_columns[k].clone() })
            .ok_or_else(|| Error::Schema(format!("unknown covariate `{name}`")))
    };
    let modifiers = schema.modifiers.iter().map(|n| resolve(n)).collect::<Result<Vec<_>>>()?;
    let adjusters = match &schema.adjusters {
        Some(a) => a.iter().map(|n| resolve(n)).collect::<Result<Vec<_>>>()?,
        None => {
            let grouped: BTreeSet<&String> = schema.groups.values().flatten().collect();
            let mut vars: Vec<Variable> = schema.groups.keys().map(|g| resolve(g)).collect::<Result<_>>()?;
            for c in &cov_source {
                if !grouped.contains(c) {
                    vars.push(resolve(c)?);
                }
            }
            vars
        }
    };
    PooledDataset::new(records, out_names, modifiers, adjusters)
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &Schema) -> Result<PooledDataset<T>> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), schema)
}

pub fn write_csv_to<T: Scalar, W: std::io::Write>(ds: &PooledDataset<T>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["study".to_string(), "treatment".to_string(), "outcome".to_string()];
    header.extend(ds.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.n_units() {
        let mut rec = vec![ds.study_of(i).to_string()];
        rec.push(match ds.treatment_of(i) {
            Some(true) => "1".into(),
            Some(false) => "0".into(),
            None => String::new(),
        });
        rec.push(ds.outcome_of(i).map(|y| y.to_string()).unwrap_or_default());
        rec.extend(ds.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Scalar>(ds: &PooledDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(ds, std::io::BufWriter::new(file))
}

/// Standardized mean difference of one covariate between a study and the target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmdEntry<T> {
    pub study: u32,
    pub covariate: String,
    /// `±inf` when the pooled SD is zero but the means differ.
    pub smd: T,
}

/// Per-covariate SMDs for every (study, covariate) pair, pooled SD
/// `sqrt((var_s + var_target) / 2)` with sample variances.
pub fn summarize_smd<T: Scalar>(ds: &PooledDataset<T>) -> Vec<SmdEntry<T>> {
    let target = ds.target_units();
    let mut out = Vec::new();
    for s in ds.study_ids() {
        let units: Vec<usize> = ds.study_units().iter().copied().filter(|&i| ds.study_of(i) == s).collect();
        for (j, name) in ds.covariate_names().iter().enumerate() {
            let xs = ds.column(j, &units);
            let xt = ds.column(j, target);
            out.push(SmdEntry { study: s, covariate: name.clone(), smd: smd(&xs, &xt) });
        }
    }
    out
}

pub(crate) fn smd<T: Scalar>(study: &[T], target: &[T]) -> T {
    let diff = mean(study) - mean(target);
    let pooled = ((variance(study, 1) + variance(target, 1)) / T::lit(2.0)).sqrt();
    if pooled > T::zero() {
        diff / pooled
    } else if diff == T::zero() {
        T::zero()
    } else {
        diff.signum() * T::infinity()
    }
}

/// Largest |SMD| per study.
pub fn max_abs_smd<T: Scalar>(entries: &[SmdEntry<T>]) -> BTreeMap<u32, T> {
    let mut m: BTreeMap<u32, T> = BTreeMap::new();
    for e in entries {
        let v = m.entry(e.study).or_insert(T::zero());
        if e.smd.abs() > *v {
            *v = e.smd.abs();
        }
    }
    m
}
