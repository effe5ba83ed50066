//! Incomplete mixed-type tables.
//!
//! A [`MixedTable`] stores continuous values as `f64` and categorical values as
//! category indices (also held in `f64` storage), next to an observed-mask.
//! Masked-out cells hold `NaN` and are never read through the public accessors.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens treated as missing when no explicit token list is supplied.
pub const DEFAULT_MISSING_TOKENS: [&str; 2] = ["", "NA"];

/// Standard deviations at or below this value mark a degenerate column.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Continuous,
            categories: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    /// Builds a schema, checking name and category uniqueness.
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let schema = Self { features };
        schema.validate(false)?;
        Ok(schema)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(s)?;
        schema.validate(false)?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn validate(&self, require_categories: bool) -> Result<()> {
        let mut names = HashSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate feature name '{}'",
                    f.name
                )));
            }
            let mut cats = HashSet::new();
            for c in &f.categories {
                if !cats.insert(c.as_str()) {
                    return Err(Error::Schema(format!(
                        "duplicate category '{}' in feature '{}'",
                        c, f.name
                    )));
                }
            }
            if f.kind == FeatureKind::Continuous && !f.categories.is_empty() {
                return Err(Error::Schema(format!(
                    "continuous feature '{}' declares categories",
                    f.name
                )));
            }
            if require_categories && f.is_categorical() && f.categories.len() < 2 {
                return Err(Error::Schema(format!(
                    "categorical feature '{}' has fewer than 2 categories",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature(&self, j: usize) -> &FeatureSpec {
        &self.features[j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedTable {
    schema: FeatureSchema,
    cells: Array2<f64>,
    mask: Array2<bool>,
}

impl MixedTable {
    /// Builds a table from raw cells and an observed-mask. Cells where the
    /// mask is false are overwritten with the `NaN` sentinel.
    pub fn new(schema: FeatureSchema, mut cells: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if cells.dim() != mask.dim() {
            return Err(Error::Shape(format!(
                "cells {:?} vs mask {:?}",
                cells.dim(),
                mask.dim()
            )));
        }
        if cells.ncols() != schema.len() {
            return Err(Error::Shape(format!(
                "{} columns but schema has {} features",
                cells.ncols(),
                schema.len()
            )));
        }
        for ((i, j), v) in cells.indexed_iter_mut() {
            if !mask[[i, j]] {
                *v = f64::NAN;
                continue;
            }
            let spec = schema.feature(j);
            match spec.kind {
                FeatureKind::Continuous => {
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            row: i,
                            column: spec.name.clone(),
                            message: format!("non-finite value {v}"),
                        });
                    }
                }
                FeatureKind::Categorical => {
                    let k = *v;
                    if k < 0.0 || k.fract() != 0.0 || (k as usize) >= spec.n_categories() {
                        return Err(Error::Parse {
                            row: i,
                            column: spec.name.clone(),
                            message: format!(
                                "category index {k} out of range for {} categories",
                                spec.n_categories()
                            ),
                        });
                    }
                }
            }
        }
        Ok(Self {
            schema,
            cells,
            mask,
        })
    }

    /// A fully observed table.
    pub fn complete(schema: FeatureSchema, cells: Array2<f64>) -> Result<Self> {
        let mask = Array2::from_elem(cells.dim(), true);
        Self::new(schema, cells, mask)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.cells.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.cells.ncols()
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.mask[[i, j]].then(|| self.cells[[i, j]])
    }

    pub fn category(&self, i: usize, j: usize) -> Option<usize> {
        self.value(i, j).map(|v| v as usize)
    }

    /// Observed `(row, value)` pairs of one column.
    pub fn observed_column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n_rows()).filter_map(move |i| self.value(i, j).map(|v| (i, v)))
    }

    pub fn observed_count(&self, j: usize) -> usize {
        self.mask.column(j).iter().filter(|&&m| m).count()
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    pub fn has_missing(&self, j: usize) -> bool {
        self.mask.column(j).iter().any(|&m| !m)
    }

    /// Raw cells with the `NaN` sentinel at masked positions.
    pub fn cells(&self) -> &Array2<f64> {
        &self.cells
    }

    /// Same schema and shape, with a new mask applied to this table's cells.
    /// Cells newly masked are replaced by the sentinel.
    pub fn with_mask(&self, mask: Array2<bool>) -> Result<Self> {
        if mask.dim() != self.mask.dim() {
            return Err(Error::Shape("mask shape differs from table".into()));
        }
        for ((i, j), &m) in mask.indexed_iter() {
            if m && !self.mask[[i, j]] {
                return Err(Error::invalid(format!(
                    "cannot unmask cell ({i}, {j}) that is missing in the source"
                )));
            }
        }
        Self::new(self.schema.clone(), self.cells.clone(), mask)
    }

    /// Replaces the value grid with a fully observed completed grid.
    pub fn from_completed(schema: FeatureSchema, values: Array2<f64>) -> Result<Self> {
        Self::complete(schema, values)
    }

    /// Selects a subset of rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let d = self.n_features();
        let mut cells = Array2::from_elem((rows.len(), d), f64::NAN);
        let mut mask = Array2::from_elem((rows.len(), d), false);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..d {
                cells[[r, j]] = self.cells[[i, j]];
                mask[[r, j]] = self.mask[[i, j]];
            }
        }
        Self {
            schema: self.schema.clone(),
            cells,
            mask,
        }
    }
}

/// Reads a CSV table with a header row. Category labels not pre-declared by the
/// schema are interned in first-seen order.
pub fn read_csv<R: Read>(
    reader: R,
    schema: &FeatureSchema,
    missing_tokens: &[&str],
) -> Result<MixedTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let d = schema.len();
    if headers.len() != d {
        return Err(Error::Schema(format!(
            "header has {} columns, schema has {} features",
            headers.len(),
            d
        )));
    }
    // column position in the file -> feature index in the schema
    let mut col_to_feature = Vec::with_capacity(d);
    let mut seen = HashSet::new();
    for h in headers.iter() {
        let j = schema
            .index_of(h)
            .ok_or_else(|| Error::Schema(format!("header column '{h}' not in schema")))?;
        if !seen.insert(j) {
            return Err(Error::Schema(format!("header column '{h}' repeated")));
        }
        col_to_feature.push(j);
    }

    let mut features = schema.features.clone();
    let predeclared: Vec<bool> = features.iter().map(|f| !f.categories.is_empty()).collect();
    let mut lookup: Vec<HashMap<String, usize>> = features
        .iter()
        .map(|f| {
            f.categories
                .iter()
                .enumerate()
                .map(|(k, c)| (c.clone(), k))
                .collect()
        })
        .collect();

    let mut values = Vec::new();
    let mut observed = Vec::new();
    let mut n = 0usize;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", d, record.len()),
            });
        }
        let mut row_vals = vec![f64::NAN; d];
        let mut row_mask = vec![false; d];
        for (c, field) in record.iter().enumerate() {
            let j = col_to_feature[c];
            if missing_tokens.contains(&field) {
                continue;
            }
            let spec = &mut features[j];
            let v = match spec.kind {
                FeatureKind::Continuous => {
                    field.trim().parse::<f64>().map_err(|_| Error::Parse {
                        row,
                        column: spec.name.clone(),
                        message: format!("cannot parse '{field}' as a number"),
                    })?
                }
                FeatureKind::Categorical => match lookup[j].get(field) {
                    Some(&k) => k as f64,
                    None if predeclared[j] => {
                        return Err(Error::Parse {
                            row,
                            column: spec.name.clone(),
                            message: format!("unknown category '{field}'"),
                        })
                    }
                    None => {
                        let k = spec.categories.len();
                        spec.categories.push(field.to_string());
                        lookup[j].insert(field.to_string(), k);
                        k as f64
                    }
                },
            };
            row_vals[j] = v;
            row_mask[j] = true;
        }
        values.extend(row_vals);
        observed.extend(row_mask);
        n += 1;
    }

    let schema = FeatureSchema { features };
    schema.validate(n > 0)?;
    let cells = Array2::from_shape_vec((n, d), values).expect("row-major fill");
    let mask = Array2::from_shape_vec((n, d), observed).expect("row-major fill");
    MixedTable::new(schema, cells, mask)
}

pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    missing_tokens: &[&str],
) -> Result<MixedTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, missing_tokens)
}

/// Writes a table in canonical formatting: shortest round-trip float
/// representation, category labels, and `missing_token` at masked cells.
pub fn write_csv<W: Write>(writer: W, table: &MixedTable, missing_token: &str) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(table.schema().features.iter().map(|f| f.name.as_str()))?;
    for i in 0..table.n_rows() {
        let record: Vec<String> = (0..table.n_features())
            .map(|j| match table.value(i, j) {
                None => missing_token.to_string(),
                Some(v) => {
                    let spec = table.schema().feature(j);
                    match spec.kind {
                        FeatureKind::Continuous => format!("{v}"),
                        FeatureKind::Categorical => spec.categories[v as usize].clone(),
                    }
                }
            })
            .collect();
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, table: &MixedTable, missing_token: &str) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), table, missing_token)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousStats {
    pub mean: f64,
    pub std: f64,
    pub observed_min: f64,
    pub observed_max: f64,
    /// True when the observed standard deviation is at or below [`STD_FLOOR`].
    pub degenerate: bool,
}

impl ContinuousStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let raw = var.sqrt();
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Some(Self {
            mean,
            std: raw.max(STD_FLOOR),
            observed_min: lo,
            observed_max: hi,
            degenerate: raw <= STD_FLOOR,
        })
    }

    /// z-score; degenerate columns map to zero.
    pub fn standardize(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (x - self.mean) / self.std
        }
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        if self.degenerate {
            self.mean
        } else {
            z * self.std + self.mean
        }
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.observed_min, self.observed_max)
    }
}

/// Observed-cell statistics for every continuous feature (`None` for categorical
/// features and for columns with no observed cell).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizerStats {
    pub features: Vec<Option<ContinuousStats>>,
}

impl StandardizerStats {
    pub fn from_table(t: &MixedTable) -> Self {
        let features = (0..t.n_features())
            .map(|j| match t.schema().feature(j).kind {
                FeatureKind::Categorical => None,
                FeatureKind::Continuous => {
                    let vals: Vec<f64> = t.observed_column(j).map(|(_, v)| v).collect();
                    ContinuousStats::from_values(&vals)
                }
            })
            .collect();
        Self { features }
    }

    pub fn get(&self, j: usize) -> Option<&ContinuousStats> {
        self.features[j].as_ref()
    }
}

/// Clamps each value to the observed range of the feature.
pub fn clip_to_observed_range(values: &[f64], stats: &ContinuousStats) -> Vec<f64> {
    values.iter().map(|&v| stats.clip(v)).collect()
}

/// Standardized/one-hot expansion of a completed table.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationDesign {
    pub matrix: Array2<f64>,
    /// Expanded column range per original feature.
    pub column_groups: Vec<std::ops::Range<usize>>,
}

impl CorrelationDesign {
    pub fn n_expanded(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Expands a completed value grid: continuous columns are z-scored with the
/// observed-cell statistics of `t`; categorical columns become one-hot groups.
pub fn build_correlation_design(t: &MixedTable, filled: &Array2<f64>) -> Result<CorrelationDesign> {
    if filled.dim() != (t.n_rows(), t.n_features()) {
        return Err(Error::Shape(format!(
            "filled grid {:?} vs table ({}, {})",
            filled.dim(),
            t.n_rows(),
            t.n_features()
        )));
    }
    if filled.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("filled grid contains missing cells"));
    }
    let stats = StandardizerStats::from_table(t);
    let mut groups = Vec::with_capacity(t.n_features());
    let mut width = 0;
    for spec in &t.schema().features {
        let w = match spec.kind {
            FeatureKind::Continuous => 1,
            FeatureKind::Categorical => spec.n_categories(),
        };
        groups.push(width..width + w);
        width += w;
    }
    let n = t.n_rows();
    let mut matrix = Array2::zeros((n, width));
    for (j, spec) in t.schema().features.iter().enumerate() {
        let start = groups[j].start;
        match spec.kind {
            FeatureKind::Continuous => {
                // A column with no observed cells standardizes to zeros.
                if let Some(s) = stats.get(j) {
                    for i in 0..n {
                        matrix[[i, start]] = s.standardize(filled[[i, j]]);
                    }
                }
            }
            FeatureKind::Categorical => {
                for i in 0..n {
                    let k = filled[[i, j]] as usize;
                    if k >= spec.n_categories() {
                        return Err(Error::invalid(format!(
                            "category index {k} out of range for '{}'",
                            spec.name
                        )));
                    }
                    matrix[[i, start + k]] = 1.0;
                }
            }
        }
    }
    Ok(CorrelationDesign {
        matrix,
        column_groups: groups,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_PARTITION: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// Seeded shuffle split into train/validation/test with sizes within one row
/// of `n * fraction`. Each part receives at least one row.
pub fn partition_rows(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Partition> {
    let (ft, fv, fs) = fractions;
    if n < 3 {
        return Err(Error::invalid(format!(
            "cannot partition {n} rows into three sets"
        )));
    }
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "partition fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut n_train = ((n as f64) * ft).round() as usize;
    let mut n_val = ((n as f64) * fv).round() as usize;
    n_train = n_train.clamp(1, n - 2);
    n_val = n_val.clamp(1, n - n_train - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Ok(Partition {
        train: idx,
        validation,
        test,
    })
}
