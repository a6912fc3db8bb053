//! Mortality tables: parsing, validation, subsetting and the canonical
//! stacked design shared by every covariance computation.
//!
//! A dataset stacks cells from several populations. Each population is a
//! combination of factor levels (for example country × cause × gender) and
//! populations may cover different year ranges.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered categorical dimensions that identify a population.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSchema {
    dimensions: Vec<String>,
    levels: Vec<Vec<String>>,
}

impl FactorSchema {
    pub fn new(dimensions: Vec<String>, levels: Vec<Vec<String>>) -> Result<Self> {
        if dimensions.is_empty() {
            return Err(Error::Schema("at least one factor dimension is required".into()));
        }
        if dimensions.len() != levels.len() {
            return Err(Error::Schema(format!(
                "{} dimensions but {} level lists",
                dimensions.len(),
                levels.len()
            )));
        }
        for (name, lv) in dimensions.iter().zip(&levels) {
            if lv.is_empty() {
                return Err(Error::Schema(format!("dimension {name} has no levels")));
            }
            let unique: BTreeSet<&String> = lv.iter().collect();
            if unique.len() != lv.len() {
                return Err(Error::Schema(format!("dimension {name} has repeated level labels")));
            }
        }
        Ok(Self { dimensions, levels })
    }

    /// Schema with one dimension, convenient for single-factor data.
    pub fn single(dimension: &str, levels: &[&str]) -> Result<Self> {
        Self::new(
            vec![dimension.to_string()],
            vec![levels.iter().map(|s| s.to_string()).collect()],
        )
    }

    pub fn dimensions(&self) -> &[String] {
        &self.dimensions
    }

    pub fn levels(&self) -> &[Vec<String>] {
        &self.levels
    }

    /// Level counts L_1..L_P.
    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// Size of the full product of levels.
    pub fn n_combinations(&self) -> usize {
        self.levels.iter().map(Vec::len).product()
    }

    pub fn dimension_index(&self, name: &str) -> Option<usize> {
        self.dimensions.iter().position(|d| d == name)
    }

    /// Row-major flat index of a population (last dimension varies fastest).
    pub fn flat_index(&self, key: &PopulationKey) -> usize {
        key.0
            .iter()
            .zip(&self.levels)
            .fold(0, |acc, (&i, lv)| acc * lv.len() + i)
    }

    pub fn key_from_flat(&self, mut flat: usize) -> PopulationKey {
        let mut idx = vec![0; self.levels.len()];
        for (p, lv) in self.levels.iter().enumerate().rev() {
            idx[p] = flat % lv.len();
            flat /= lv.len();
        }
        PopulationKey(idx)
    }

    /// All level combinations in flat-index order.
    pub fn all_keys(&self) -> Vec<PopulationKey> {
        (0..self.n_combinations()).map(|f| self.key_from_flat(f)).collect()
    }

    /// Human-readable label, level names joined with ':'.
    pub fn label(&self, key: &PopulationKey) -> String {
        key.0
            .iter()
            .zip(&self.levels)
            .map(|(&i, lv)| lv[i].as_str())
            .collect::<Vec<_>>()
            .join(":")
    }

    pub fn parse_label(&self, label: &str) -> Result<PopulationKey> {
        let parts: Vec<&str> = label.split(':').collect();
        if parts.len() != self.levels.len() {
            return Err(Error::UnknownPopulation(label.to_string()));
        }
        self.key_from_levels(&parts)
            .ok_or_else(|| Error::UnknownPopulation(label.to_string()))
    }

    pub fn key_from_levels(&self, labels: &[&str]) -> Option<PopulationKey> {
        let idx = labels
            .iter()
            .zip(&self.levels)
            .map(|(l, lv)| lv.iter().position(|x| x == l))
            .collect::<Option<Vec<_>>>()?;
        Some(PopulationKey(idx))
    }
}

/// One level index per schema dimension.
///
/// Ordering is lexicographic on the indices, which coincides with the
/// row-major flat index order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PopulationKey(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalityCell {
    /// Age-group midpoint in years.
    pub age: f64,
    pub year: f64,
    pub population: PopulationKey,
    pub deaths: f64,
    pub exposure: f64,
    pub log_rate: f64,
}

impl MortalityCell {
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.population
            .cmp(&other.population)
            .then(self.year.total_cmp(&other.year))
            .then(self.age.total_cmp(&other.age))
    }
}

/// How to treat cells with zero recorded deaths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroPolicy {
    /// Drop the cell with a warning.
    #[default]
    Drop,
    /// Keep the cell with rate (D + 0.5) / E.
    HalfCount,
}

/// Column layout of an input table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    /// Factor column names, outermost dimension first.
    pub factor_columns: Vec<String>,
    /// Optional explicit level order per factor column. When absent, levels
    /// are sorted lexicographically.
    #[serde(default)]
    pub level_orders: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub zero_policy: ZeroPolicy,
}

impl SchemaConfig {
    pub fn new(factor_columns: &[&str]) -> Self {
        Self {
            factor_columns: factor_columns.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseWarning {
    pub row: usize,
    pub message: String,
}

/// Validated, immutable stack of mortality cells in canonical order
/// (population flat index, then year, then age).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedDataset {
    schema: FactorSchema,
    cells: Vec<MortalityCell>,
}

impl StackedDataset {
    pub fn new(schema: FactorSchema, mut cells: Vec<MortalityCell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::EmptySubset("dataset".into()));
        }
        for (i, c) in cells.iter().enumerate() {
            if c.population.0.len() != schema.dimensions.len()
                || c.population.0.iter().zip(&schema.levels).any(|(&k, lv)| k >= lv.len())
            {
                return Err(Error::Row { row: i, message: "population index out of range".into() });
            }
            if !(c.exposure > 0.0) || !c.exposure.is_finite() {
                return Err(Error::Row { row: i, message: "exposure must be positive".into() });
            }
            if !c.log_rate.is_finite() || !c.age.is_finite() || !c.year.is_finite() {
                return Err(Error::Row { row: i, message: "non-finite value".into() });
            }
        }
        cells.sort_by(MortalityCell::canonical_cmp);
        for w in cells.windows(2) {
            if w[0].canonical_cmp(&w[1]) == Ordering::Equal {
                return Err(Error::Conflict(format!(
                    "{} age {} year {}",
                    schema.label(&w[0].population),
                    w[0].age,
                    w[0].year
                )));
            }
        }
        Ok(Self { schema, cells })
    }

    pub fn schema(&self) -> &FactorSchema {
        &self.schema
    }

    pub fn cells(&self) -> &[MortalityCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Distinct populations present, in flat-index order.
    pub fn populations(&self) -> Vec<PopulationKey> {
        let mut out: Vec<PopulationKey> = Vec::new();
        for c in &self.cells {
            if out.last() != Some(&c.population) {
                out.push(c.population.clone());
            }
        }
        out
    }

    /// Cell counts N_l per population.
    pub fn per_population_counts(&self) -> BTreeMap<PopulationKey, usize> {
        let mut m = BTreeMap::new();
        for c in &self.cells {
            *m.entry(c.population.clone()).or_insert(0) += 1;
        }
        m
    }

    pub fn ages(&self) -> Vec<f64> {
        sorted_unique(self.cells.iter().map(|c| c.age))
    }

    pub fn years(&self) -> Vec<f64> {
        sorted_unique(self.cells.iter().map(|c| c.year))
    }

    /// Inclusive year span covered by one population.
    pub fn year_span(&self, population: &PopulationKey) -> Option<(f64, f64)> {
        let ys = self.cells.iter().filter(|c| &c.population == population).map(|c| c.year);
        ys.fold(None, |acc, y| match acc {
            None => Some((y, y)),
            Some((lo, hi)) => Some((lo.min(y), hi.max(y))),
        })
    }

    pub fn get(&self, population: &PopulationKey, age: f64, year: f64) -> Option<&MortalityCell> {
        self.cells
            .iter()
            .find(|c| &c.population == population && c.age == age && c.year == year)
    }
}

fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Converts an age-group string such as "50-54" to its midpoint (52), or
/// parses a plain numeric age.
pub fn parse_age(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    let (lo, hi) = s.split_once('-').or_else(|| s.split_once('\u{2013}'))?;
    let lo: f64 = lo.trim().parse().ok()?;
    let hi: f64 = hi.trim().parse().ok()?;
    (hi >= lo).then_some((lo + hi) / 2.0)
}

/// Parses a CSV file and logs any warnings.
pub fn parse_csv(path: impl AsRef<Path>, config: &SchemaConfig) -> Result<StackedDataset> {
    let file = std::fs::File::open(path)?;
    let (ds, warnings) = read_csv(file, config)?;
    for w in warnings {
        log::warn!("row {}: {}", w.row, w.message);
    }
    Ok(ds)
}

/// Parses CSV from any reader, returning the dataset and per-row warnings.
/// Row indices count data rows from zero, excluding the header.
pub fn read_csv<R: Read>(reader: R, config: &SchemaConfig) -> Result<(StackedDataset, Vec<ParseWarning>)> {
    if config.factor_columns.is_empty() {
        return Err(Error::Schema("no factor columns configured".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let factor_idx = config
        .factor_columns
        .iter()
        .map(|f| col(f).ok_or_else(|| Error::Schema(format!("missing column {f}"))))
        .collect::<Result<Vec<_>>>()?;
    let age_idx = col("age_group")
        .or_else(|| col("age"))
        .ok_or_else(|| Error::Schema("missing column age_group (or age)".into()))?;
    let need = |name: &str| col(name).ok_or_else(|| Error::Schema(format!("missing column {name}")));
    let year_idx = need("year")?;
    let deaths_idx = need("deaths")?;
    let exposure_idx = need("exposure")?;

    struct Raw {
        row: usize,
        factors: Vec<String>,
        age: f64,
        year: f64,
        deaths: f64,
        exposure: f64,
    }
    let mut raws = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize, what: &str| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Row { row, message: format!("invalid {what} {:?}", field(i)) })
        };
        let age = parse_age(field(age_idx))
            .ok_or_else(|| Error::Row { row, message: format!("invalid age {:?}", field(age_idx)) })?;
        let year = num(year_idx, "year")?;
        let deaths = num(deaths_idx, "deaths")?;
        let exposure = num(exposure_idx, "exposure")?;
        if deaths < 0.0 {
            return Err(Error::Row { row, message: "negative deaths".into() });
        }
        if exposure <= 0.0 {
            return Err(Error::Row { row, message: format!("exposure must be positive, got {exposure}") });
        }
        raws.push(Raw {
            row,
            factors: factor_idx.iter().map(|&i| field(i).to_string()).collect(),
            age,
            year,
            deaths,
            exposure,
        });
    }

    let levels: Vec<Vec<String>> = match &config.level_orders {
        Some(orders) => {
            if orders.len() != factor_idx.len() {
                return Err(Error::Schema("level_orders length differs from factor_columns".into()));
            }
            orders.clone()
        }
        None => (0..factor_idx.len())
            .map(|p| {
                raws.iter()
                    .map(|r| r.factors[p].clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect(),
    };
    let schema = FactorSchema::new(config.factor_columns.clone(), levels)?;
    let lookup: Vec<HashMap<&str, usize>> = schema
        .levels
        .iter()
        .map(|lv| lv.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect())
        .collect();

    let mut warnings = Vec::new();
    let mut cells = Vec::with_capacity(raws.len());
    for r in &raws {
        let idx = r
            .factors
            .iter()
            .zip(&lookup)
            .zip(&schema.dimensions)
            .map(|((f, m), dim)| {
                m.get(f.as_str()).copied().ok_or_else(|| Error::Row {
                    row: r.row,
                    message: format!("level {f:?} not in configured levels of {dim}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let log_rate = if r.deaths == 0.0 {
            match config.zero_policy {
                ZeroPolicy::Drop => {
                    warnings.push(ParseWarning { row: r.row, message: "zero deaths; cell dropped".into() });
                    continue;
                }
                ZeroPolicy::HalfCount => {
                    warnings.push(ParseWarning {
                        row: r.row,
                        message: "zero deaths; rate set to 0.5/exposure".into(),
                    });
                    (0.5 / r.exposure).ln()
                }
            }
        } else {
            (r.deaths / r.exposure).ln()
        };
        cells.push(MortalityCell {
            age: r.age,
            year: r.year,
            population: PopulationKey(idx),
            deaths: r.deaths,
            exposure: r.exposure,
            log_rate,
        });
    }
    let ds = StackedDataset::new(schema, cells).map_err(|e| match e {
        Error::EmptySubset(_) => Error::EmptySubset("input rows (no cells retained)".into()),
        e => e,
    })?;
    Ok((ds, warnings))
}

/// Writes a dataset in the same layout `read_csv` accepts, with a numeric
/// `age` column.
pub fn write_csv<W: Write>(dataset: &StackedDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = dataset.schema.dimensions.iter().map(String::as_str).collect();
    header.extend(["age", "year", "deaths", "exposure"]);
    w.write_record(&header)?;
    for c in &dataset.cells {
        let mut rec: Vec<String> = c
            .population
            .0
            .iter()
            .zip(&dataset.schema.levels)
            .map(|(&i, lv)| lv[i].clone())
            .collect();
        rec.push(format!("{}", c.age));
        rec.push(format!("{}", c.year));
        rec.push(format!("{}", c.deaths));
        rec.push(format!("{}", c.exposure));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Restricts a dataset to an age window, a year window and optionally a set
/// of populations. The schema is kept as is.
pub fn subset(
    dataset: &StackedDataset,
    ages: RangeInclusive<f64>,
    years: RangeInclusive<f64>,
    populations: Option<&[PopulationKey]>,
) -> Result<StackedDataset> {
    if ages.start() > ages.end() {
        return Err(Error::Parameter("empty age range".into()));
    }
    if years.start() > years.end() {
        return Err(Error::Parameter("empty year range".into()));
    }
    let mut cells: Vec<MortalityCell> = dataset.cells.clone();
    cells.retain(|c| ages.contains(&c.age));
    if cells.is_empty() {
        return Err(Error::EmptySubset(format!("ages {}..={}", ages.start(), ages.end())));
    }
    cells.retain(|c| years.contains(&c.year));
    if cells.is_empty() {
        return Err(Error::EmptySubset(format!("years {}..={}", years.start(), years.end())));
    }
    if let Some(pops) = populations {
        cells.retain(|c| pops.contains(&c.population));
        if cells.is_empty() {
            return Err(Error::EmptySubset("populations".into()));
        }
    }
    StackedDataset::new(dataset.schema.clone(), cells)
}

/// One row of the stacked regression design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub age: f64,
    pub year: f64,
    /// Position of the row's population in [`Design::populations`].
    pub pop: usize,
}

/// Numeric design in canonical row order: population flat index, then
/// year, then age.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub rows: Vec<DesignRow>,
    pub y: Vec<f64>,
    pub populations: Vec<PopulationKey>,
}

impl Design {
    pub fn n_populations(&self) -> usize {
        self.populations.len()
    }

    /// Dense one-hot population indicator matrix, rows aligned with `rows`.
    pub fn one_hot(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let mut v = vec![0.0; self.populations.len()];
                v[r.pop] = 1.0;
                v
            })
            .collect()
    }
}

pub fn design_matrix(dataset: &StackedDataset) -> Design {
    let populations = dataset.populations();
    let mut pop = 0;
    let rows = dataset
        .cells
        .iter()
        .map(|c| {
            while populations[pop] != c.population {
                pop += 1;
            }
            DesignRow { age: c.age, year: c.year, pop }
        })
        .collect();
    Design {
        rows,
        y: dataset.cells.iter().map(|c| c.log_rate).collect(),
        populations,
    }
}
