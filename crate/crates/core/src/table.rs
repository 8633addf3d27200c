//! Categorical data, variable pairs, and the corner-coded bivariate design.
//!
//! Codes are 1-based everywhere they are visible to a user (files, accessors,
//! `cell_of`); internal indexing into cell vectors is 0-based and row-major in
//! (first variable, second variable).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MillsError, Result};

/// An `n x p` matrix of category codes with per-variable level counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDataset {
    n: usize,
    levels: Vec<usize>,
    /// Row-major, 1-based codes.
    codes: Vec<u16>,
    names: Vec<String>,
    labels: Option<Vec<Vec<String>>>,
}

impl CategoricalDataset {
    /// Build a dataset from row-major 1-based codes.
    ///
    /// `n = 0` is accepted so that samplers can be run against the prior.
    pub fn new(levels: Vec<usize>, codes: Vec<u16>) -> Result<Self> {
        let p = levels.len();
        if p < 2 {
            return Err(MillsError::InvalidInput(format!(
                "need at least 2 variables, got {p}"
            )));
        }
        if let Some(j) = levels.iter().position(|&d| d < 2) {
            return Err(MillsError::InvalidInput(format!(
                "variable {} has {} levels; at least 2 are required",
                j + 1,
                levels[j]
            )));
        }
        if levels.iter().any(|&d| d > u16::MAX as usize) {
            return Err(MillsError::InvalidInput("too many levels".into()));
        }
        if !codes.len().is_multiple_of(p) {
            return Err(MillsError::Dimension {
                expected: p * (codes.len() / p + 1),
                got: codes.len(),
            });
        }
        let n = codes.len() / p;
        for (idx, &c) in codes.iter().enumerate() {
            let j = idx % p;
            if c == 0 || c as usize > levels[j] {
                return Err(MillsError::InvalidInput(format!(
                    "code {c} at row {}, variable {} outside 1..={}",
                    idx / p + 1,
                    j + 1,
                    levels[j]
                )));
            }
        }
        let names = (1..=p).map(|j| format!("V{j}")).collect();
        Ok(Self {
            n,
            levels,
            codes,
            names,
            labels: None,
        })
    }

    pub fn from_rows(levels: Vec<usize>, rows: &[Vec<u16>]) -> Result<Self> {
        let p = levels.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != p) {
            return Err(MillsError::InvalidInput(format!(
                "row {} has {} entries, expected {p}",
                bad + 1,
                rows[bad].len()
            )));
        }
        Self::new(levels, rows.iter().flatten().copied().collect())
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(MillsError::Dimension {
                expected: self.p(),
                got: names.len(),
            });
        }
        self.names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Per-variable labels in code order, when the data were labelled.
    pub fn labels(&self) -> Option<&[Vec<String>]> {
        self.labels.as_deref()
    }

    /// 1-based code of observation `i`, variable `j` (both 0-based).
    pub fn code(&self, i: usize, j: usize) -> usize {
        self.codes[i * self.p() + j] as usize
    }

    pub fn row(&self, i: usize) -> &[u16] {
        let p = self.p();
        &self.codes[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u16]> {
        self.codes.chunks_exact(self.p())
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    /// Write the dataset as CSV with a header row and integer codes.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for row in self.rows() {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        w.flush().map_err(|e| MillsError::io(path, e))?;
        Ok(())
    }
}

/// Declared levels for one column: either a count of integer codes or an
/// ordered list of labels (label `k` maps to code `k + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LevelSpec {
    Count(usize),
    Labels(Vec<String>),
}

impl LevelSpec {
    fn len(&self) -> usize {
        match self {
            LevelSpec::Count(d) => *d,
            LevelSpec::Labels(l) => l.len(),
        }
    }
}

/// Column name to declared levels, read from the `--levels` JSON file.
pub type LevelSchema = HashMap<String, LevelSpec>;

pub fn load_schema(path: &Path) -> Result<LevelSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| MillsError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| MillsError::data(path, format!("bad level schema: {e}")))
}

/// Read a CSV of categorical observations.
///
/// Columns whose cells are all positive integers are taken as codes; any
/// other column is treated as labels and coded by first appearance unless the
/// schema pins the label order. Without a schema entry, a column's level count
/// is its largest observed code (but at least 2).
pub fn load_dataset(path: &Path, schema: Option<&LevelSchema>) -> Result<CategoricalDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => MillsError::io(path, io),
            other => MillsError::data(path, format!("{other:?}")),
        })?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(MillsError::data(path, "empty file"));
    }
    let p = header.len();

    let mut cells: Vec<Vec<String>> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != p {
            return Err(MillsError::data(
                path,
                format!("row {} has {} fields, header has {p}", r + 2, rec.len()),
            ));
        }
        cells.push(rec.iter().map(str::to_owned).collect());
    }
    if cells.is_empty() {
        return Err(MillsError::data(path, "empty file: no observations"));
    }
    if p < 2 {
        return Err(MillsError::data(path, "need at least 2 columns"));
    }

    let n = cells.len();
    let mut codes = vec![0u16; n * p];
    let mut levels = Vec::with_capacity(p);
    let mut labels: Vec<Vec<String>> = Vec::with_capacity(p);
    let mut any_labelled = false;

    for (j, name) in header.iter().enumerate() {
        let declared = schema.and_then(|s| s.get(name));
        let column = cells.iter().map(|row| row[j].as_str());
        let (col_codes, col_levels, col_labels, labelled) = code_column(column, declared)
            .map_err(|msg| MillsError::data(path, format!("column '{name}': {msg}")))?;
        any_labelled |= labelled;
        for (i, c) in col_codes.into_iter().enumerate() {
            codes[i * p + j] = c;
        }
        levels.push(col_levels);
        labels.push(col_labels);
    }

    let mut data = CategoricalDataset::new(levels, codes)
        .map_err(|e| MillsError::data(path, e.to_string()))?
        .with_names(header)?;
    if any_labelled {
        data.labels = Some(labels);
    }
    Ok(data)
}

type CodedColumn = (Vec<u16>, usize, Vec<String>, bool);

fn code_column<'a>(
    column: impl Iterator<Item = &'a str> + Clone,
    declared: Option<&LevelSpec>,
) -> std::result::Result<CodedColumn, String> {
    let as_int = |s: &str| s.parse::<u64>().ok().filter(|&v| v >= 1);
    let numeric = column.clone().all(|s| as_int(s).is_some());

    match declared {
        Some(LevelSpec::Labels(order)) => {
            let lookup: HashMap<&str, usize> = order
                .iter()
                .enumerate()
                .map(|(k, l)| (l.as_str(), k + 1))
                .collect();
            let codes = column
                .map(|s| {
                    lookup
                        .get(s)
                        .map(|&c| c as u16)
                        .ok_or_else(|| format!("label '{s}' not in declared levels"))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok((codes, order.len(), order.clone(), true))
        }
        Some(LevelSpec::Count(_)) | None if numeric => {
            let raw: Vec<u64> = column.map(|s| as_int(s).unwrap()).collect();
            let max = raw.iter().copied().max().unwrap_or(1) as usize;
            let d = match declared {
                Some(spec) => {
                    let d = spec.len();
                    if max > d {
                        return Err(format!("code {max} exceeds declared level count {d}"));
                    }
                    d
                }
                None => max.max(2),
            };
            if d > u16::MAX as usize {
                return Err(format!("level count {d} too large"));
            }
            let labels = (1..=d).map(|c| c.to_string()).collect();
            Ok((
                raw.into_iter().map(|c| c as u16).collect(),
                d,
                labels,
                false,
            ))
        }
        _ => {
            let mut order: Vec<String> = Vec::new();
            let mut lookup: HashMap<String, u16> = HashMap::new();
            let mut codes = Vec::new();
            for s in column {
                let code = match lookup.get(s) {
                    Some(&c) => c,
                    None => {
                        order.push(s.to_owned());
                        let c = order.len() as u16;
                        lookup.insert(s.to_owned(), c);
                        c
                    }
                };
                codes.push(code);
            }
            let d = match declared {
                Some(spec) if spec.len() < order.len() => {
                    return Err(format!(
                        "{} distinct labels exceed declared level count {}",
                        order.len(),
                        spec.len()
                    ))
                }
                Some(spec) => spec.len(),
                None => order.len().max(2),
            };
            Ok((codes, d, order, true))
        }
    }
}

/// An unordered pair of variables, stored 0-based with `j < k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairIndex {
    pub j: usize,
    pub k: usize,
}

impl PairIndex {
    pub fn new(j: usize, k: usize) -> Result<Self> {
        if j >= k {
            return Err(MillsError::InvalidInput(format!(
                "pair requires j < k, got ({}, {})",
                j + 1,
                k + 1
            )));
        }
        Ok(Self { j, k })
    }

    pub fn contains(&self, v: usize) -> bool {
        self.j == v || self.k == v
    }
}

impl fmt::Display for PairIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.j + 1, self.k + 1)
    }
}

/// All variable pairs in lexicographic order.
pub fn pair_set(p: usize) -> Result<Vec<PairIndex>> {
    if p < 2 {
        return Err(MillsError::InvalidInput(format!(
            "pair set needs p >= 2, got {p}"
        )));
    }
    Ok((0..p)
        .flat_map(|j| (j + 1..p).map(move |k| PairIndex { j, k }))
        .collect())
}

/// 1-based cell index of codes `(a, b)` in a table with `d2` columns.
pub fn cell_of(a: usize, b: usize, d2: usize) -> Result<usize> {
    if a == 0 || b == 0 || b > d2 {
        return Err(MillsError::InvalidInput(format!(
            "codes ({a},{b}) out of bounds for {d2} columns"
        )));
    }
    Ok((a - 1) * d2 + b)
}

/// What a column of the corner design encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignTerm {
    Intercept,
    /// Level (0-based, >= 1) of the first variable.
    Row(usize),
    /// Level (0-based, >= 1) of the second variable.
    Col(usize),
    Interaction(usize, usize),
}

/// Saturated bivariate log-linear design with level 1 as the reference.
///
/// Columns are: intercept, `d1 - 1` main effects of the first variable,
/// `d2 - 1` main effects of the second, then `(d1 - 1)(d2 - 1)` interactions
/// in row-major order of their levels.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerDesign {
    d1: usize,
    d2: usize,
    terms: Vec<DesignTerm>,
    matrix: DMatrix<f64>,
}

impl CornerDesign {
    pub fn new(d1: usize, d2: usize) -> Result<Self> {
        if d1 < 2 || d2 < 2 {
            return Err(MillsError::InvalidInput(format!(
                "corner design needs at least 2 levels per variable, got ({d1},{d2})"
            )));
        }
        let mut terms = vec![DesignTerm::Intercept];
        terms.extend((1..d1).map(DesignTerm::Row));
        terms.extend((1..d2).map(DesignTerm::Col));
        for a in 1..d1 {
            terms.extend((1..d2).map(|b| DesignTerm::Interaction(a, b)));
        }
        let cells = d1 * d2;
        let matrix = DMatrix::from_fn(cells, cells, |cell, col| {
            let (a, b) = (cell / d2, cell % d2);
            let on = match terms[col] {
                DesignTerm::Intercept => true,
                DesignTerm::Row(l) => a == l,
                DesignTerm::Col(l) => b == l,
                DesignTerm::Interaction(la, lb) => a == la && b == lb,
            };
            if on {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            d1,
            d2,
            terms,
            matrix,
        })
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn cells(&self) -> usize {
        self.d1 * self.d2
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn terms(&self) -> &[DesignTerm] {
        &self.terms
    }

    /// Number of leading non-interaction columns: `1 + (d1 - 1) + (d2 - 1)`.
    pub fn main_effect_columns(&self) -> usize {
        self.d1 + self.d2 - 1
    }

    /// 0-based cell index for 0-based levels.
    #[inline]
    pub fn cell(&self, a: usize, b: usize) -> usize {
        a * self.d2 + b
    }

    /// 1-based cell index for 1-based codes, with bounds checks.
    pub fn cell_of(&self, a: usize, b: usize) -> Result<usize> {
        if a == 0 || a > self.d1 {
            return Err(MillsError::InvalidInput(format!(
                "code {a} outside 1..={}",
                self.d1
            )));
        }
        cell_of(a, b, self.d2)
    }

    /// `X2 * theta`: unnormalised cell log-scores.
    pub fn scores(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.cells() {
            return Err(MillsError::Dimension {
                expected: self.cells(),
                got: theta.len(),
            });
        }
        Ok((0..self.cells())
            .map(|cell| {
                let (a, b) = (cell / self.d2, cell % self.d2);
                let mut s = theta[0];
                if a > 0 {
                    s += theta[a];
                }
                if b > 0 {
                    s += theta[self.d1 - 1 + b];
                }
                if a > 0 && b > 0 {
                    s += theta[self.d1 + self.d2 - 1 + (a - 1) * (self.d2 - 1) + (b - 1)];
                }
                s
            })
            .collect())
    }

    /// Inverse of [`CornerDesign::scores`]: recover coefficients from cell
    /// log-scores by differencing against the reference levels.
    pub fn coefficients(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.cells() {
            return Err(MillsError::Dimension {
                expected: self.cells(),
                got: scores.len(),
            });
        }
        let s = |a: usize, b: usize| scores[self.cell(a, b)];
        let mut theta = Vec::with_capacity(self.cells());
        theta.push(s(0, 0));
        theta.extend((1..self.d1).map(|a| s(a, 0) - s(0, 0)));
        theta.extend((1..self.d2).map(|b| s(0, b) - s(0, 0)));
        for a in 1..self.d1 {
            for b in 1..self.d2 {
                theta.push(s(a, b) - s(a, 0) - s(0, b) + s(0, 0));
            }
        }
        Ok(theta)
    }
}

/// Bivariate counts for one pair and their corner-coded sufficient statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuffStats {
    pub pair: PairIndex,
    pub d1: usize,
    pub d2: usize,
    /// Row-major bivariate table.
    pub counts: Vec<u64>,
    /// `X2^T counts`.
    pub tstats: Vec<u64>,
}

impl SuffStats {
    /// Sufficient statistics from a bivariate tally.
    ///
    /// Uses the margin structure of the corner design directly: the intercept
    /// coordinate is the total, main-effect coordinates are row and column
    /// margins, interaction coordinates are the non-reference cells.
    pub fn from_counts(pair: PairIndex, d1: usize, d2: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != d1 * d2 {
            return Err(MillsError::Dimension {
                expected: d1 * d2,
                got: counts.len(),
            });
        }
        let at = |a: usize, b: usize| counts[a * d2 + b];
        let mut tstats = Vec::with_capacity(d1 * d2);
        tstats.push(counts.iter().sum());
        tstats.extend((1..d1).map(|a| (0..d2).map(|b| at(a, b)).sum::<u64>()));
        tstats.extend((1..d2).map(|b| (0..d1).map(|a| at(a, b)).sum::<u64>()));
        for a in 1..d1 {
            tstats.extend((1..d2).map(|b| at(a, b)));
        }
        Ok(Self {
            pair,
            d1,
            d2,
            counts,
            tstats,
        })
    }

    pub fn total(&self) -> u64 {
        self.tstats[0]
    }
}

/// Tally the bivariate table of `pair` over `members` (all rows when `None`).
pub fn marginal_counts(
    data: &CategoricalDataset,
    pair: PairIndex,
    members: Option<&[usize]>,
) -> Result<SuffStats> {
    if pair.k >= data.p() {
        return Err(MillsError::InvalidInput(format!(
            "pair {pair} invalid for {} variables",
            data.p()
        )));
    }
    let (d1, d2) = (data.levels()[pair.j], data.levels()[pair.k]);
    let mut counts = vec![0u64; d1 * d2];
    let mut tally = |i: usize| {
        let (a, b) = (data.code(i, pair.j) - 1, data.code(i, pair.k) - 1);
        counts[a * d2 + b] += 1;
    };
    match members {
        None => (0..data.n()).for_each(&mut tally),
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= data.n()) {
                return Err(MillsError::InvalidInput(format!(
                    "member index {bad} out of range for n = {}",
                    data.n()
                )));
            }
            idx.iter().copied().for_each(&mut tally);
        }
    }
    SuffStats::from_counts(pair, d1, d2, counts)
}

/// Bivariate tallies for every (component, pair) under allocation `z`.
///
/// Returns `[h][pair] -> row-major counts`.
pub fn group_tallies(
    data: &CategoricalDataset,
    pairs: &[PairIndex],
    z: &[usize],
    components: usize,
) -> Vec<Vec<Vec<u64>>> {
    let levels = data.levels();
    let mut out: Vec<Vec<Vec<u64>>> = (0..components)
        .map(|_| {
            pairs
                .iter()
                .map(|pr| vec![0u64; levels[pr.j] * levels[pr.k]])
                .collect()
        })
        .collect();
    for (i, row) in data.rows().enumerate() {
        let h = z[i];
        for (e, pr) in pairs.iter().enumerate() {
            let a = row[pr.j] as usize - 1;
            let b = row[pr.k] as usize - 1;
            out[h][e][a * levels[pr.k] + b] += 1;
        }
    }
    out
}
