//! Posterior functionals: bivariate tables, Cramér-V, quantile summaries and
//! dependence-graph edge lists.

use std::path::Path;

use serde::Serialize;

use crate::error::{MillsError, Result};
use crate::gibbs::{Draw, PosteriorDraws};
use crate::loglinear::{cell_log_probs, PairLayout};
use crate::table::{CornerDesign, PairIndex};

/// Anything that yields a bivariate probability table per draw and pair.
pub trait BivariateSource {
    fn levels(&self) -> &[usize];
    fn pairs(&self) -> &[PairIndex];
    fn n_draws(&self) -> usize;
    /// Row-major table of pair `pairs()[e]` at draw `draw`.
    fn bivariate(&self, draw: usize, e: usize) -> Result<Vec<f64>>;
}

impl<T: BivariateSource + ?Sized> BivariateSource for &T {
    fn levels(&self) -> &[usize] {
        (**self).levels()
    }

    fn pairs(&self) -> &[PairIndex] {
        (**self).pairs()
    }

    fn n_draws(&self) -> usize {
        (**self).n_draws()
    }

    fn bivariate(&self, draw: usize, e: usize) -> Result<Vec<f64>> {
        (**self).bivariate(draw, e)
    }
}

/// `sum_h nu_h exp(X2 theta^h - kappa_2(theta^h))` for one pair.
pub fn bivariate_estimate(draw: &Draw, e: usize, design: &CornerDesign) -> Result<Vec<f64>> {
    if draw.nu.len() != draw.theta.len() {
        return Err(MillsError::Dimension {
            expected: draw.nu.len(),
            got: draw.theta.len(),
        });
    }
    // per-cell terms are summed in sorted order so relabelling components
    // cannot change the result
    let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(draw.nu.len()); design.cells()];
    for (&nu, comp) in draw.nu.iter().zip(&draw.theta) {
        let theta = comp.get(e).ok_or_else(|| {
            MillsError::InvalidInput(format!("draw has no parameters for pair {}", e + 1))
        })?;
        if nu == 0.0 {
            continue;
        }
        for (t, lp) in terms.iter_mut().zip(cell_log_probs(theta, design)?) {
            t.push(nu * lp.exp());
        }
    }
    Ok(terms
        .into_iter()
        .map(|mut t| {
            t.sort_by(f64::total_cmp);
            t.iter().sum()
        })
        .collect())
}

/// [`BivariateSource`] over fitted mixture draws.
pub struct MillsTables<'a> {
    draws: &'a [Draw],
    layout: PairLayout,
}

impl<'a> MillsTables<'a> {
    pub fn new(posterior: &'a PosteriorDraws) -> Result<Self> {
        Self::from_parts(&posterior.draws, &posterior.levels)
    }

    pub fn from_parts(draws: &'a [Draw], levels: &[usize]) -> Result<Self> {
        Ok(Self {
            draws,
            layout: PairLayout::new(levels)?,
        })
    }
}

impl BivariateSource for MillsTables<'_> {
    fn levels(&self) -> &[usize] {
        self.layout.levels()
    }

    fn pairs(&self) -> &[PairIndex] {
        self.layout.pairs()
    }

    fn n_draws(&self) -> usize {
        self.draws.len()
    }

    fn bivariate(&self, draw: usize, e: usize) -> Result<Vec<f64>> {
        bivariate_estimate(&self.draws[draw], e, &self.layout.designs()[e])
    }
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

/// Population Cramér-V of a row-major `d1 x d2` probability table.
///
/// Margins and the chi-square sum are accumulated in sorted order, so the
/// result is bitwise invariant under row and column permutations.
pub fn cramer_v(table: &[f64], d1: usize, d2: usize) -> Result<f64> {
    if table.len() != d1 * d2 || d1 < 2 || d2 < 2 {
        return Err(MillsError::Dimension {
            expected: d1 * d2,
            got: table.len(),
        });
    }
    if let Some(v) = table.iter().find(|&&v| !(v >= 0.0)) {
        return Err(MillsError::InvalidInput(format!(
            "negative table entry {v}"
        )));
    }
    let total = sorted_sum(table.to_vec());
    if (total - 1.0).abs() > 1e-6 {
        return Err(MillsError::InvalidInput(format!(
            "table sums to {total}, not 1"
        )));
    }
    let rows: Vec<f64> = (0..d1)
        .map(|a| sorted_sum(table[a * d2..(a + 1) * d2].to_vec()))
        .collect();
    let cols: Vec<f64> = (0..d2)
        .map(|b| sorted_sum((0..d1).map(|a| table[a * d2 + b]).collect()))
        .collect();
    let mut terms = Vec::with_capacity(d1 * d2);
    for a in 0..d1 {
        for b in 0..d2 {
            let expected = rows[a] * cols[b];
            if expected > 0.0 {
                let diff = table[a * d2 + b] - expected;
                terms.push(diff * diff / expected);
            }
        }
    }
    let phi2 = sorted_sum(terms);
    Ok((phi2 / (d1.min(d2) - 1) as f64).sqrt().clamp(0.0, 1.0))
}

/// Quantile by linear interpolation between order statistics of `sorted`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Mean and 2.5% / 97.5% quantiles of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Interval {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        // centred on the first value so constant samples average exactly
        let shift = values.first().copied().unwrap_or(f64::NAN);
        Self {
            mean: shift + values.iter().map(|v| v - shift).sum::<f64>() / values.len() as f64,
            q025: quantile(&sorted, 0.025),
            q975: quantile(&sorted, 0.975),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BivariateEstimate {
    pub pair: PairIndex,
    pub d1: usize,
    pub d2: usize,
    /// Per-draw row-major tables.
    pub draws: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AssociationSummary {
    pub pair: PairIndex,
    pub values: Vec<f64>,
    pub interval: Interval,
}

#[derive(Debug, Clone)]
pub struct PairSummary {
    pub table: BivariateEstimate,
    pub association: AssociationSummary,
}

/// Summaries of the requested pairs (all pairs when `pairs` is `None`).
pub fn summarize<S: BivariateSource + ?Sized>(
    source: &S,
    pairs: Option<&[PairIndex]>,
) -> Result<Vec<PairSummary>> {
    let n = source.n_draws();
    if n < 2 {
        return Err(MillsError::InvalidInput(format!(
            "need at least 2 kept draws to summarise, got {n}"
        )));
    }
    let wanted: Vec<usize> = match pairs {
        None => (0..source.pairs().len()).collect(),
        Some(list) => list
            .iter()
            .map(|pr| {
                source.pairs().iter().position(|q| q == pr).ok_or_else(|| {
                    MillsError::InvalidInput(format!("pair {pr} not in the fitted model"))
                })
            })
            .collect::<Result<_>>()?,
    };
    let levels = source.levels();
    wanted
        .into_iter()
        .map(|e| {
            let pair = source.pairs()[e];
            let (d1, d2) = (levels[pair.j], levels[pair.k]);
            let tables = (0..n)
                .map(|s| source.bivariate(s, e))
                .collect::<Result<Vec<_>>>()?;
            let values = tables
                .iter()
                .map(|t| cramer_v(t, d1, d2))
                .collect::<Result<Vec<_>>>()?;
            let cells: Vec<Interval> = (0..d1 * d2)
                .map(|c| Interval::of(&tables.iter().map(|t| t[c]).collect::<Vec<_>>()))
                .collect();
            Ok(PairSummary {
                table: BivariateEstimate {
                    pair,
                    d1,
                    d2,
                    mean: cells.iter().map(|i| i.mean).collect(),
                    q025: cells.iter().map(|i| i.q025).collect(),
                    q975: cells.iter().map(|i| i.q975).collect(),
                    draws: tables,
                },
                association: AssociationSummary {
                    pair,
                    interval: Interval::of(&values),
                    values,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub node_j: usize,
    pub node_k: usize,
    #[serde(rename = "mean_V")]
    pub mean_v: f64,
    #[serde(rename = "q025_V")]
    pub q025_v: f64,
    #[serde(rename = "q975_V")]
    pub q975_v: f64,
}

/// Edges whose posterior mean Cramér-V is at least `threshold`.
/// Nodes are 1-based variable indices.
pub fn graph_export(summaries: &[PairSummary], threshold: f64) -> Vec<Edge> {
    summaries
        .iter()
        .filter(|s| s.association.interval.mean >= threshold)
        .map(|s| Edge {
            node_j: s.association.pair.j + 1,
            node_k: s.association.pair.k + 1,
            mean_v: s.association.interval.mean,
            q025_v: s.association.interval.q025,
            q975_v: s.association.interval.q975,
        })
        .collect()
}

pub fn write_edges(path: &Path, edges: &[Edge]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if edges.is_empty() {
        w.write_record(["node_j", "node_k", "mean_V", "q025_V", "q975_V"])?;
    }
    for e in edges {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| MillsError::io(path, e))?;
    Ok(())
}
