//! Discrepancies between an estimated and a reference bivariate table.

use serde::{Deserialize, Serialize};

use crate::error::{MillsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// `|sum ref log(ref / est)|` over cells with `ref > 0`; `+inf` when the
    /// estimate misses reference support.
    pub kl: f64,
    /// Earth mover's distance with ground metric `|a - a'| + |b - b'|`.
    pub wasserstein: f64,
    /// Mean over cells of `(n est - n ref)^2 / (n ref)`, cells with `ref > 0`.
    pub pearson: f64,
}

fn check_table(t: &[f64], what: &str) -> Result<()> {
    let total: f64 = t.iter().sum();
    if t.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(MillsError::InvalidInput(format!(
            "{what} table is not a probability table (sum = {total})"
        )));
    }
    Ok(())
}

/// Compare `estimate` against `reference`, both row-major `d1 x d2`.
pub fn eval_metrics(
    estimate: &[f64],
    reference: &[f64],
    d1: usize,
    d2: usize,
    n: usize,
) -> Result<EvalMetrics> {
    if estimate.len() != d1 * d2 || reference.len() != d1 * d2 {
        return Err(MillsError::Dimension {
            expected: d1 * d2,
            got: if estimate.len() != d1 * d2 {
                estimate.len()
            } else {
                reference.len()
            },
        });
    }
    check_table(estimate, "estimate")?;
    check_table(reference, "reference")?;

    let mut kl = 0.0;
    for (&e, &r) in estimate.iter().zip(reference) {
        if r > 0.0 {
            if e <= 0.0 {
                kl = f64::INFINITY;
                break;
            }
            kl += r * (r / e).ln();
        }
    }

    let scale = n as f64;
    let pearson = estimate
        .iter()
        .zip(reference)
        .filter(|(_, &r)| r > 0.0)
        .map(|(&e, &r)| {
            let diff = scale * e - scale * r;
            diff * diff / (scale * r)
        })
        .sum::<f64>()
        / (d1 * d2) as f64;

    Ok(EvalMetrics {
        kl: kl.abs(),
        wasserstein: grid_wasserstein(estimate, reference, d1, d2)?,
        pearson,
    })
}

/// W1 between two distributions on a `d1 x d2` grid under the L1 metric on
/// level indices.
pub fn grid_wasserstein(p: &[f64], q: &[f64], d1: usize, d2: usize) -> Result<f64> {
    let coords: Vec<(usize, usize)> = (0..d1 * d2).map(|c| (c / d2, c % d2)).collect();
    let cost: Vec<Vec<f64>> = coords
        .iter()
        .map(|&(a, b)| {
            coords
                .iter()
                .map(|&(c, d)| (a.abs_diff(c) + b.abs_diff(d)) as f64)
                .collect()
        })
        .collect();
    transport_cost(p, q, &cost)
}

const MASS_EPS: f64 = 1e-14;

/// Optimal transport cost between `supply` and `demand` (equal totals) under
/// `cost[i][j]`, solved exactly by successive shortest augmenting paths.
pub fn transport_cost(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (supply.len(), demand.len());
    if cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(MillsError::Dimension {
            expected: m * n,
            got: cost.iter().map(Vec::len).sum(),
        });
    }
    let (ts, td): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if (ts - td).abs() > 1e-9 * ts.max(td).max(1.0) {
        return Err(MillsError::InvalidInput(format!(
            "transport masses differ: {ts} vs {td}"
        )));
    }
    // Balance tiny total mismatches onto the demand side.
    let mut supply_left: Vec<f64> = supply.to_vec();
    let mut demand_left: Vec<f64> = demand
        .iter()
        .map(|d| d * ts / td.max(f64::MIN_POSITIVE))
        .collect();
    let mut flow = vec![vec![0.0; n]; m];

    // Nodes 0..m are sources, m..m+n sinks.
    let max_rounds = 50 * (m + n) * (m + n) + 100;
    for _ in 0..max_rounds {
        let remaining: f64 = supply_left.iter().filter(|&&s| s > MASS_EPS).sum();
        if remaining <= MASS_EPS * (m + n) as f64 {
            break;
        }
        let mut dist = vec![f64::INFINITY; m + n];
        let mut pred = vec![usize::MAX; m + n];
        for i in 0..m {
            if supply_left[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        for _ in 0..(m + n) {
            let mut changed = false;
            for i in 0..m {
                if dist[i].is_finite() {
                    for j in 0..n {
                        let nd = dist[i] + cost[i][j];
                        if nd < dist[m + j] - 1e-12 {
                            dist[m + j] = nd;
                            pred[m + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..n {
                if dist[m + j].is_finite() {
                    for i in 0..m {
                        if flow[i][j] > MASS_EPS {
                            let nd = dist[m + j] - cost[i][j];
                            if nd < dist[i] - 1e-12 {
                                dist[i] = nd;
                                pred[i] = m + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..n)
            .filter(|&j| demand_left[j] > MASS_EPS && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]));
        let Some(sink) = sink else {
            break;
        };

        // Trace back to the originating source, collecting the bottleneck.
        let mut bottleneck = demand_left[sink];
        let mut node = m + sink;
        let source = loop {
            let prev = pred[node];
            if node >= m {
                if prev == usize::MAX {
                    return Err(MillsError::Invariant("broken augmenting path".into()));
                }
                node = prev;
            } else if prev == usize::MAX {
                break node;
            } else {
                bottleneck = bottleneck.min(flow[node][prev - m]);
                node = prev;
            }
        };
        bottleneck = bottleneck.min(supply_left[source]);

        let mut node = m + sink;
        while node != source {
            let prev = pred[node];
            if node >= m {
                flow[prev][node - m] += bottleneck;
            } else {
                flow[node][prev - m] -= bottleneck;
            }
            node = prev;
        }
        supply_left[source] -= bottleneck;
        demand_left[sink] -= bottleneck;
    }

    let leftover: f64 = supply_left.iter().map(|s| s.max(0.0)).sum();
    if leftover > 1e-9 {
        return Err(MillsError::Invariant(format!(
            "transport solver left {leftover} mass unassigned"
        )));
    }
    Ok(flow
        .iter()
        .zip(cost)
        .flat_map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f.max(0.0) * c))
        .sum())
}
