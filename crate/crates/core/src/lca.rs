//! Bayesian latent class model: a finite mixture of product multinomials
//! with a sparse Dirichlet prior on the class weights and flat Dirichlet
//! priors on the class-specific category probabilities.
//!
//! Streams follow the mixture sampler: `chain << 32` drives allocations and
//! class weights, `(chain << 32) + 1 + h * p + j` drives `psi[h][j]`.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::analytics::BivariateSource;
use crate::error::{MillsError, Result};
use crate::gibbs::SamplerConfig;
use crate::random::{self, RngHandle};
use crate::table::{pair_set, CategoricalDataset, PairIndex};

/// Class weights and per-class, per-variable category probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentClassModel {
    pub nu: Vec<f64>,
    /// `psi[h][j][a]`
    pub psi: Vec<Vec<Vec<f64>>>,
}

impl LatentClassModel {
    pub fn classes(&self) -> usize {
        self.nu.len()
    }

    pub fn validate(&self, levels: &[usize]) -> Result<()> {
        if self.nu.is_empty() || self.psi.len() != self.nu.len() {
            return Err(MillsError::Dimension {
                expected: self.nu.len(),
                got: self.psi.len(),
            });
        }
        let simplex =
            |v: &[f64]| v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if !simplex(&self.nu) {
            return Err(MillsError::InvalidInput(
                "class weights are not on the simplex".into(),
            ));
        }
        for class in &self.psi {
            if class.len() != levels.len() {
                return Err(MillsError::Dimension {
                    expected: levels.len(),
                    got: class.len(),
                });
            }
            for (probs, &d) in class.iter().zip(levels) {
                if probs.len() != d || !simplex(probs) {
                    return Err(MillsError::InvalidInput(format!(
                        "category probabilities must lie on the {d}-simplex"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `sum_h nu_h psi[h][j] (x) psi[h][k]`, row-major.
    pub fn bivariate(&self, pair: PairIndex) -> Vec<f64> {
        let (d1, d2) = (self.psi[0][pair.j].len(), self.psi[0][pair.k].len());
        let mut table = vec![0.0; d1 * d2];
        for (&nu, class) in self.nu.iter().zip(&self.psi) {
            for (a, &pa) in class[pair.j].iter().enumerate() {
                for (b, &pb) in class[pair.k].iter().enumerate() {
                    table[a * d2 + b] += nu * pa * pb;
                }
            }
        }
        table
    }

    /// Draw one class label and the corresponding row (1-based codes).
    pub fn sample_row(&self, rng: &mut RngHandle) -> Result<(usize, Vec<u16>)> {
        let h = random::categorical(rng, &self.nu)?;
        let row = self.psi[h]
            .iter()
            .map(|probs| random::categorical(rng, probs).map(|a| (a + 1) as u16))
            .collect::<Result<_>>()?;
        Ok((h, row))
    }
}

/// Kept draws of [`fit_latent_class`].
#[derive(Debug, Clone)]
pub struct LcaDraws {
    pub levels: Vec<usize>,
    pub names: Vec<String>,
    pub pairs: Vec<PairIndex>,
    pub n: usize,
    pub classes: usize,
    pub config: SamplerConfig,
    pub draws: Vec<LatentClassModel>,
    pub wall_seconds: f64,
}

impl BivariateSource for LcaDraws {
    fn levels(&self) -> &[usize] {
        &self.levels
    }

    fn pairs(&self) -> &[PairIndex] {
        &self.pairs
    }

    fn n_draws(&self) -> usize {
        self.draws.len()
    }

    fn bivariate(&self, draw: usize, e: usize) -> Result<Vec<f64>> {
        Ok(self.draws[draw].bivariate(self.pairs[e]))
    }
}

/// Gibbs sampler for the latent class model with `classes` classes.
///
/// Each cycle draws `psi | z`, then `z | psi, nu`, then `nu | z`.
pub fn fit_latent_class(
    data: &CategoricalDataset,
    classes: usize,
    config: &SamplerConfig,
) -> Result<LcaDraws> {
    if classes < 1 {
        return Err(MillsError::InvalidParameter("H must be at least 1".into()));
    }
    config.validate()?;
    let started = Instant::now();
    let levels = data.levels().to_vec();
    let p = levels.len();
    let base = config.chain << 32;
    let mut global = RngHandle::new(config.seed, base);
    let mut streams: Vec<RngHandle> = (0..classes * p)
        .map(|s| RngHandle::new(config.seed, base + 1 + s as u64))
        .collect();

    let mut z: Vec<usize> = {
        use rand::Rng;
        (0..data.n())
            .map(|_| global.random_range(0..classes))
            .collect()
    };
    let mut model = LatentClassModel {
        nu: vec![1.0 / classes as f64; classes],
        psi: vec![levels.iter().map(|&d| vec![1.0 / d as f64; d]).collect(); classes],
    };
    let prior_nu = 1.0 / classes as f64;
    let mut draws = Vec::with_capacity(config.kept());
    let mut lap = Instant::now();

    for it in 0..config.iterations {
        let mut counts: Vec<Vec<Vec<f64>>> =
            vec![levels.iter().map(|&d| vec![1.0; d]).collect(); classes];
        for (row, &h) in data.rows().zip(&z) {
            for (j, &code) in row.iter().enumerate() {
                counts[h][j][code as usize - 1] += 1.0;
            }
        }
        for h in 0..classes {
            for j in 0..p {
                model.psi[h][j] = random::dirichlet(&mut streams[h * p + j], &counts[h][j])
                    .map_err(|e| e.at(it, "psi", Some(h), None))?;
            }
        }

        let log_nu: Vec<f64> = model.nu.iter().map(|v| v.ln()).collect();
        let log_psi: Vec<Vec<Vec<f64>>> = model
            .psi
            .iter()
            .map(|class| {
                class
                    .iter()
                    .map(|v| v.iter().map(|x| x.ln()).collect())
                    .collect()
            })
            .collect();
        let mut logw = vec![0.0; classes];
        for (i, row) in data.rows().enumerate() {
            for (h, slot) in logw.iter_mut().enumerate() {
                *slot = log_nu[h]
                    + row
                        .iter()
                        .enumerate()
                        .map(|(j, &code)| log_psi[h][j][code as usize - 1])
                        .sum::<f64>();
            }
            z[i] = random::categorical_log(&mut global, &logw)
                .map_err(|e| e.at(it, "z", None, None))?;
        }

        let mut alpha = vec![prior_nu; classes];
        for &h in &z {
            alpha[h] += 1.0;
        }
        model.nu =
            random::dirichlet(&mut global, &alpha).map_err(|e| e.at(it, "nu", None, None))?;

        if it >= config.burn_in && (it - config.burn_in).is_multiple_of(config.thin) {
            draws.push(model.clone());
        }
        if (it + 1) % 100 == 0 {
            info!(
                "latent class chain {} iteration {}/{} ({:.2}s per 100 iterations)",
                config.chain,
                it + 1,
                config.iterations,
                lap.elapsed().as_secs_f64()
            );
            lap = Instant::now();
        }
    }

    Ok(LcaDraws {
        pairs: pair_set(p)?,
        levels,
        names: data.names().to_vec(),
        n: data.n(),
        classes,
        config: config.clone(),
        draws,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(iterations: usize, burn_in: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            iterations,
            burn_in,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_zero_classes() {
        let data = CategoricalDataset::from_rows(vec![2, 2], &[vec![1, 2]]).unwrap();
        assert!(fit_latent_class(&data, 0, &config(10, 5, 0)).is_err());
    }

    #[test]
    fn single_class_matches_conjugate_posterior() {
        // counts of variable 1: (30, 10, 5) so psi ~ Dir(31, 11, 6)
        let mut rows = Vec::new();
        for (code, reps) in [(1u16, 30), (2, 10), (3, 5)] {
            for r in 0..reps {
                rows.push(vec![code, 1 + (r % 2) as u16]);
            }
        }
        let data = CategoricalDataset::from_rows(vec![3, 2], &rows).unwrap();
        let fit = fit_latent_class(&data, 1, &config(6000, 0, 3)).unwrap();
        let k = fit.draws.len() as f64;
        let alpha = [31.0, 11.0, 6.0];
        let total: f64 = alpha.iter().sum();
        for (a, &alpha_a) in alpha.iter().enumerate() {
            let m = alpha_a / total;
            let var = m * (1.0 - m) / (total + 1.0);
            let got = fit.draws.iter().map(|d| d.psi[0][0][a]).sum::<f64>() / k;
            assert!(
                (got - m).abs() < 4.0 * (var / k).sqrt(),
                "cell {a}: {got} vs {m}"
            );
        }
        assert!(fit.draws.iter().all(|d| d.nu == vec![1.0]));
    }

    #[test]
    fn prior_only_run_reproduces_flat_dirichlet() {
        let data = CategoricalDataset::new(vec![4, 2], Vec::new()).unwrap();
        let fit = fit_latent_class(&data, 3, &config(4000, 0, 4)).unwrap();
        let k = fit.draws.len() as f64;
        // Dir(1,1,1,1): mean 1/4, variance 3/80
        let sd = (3.0f64 / 80.0 / k).sqrt();
        let m = fit.draws.iter().map(|d| d.psi[1][0][2]).sum::<f64>() / k;
        assert!((m - 0.25).abs() < 4.0 * sd, "{m}");
        // Dir(1/3,1/3,1/3): mean 1/3, variance (1/3)(2/3)/2
        let sd_nu = (1.0f64 / 9.0 / k).sqrt();
        let m_nu = fit.draws.iter().map(|d| d.nu[0]).sum::<f64>() / k;
        // draws are autocorrelation-free in the no-data limit
        assert!((m_nu - 1.0 / 3.0).abs() < 4.0 * sd_nu, "{m_nu}");
    }

    #[test]
    fn product_draw_gives_outer_product() {
        let model = LatentClassModel {
            nu: vec![1.0],
            psi: vec![vec![vec![0.2, 0.8], vec![0.5, 0.3, 0.2]]],
        };
        let t = model.bivariate(PairIndex::new(0, 1).unwrap());
        let expected = [0.1, 0.06, 0.04, 0.4, 0.24, 0.16];
        for (a, b) in t.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bivariate_tables_on_simplex_and_replayable() {
        let rows: Vec<Vec<u16>> = (0..60)
            .map(|i| vec![1 + (i % 3) as u16, 1 + (i % 2) as u16, 1 + (i / 30) as u16])
            .collect();
        let data = CategoricalDataset::from_rows(vec![3, 2, 2], &rows).unwrap();
        let fit = fit_latent_class(&data, 4, &config(60, 30, 9)).unwrap();
        for s in 0..fit.n_draws() {
            for e in 0..3 {
                let t = fit.bivariate(s, e).unwrap();
                assert!(t.iter().all(|&v| v >= 0.0));
                assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
        let again = fit_latent_class(&data, 4, &config(60, 30, 9)).unwrap();
        assert_eq!(fit.draws, again.draws);
    }
}
