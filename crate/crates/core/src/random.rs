//! Seeded random streams and the variates the samplers need.
//!
//! Every stochastic task owns an [`RngHandle`] identified by `(seed, stream)`;
//! identical pairs always replay the same sequence. Gamma variates use the
//! shape/rate convention throughout.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{MillsError, Result};
use crate::loglinear::log_sum_exp;

/// Terms kept in the truncated sum-of-gammas Pólya-Gamma representation.
pub const PG_TERMS: usize = 200;

/// A reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngHandle {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for RngHandle {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Parameters of a Pólya-Gamma distribution `PG(b, c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PGParams {
    pub b: f64,
    pub c: f64,
}

impl PGParams {
    pub fn new(b: f64, c: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(MillsError::InvalidParameter(format!(
                "Polya-Gamma shape must be positive and finite, got {b}"
            )));
        }
        if !c.is_finite() {
            return Err(MillsError::InvalidParameter(format!(
                "Polya-Gamma tilt must be finite, got {c}"
            )));
        }
        Ok(Self { b, c })
    }
}

/// `sum_{k >= 1} 1 / ((k - 1/2)^2 + (c / 2pi)^2) = pi^2 tanh(c/2) / c`.
fn pg_series_total(c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-8 {
        PI * PI / 2.0
    } else {
        PI * PI * (c / 2.0).tanh() / c
    }
}

/// Draw from `PG(b, c)` for any real `b > 0`.
///
/// Uses the representation `(1 / 2pi^2) sum_k g_k / ((k - 1/2)^2 + c^2/4pi^2)`
/// with `g_k ~ Gamma(b, 1)`, truncated at [`PG_TERMS`] terms. The omitted
/// terms are replaced by their expectation, so the draw has the exact mean.
pub fn pg_sample<R: Rng + ?Sized>(rng: &mut R, params: PGParams) -> Result<f64> {
    let PGParams { b, c } = PGParams::new(params.b, params.c)?;
    let gamma = Gamma::new(b, 1.0)
        .map_err(|e| MillsError::InvalidParameter(format!("PG gamma({b}): {e}")))?;
    let shift = c * c / (4.0 * PI * PI);
    let mut weighted = 0.0;
    let mut head = 0.0;
    for k in 1..=PG_TERMS {
        let half = k as f64 - 0.5;
        let inv = 1.0 / (half * half + shift);
        head += inv;
        weighted += gamma.sample(rng) * inv;
    }
    let tail = b * (pg_series_total(c) - head).max(0.0);
    Ok((weighted + tail) / (2.0 * PI * PI))
}

/// `Gamma(shape, rate)`.
pub fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(MillsError::InvalidParameter(format!(
            "gamma(shape={shape}, rate={rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| MillsError::InvalidParameter(format!("gamma: {e}")))?;
    Ok(g.sample(rng))
}

/// Natural log of a `Gamma(shape, 1)` draw, accurate for tiny shapes where
/// the draw itself underflows.
fn log_gamma_unit<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> Result<f64> {
    if shape >= 1.0 {
        return Ok(gamma(rng, shape, 1.0)?.ln());
    }
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    let boosted = gamma(rng, shape + 1.0, 1.0)?;
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    Ok(boosted.ln() + u.ln() / shape)
}

/// `Beta(a, b)` via two gamma draws in the log domain.
pub fn beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(MillsError::InvalidParameter(format!("beta({a}, {b})")));
    }
    let la = log_gamma_unit(rng, a)?;
    let lb = log_gamma_unit(rng, b)?;
    // x = 1 / (1 + exp(lb - la))
    Ok(1.0 / (1.0 + (lb - la).exp()))
}

pub fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(MillsError::InvalidParameter(format!(
            "dirichlet concentration must be positive: {alpha:?}"
        )));
    }
    let logs = alpha
        .iter()
        .map(|&a| log_gamma_unit(rng, a))
        .collect::<Result<Vec<_>>>()?;
    let norm = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - norm).exp()).collect())
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> Result<f64> {
    let dist = Normal::new(mean, sd)
        .map_err(|e| MillsError::InvalidParameter(format!("gaussian({mean}, {sd}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Index drawn with probability `probs[i]`.
///
/// `probs` must sum to one within `1e-9`; it is renormalised before use.
pub fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> Result<usize> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|&q| !(q >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(MillsError::InvalidParameter(format!(
            "categorical probabilities must be a simplex (sum = {total})"
        )));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in probs.iter().enumerate() {
        if q > 0.0 {
            last = i;
            acc += q;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// Index drawn with probability proportional to `exp(log_weights[i])`.
pub fn categorical_log<R: Rng + ?Sized>(rng: &mut R, log_weights: &[f64]) -> Result<usize> {
    let norm = log_sum_exp(log_weights);
    if !norm.is_finite() {
        return Err(MillsError::InvalidParameter(format!(
            "categorical log-weights have no finite mass: {log_weights:?}"
        )));
    }
    let probs: Vec<f64> = log_weights.iter().map(|l| (l - norm).exp()).collect();
    let total: f64 = probs.iter().sum();
    let normalised: Vec<f64> = probs.iter().map(|q| q / total).collect();
    categorical(rng, &normalised)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn same_seed_and_stream_replay() {
        let mut a = RngHandle::new(7, 3);
        let mut b = RngHandle::new(7, 3);
        let mut c = RngHandle::new(7, 4);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn pg_rejects_nonpositive_shape() {
        let mut rng = RngHandle::new(1, 0);
        assert!(pg_sample(&mut rng, PGParams { b: 0.0, c: 1.0 }).is_err());
        assert!(pg_sample(&mut rng, PGParams { b: -1.0, c: 1.0 }).is_err());
        assert!(pg_sample(
            &mut rng,
            PGParams {
                b: 1.0,
                c: f64::NAN
            }
        )
        .is_err());
    }

    #[test]
    fn pg_draws_are_positive() {
        let mut rng = RngHandle::new(2, 0);
        for &(b, c) in &[(0.5, 0.0), (1.0, 3.0), (2.7, -8.0), (300.0, 0.5)] {
            for _ in 0..200 {
                assert!(pg_sample(&mut rng, PGParams { b, c }).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn pg_unit_mean_at_zero_tilt() {
        let mut rng = RngHandle::new(3, 0);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| pg_sample(&mut rng, PGParams { b: 1.0, c: 0.0 }).unwrap())
            .collect();
        // sd of PG(1, 0) is sqrt(1/24)
        let se = (1.0f64 / 24.0).sqrt() / (draws.len() as f64).sqrt();
        assert!((mean(&draws) - 0.25).abs() < 4.0 * se);
    }

    #[test]
    fn gamma_uses_rate() {
        let mut rng = RngHandle::new(4, 0);
        let (shape, rate) = (11.0, 10.0);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| gamma(&mut rng, shape, rate).unwrap())
            .collect();
        let se = (shape / (rate * rate)).sqrt() / (draws.len() as f64).sqrt();
        assert!((mean(&draws) - shape / rate).abs() < 4.0 * se);

        let exp_draws: Vec<f64> = (0..20_000)
            .map(|_| gamma(&mut rng, 1.0, 10.0).unwrap())
            .collect();
        let se = 0.1 / (exp_draws.len() as f64).sqrt();
        assert!((mean(&exp_draws) - 0.1).abs() < 4.0 * se);
        assert!(gamma(&mut rng, 1.0, 0.0).is_err());
    }

    #[test]
    fn dirichlet_mean_and_simplex() {
        let mut rng = RngHandle::new(5, 0);
        let mut acc = [0.0; 3];
        let reps = 100_000;
        for _ in 0..reps {
            let x = dirichlet(&mut rng, &[1.0, 1.0, 1.0]).unwrap();
            assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, v) in acc.iter_mut().zip(&x) {
                *a += v;
            }
        }
        // Var of a Dir(1,1,1) coordinate is 2/36
        let se = (2.0f64 / 36.0).sqrt() / (reps as f64).sqrt();
        for a in acc {
            assert!((a / reps as f64 - 1.0 / 3.0).abs() < 4.0 * se);
        }
        let sparse = dirichlet(&mut rng, &[0.01, 0.01, 0.01]).unwrap();
        assert!(sparse.iter().all(|v| v.is_finite()));
        assert!((sparse.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(dirichlet(&mut rng, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn beta_mean() {
        let mut rng = RngHandle::new(6, 0);
        let draws: Vec<f64> = (0..50_000)
            .map(|_| beta(&mut rng, 0.5, 0.5).unwrap())
            .collect();
        assert!(draws.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let se = (1.0f64 / 8.0).sqrt() / (draws.len() as f64).sqrt();
        assert!((mean(&draws) - 0.5).abs() < 4.0 * se);
    }

    #[test]
    fn categorical_point_mass_and_validation() {
        let mut rng = RngHandle::new(8, 0);
        for _ in 0..100 {
            assert_eq!(categorical(&mut rng, &[0.0, 1.0, 0.0]).unwrap(), 1);
            assert_eq!(
                categorical_log(&mut rng, &[f64::NEG_INFINITY, 0.0]).unwrap(),
                1
            );
        }
        assert!(categorical(&mut rng, &[0.5, 0.6]).is_err());
        assert!(categorical_log(&mut rng, &[f64::NEG_INFINITY; 2]).is_err());
        // within tolerance, renormalised
        assert!(categorical(&mut rng, &[0.5, 0.5 + 1e-10]).is_ok());
    }
}
