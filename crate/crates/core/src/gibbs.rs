//! Gibbs sampler for the composite log-linear mixture.
//!
//! One cycle updates, in order: the cell log-odds of every (component, pair)
//! through Pólya-Gamma augmentation, the spike/slab indicators and composite
//! weights, each component's slab probability, the allocations, and the
//! mixture weights.
//!
//! Random streams: stream `chain << 32` drives the slab probabilities,
//! allocations and mixture weights; stream `(chain << 32) + 1 + h * P + e`
//! drives everything specific to component `h` and pair `e`. Work on distinct
//! (component, pair) slots runs in parallel without affecting the draws.

use std::time::Instant;

use log::{debug, info};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{MillsError, Result};
use crate::loglinear::{
    check_simplex, counts_loglik, log_sum_exp, obs_log_density_tables, ComponentState,
    MixtureState, PairLayout, PairParams,
};
use crate::random::{self, PGParams, RngHandle};
use crate::table::{group_tallies, CategoricalDataset, CornerDesign, PairIndex};

/// Rates `a1 - loglik` are capped here before gamma draws.
pub const RATE_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Upper bound on the number of mixture components.
    pub components: usize,
    /// Prior variance of every log-linear coefficient.
    pub sigma2: f64,
    /// Prior mean of the coefficients of each pair; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<Vec<f64>>>,
    /// Slab shape increment.
    pub a0: f64,
    /// Spike and slab rate.
    pub a1: f64,
    /// Hold every composite weight at this value and skip the indicator and
    /// weight updates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_weight: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            components: 5,
            sigma2: 3.0,
            mu: None,
            a0: 10.0,
            a1: 10.0,
            fixed_weight: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, layout: &PairLayout) -> Result<()> {
        if self.components < 1 {
            return Err(MillsError::InvalidParameter("H must be at least 1".into()));
        }
        for (name, v) in [("sigma2", self.sigma2), ("a0", self.a0), ("a1", self.a1)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MillsError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if let Some(w) = self.fixed_weight {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(MillsError::InvalidParameter(format!(
                    "fixed weight must be nonnegative, got {w}"
                )));
            }
        }
        if let Some(mu) = &self.mu {
            if mu.len() != layout.len() {
                return Err(MillsError::Dimension {
                    expected: layout.len(),
                    got: mu.len(),
                });
            }
            for (m, design) in mu.iter().zip(layout.designs()) {
                if m.len() != design.cells() {
                    return Err(MillsError::Dimension {
                        expected: design.cells(),
                        got: m.len(),
                    });
                }
            }
        }
        Ok(())
    }

    fn prior_means(&self, layout: &PairLayout) -> Vec<Vec<f64>> {
        match &self.mu {
            Some(mu) => mu.clone(),
            None => layout
                .designs()
                .iter()
                .map(|d| vec![0.0; d.cells()])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Total cycles, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Chain index; selects an independent family of streams.
    #[serde(default)]
    pub chain: u64,
    pub parallel: bool,
    pub store_allocations: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            burn_in: 1000,
            thin: 1,
            seed: 0,
            chain: 0,
            parallel: true,
            store_allocations: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(MillsError::InvalidParameter(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin < 1 {
            return Err(MillsError::InvalidParameter(
                "thin must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Gaussian prior of the cell log-odds `X2 theta` of one pair:
/// mean `X2 mu`, covariance `sigma2 X2 X2^T`.
#[derive(Debug, Clone)]
pub struct PairPrior {
    mean: Vec<f64>,
    precision: DMatrix<f64>,
}

impl PairPrior {
    pub fn new(design: &CornerDesign, mu: &[f64], sigma2: f64) -> Result<Self> {
        let mean = design.scores(mu)?;
        let inv = design
            .matrix()
            .clone()
            .try_inverse()
            .ok_or_else(|| MillsError::Invariant("corner design is singular".into()))?;
        let precision = inv.transpose() * &inv / sigma2;
        Ok(Self { mean, precision })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Mean and precision of cell `c` given all other cells.
    fn conditional(&self, log_odds: &[f64], c: usize) -> (f64, f64) {
        let q_cc = self.precision[(c, c)];
        let mut acc = 0.0;
        for (c2, (&t, &m)) in log_odds.iter().zip(&self.mean).enumerate() {
            if c2 != c {
                acc += self.precision[(c, c2)] * (t - m);
            }
        }
        (self.mean[c] - acc / q_cc, q_cc)
    }
}

/// One sweep over the cells of a pair's log-odds `X2 theta`.
///
/// Each cell is updated from its binomial one-vs-rest reduction: with offset
/// `C = log sum_{c' != c} exp(t_c')` and `psi = t_c - C`, draw
/// `omega ~ PG(w n_h, psi)` and then `t_c` from the Gaussian combining the
/// tempered pseudo-observation `w (y_c - n_h / 2)` with the prior conditional.
/// With `w n_h = 0` the likelihood drops out and cells are drawn from the
/// prior conditionals. Returns the coefficients `X2^{-1} t`.
pub fn update_theta(
    log_odds: &mut [f64],
    counts: &[u64],
    weight: f64,
    prior: &PairPrior,
    design: &CornerDesign,
    rng: &mut RngHandle,
) -> Result<Vec<f64>> {
    if log_odds.len() != design.cells() || counts.len() != design.cells() {
        return Err(MillsError::Dimension {
            expected: design.cells(),
            got: log_odds.len().min(counts.len()),
        });
    }
    if !(weight >= 0.0) {
        return Err(MillsError::InvalidParameter(format!(
            "composite weight {weight}"
        )));
    }
    let group_size: u64 = counts.iter().sum();
    let trials = weight * group_size as f64;
    let cells = design.cells();
    let mut others = vec![0.0; cells - 1];
    for c in 0..cells {
        let (cond_mean, cond_prec) = prior.conditional(log_odds, c);
        let (post_mean, post_prec) = if trials > 0.0 {
            let mut k = 0;
            for (c2, &t) in log_odds.iter().enumerate() {
                if c2 != c {
                    others[k] = t;
                    k += 1;
                }
            }
            let offset = log_sum_exp(&others);
            let psi = log_odds[c] - offset;
            let omega = random::pg_sample(rng, PGParams::new(trials, psi)?)?;
            let kappa = weight * (counts[c] as f64 - group_size as f64 / 2.0);
            let prec = cond_prec + omega;
            (
                (cond_prec * cond_mean + kappa + omega * offset) / prec,
                prec,
            )
        } else {
            (cond_mean, cond_prec)
        };
        let draw = random::gaussian(rng, post_mean, 1.0 / post_prec.sqrt())?;
        if !draw.is_finite() {
            return Err(MillsError::Numerical {
                iteration: 0,
                block: "theta",
                component: None,
                pair: None,
                msg: format!("non-finite log-odds draw for cell {}", c + 1),
            });
        }
        log_odds[c] = draw;
    }
    design.coefficients(log_odds)
}

/// Log-density of `Gamma(shape, rate)` at `x`.
pub fn gamma_log_density(x: f64, shape: f64, rate: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let power = if shape == 1.0 {
        0.0
    } else {
        (shape - 1.0) * x.ln()
    };
    shape * rate.ln() - ln_gamma(shape) + power - rate * x
}

fn capped_rate(a1: f64, loglik: f64) -> Result<(f64, bool)> {
    if loglik > 0.0 || loglik.is_nan() {
        return Err(MillsError::Invariant(format!(
            "pair log-likelihood {loglik} is positive"
        )));
    }
    let rate = a1 - loglik;
    if !(rate > 0.0) {
        return Err(MillsError::InvalidParameter(format!(
            "nonpositive gamma rate {rate}"
        )));
    }
    Ok(if rate > RATE_CAP {
        (RATE_CAP, true)
    } else {
        (rate, false)
    })
}

/// Success probability of the slab indicator given the current weight.
///
/// `gamma0 g(w; 1 + a0, a1 - l) / (gamma0 g(w; 1 + a0, a1 - l) + (1 - gamma0) g(w; 1, a1 - l))`
pub fn delta_success_prob(weight: f64, loglik: f64, gamma0: f64, a0: f64, a1: f64) -> Result<f64> {
    let (rate, _) = capped_rate(a1, loglik)?;
    if gamma0 >= 1.0 {
        return Ok(1.0);
    }
    if gamma0 <= 0.0 {
        return Ok(0.0);
    }
    let slab = gamma0.ln() + gamma_log_density(weight, 1.0 + a0, rate);
    let spike = (1.0 - gamma0).ln() + gamma_log_density(weight, 1.0, rate);
    if slab == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok(1.0 / (1.0 + (spike - slab).exp()))
}

pub fn update_delta(
    weight: f64,
    loglik: f64,
    gamma0: f64,
    a0: f64,
    a1: f64,
    rng: &mut RngHandle,
) -> Result<bool> {
    use rand::Rng;
    let prob = delta_success_prob(weight, loglik, gamma0, a0, a1)?;
    Ok(rng.random::<f64>() < prob)
}

/// A composite-weight draw and whether the rate cap was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightDraw {
    pub value: f64,
    pub capped: bool,
}

/// `w ~ Gamma(1 + a0 delta, a1 - loglik)`.
pub fn update_w(
    delta: bool,
    loglik: f64,
    a0: f64,
    a1: f64,
    rng: &mut RngHandle,
) -> Result<WeightDraw> {
    let (rate, capped) = capped_rate(a1, loglik)?;
    let shape = 1.0 + if delta { a0 } else { 0.0 };
    Ok(WeightDraw {
        value: random::gamma(rng, shape, rate)?,
        capped,
    })
}

/// Parameters of the slab-probability full conditional.
pub fn gamma0_posterior(indicators: &[bool]) -> (f64, f64) {
    let on = indicators.iter().filter(|&&d| d).count() as f64;
    (0.5 + on, 0.5 + indicators.len() as f64 - on)
}

pub fn update_gamma0(indicators: &[bool], rng: &mut RngHandle) -> Result<f64> {
    let (a, b) = gamma0_posterior(indicators);
    random::beta(rng, a, b)
}

/// Dirichlet parameters `n_h + 1/H` of the mixture-weight full conditional.
pub fn nu_posterior(z: &[usize], components: usize) -> Vec<f64> {
    let mut alpha = vec![1.0 / components as f64; components];
    for &h in z {
        alpha[h] += 1.0;
    }
    alpha
}

pub fn update_nu(z: &[usize], components: usize, rng: &mut RngHandle) -> Result<Vec<f64>> {
    random::dirichlet(rng, &nu_posterior(z, components))
}

/// Normalised allocation probabilities of one observation.
pub fn allocation_probs(
    row: &[u16],
    state: &MixtureState,
    layout: &PairLayout,
) -> Result<Vec<f64>> {
    let logw = state
        .nu
        .iter()
        .zip(&state.components)
        .map(|(&nu, comp)| Ok(nu.ln() + crate::loglinear::obs_log_density(row, comp, layout)?))
        .collect::<Result<Vec<_>>>()?;
    let norm = log_sum_exp(&logw);
    Ok(logw.iter().map(|l| (l - norm).exp()).collect())
}

/// Largest composite log-density seen while drawing allocations.
#[derive(Debug, Clone, Copy)]
pub struct AllocationSweep {
    pub max_obs_log_density: f64,
}

/// Draw every allocation from its categorical full conditional.
pub fn update_z(
    data: &CategoricalDataset,
    state: &MixtureState,
    layout: &PairLayout,
    rng: &mut RngHandle,
) -> Result<(Vec<usize>, AllocationSweep)> {
    let tables = state
        .components
        .iter()
        .map(|c| crate::loglinear::component_log_tables(c, layout))
        .collect::<Result<Vec<_>>>()?;
    allocate(data, &state.nu, &state.components, &tables, layout, rng)
}

fn allocate(
    data: &CategoricalDataset,
    nu: &[f64],
    components: &[ComponentState],
    tables: &[Vec<Vec<f64>>],
    layout: &PairLayout,
    rng: &mut RngHandle,
) -> Result<(Vec<usize>, AllocationSweep)> {
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();
    let mut logw = vec![0.0; nu.len()];
    let mut z = Vec::with_capacity(data.n());
    let mut max_density = f64::NEG_INFINITY;
    for row in data.rows() {
        for (h, slot) in logw.iter_mut().enumerate() {
            let dens = obs_log_density_tables(row, &components[h].weights, &tables[h], layout);
            max_density = max_density.max(dens);
            *slot = log_nu[h] + dens;
        }
        z.push(random::categorical_log(rng, &logw)?);
    }
    Ok((
        z,
        AllocationSweep {
            max_obs_log_density: max_density,
        },
    ))
}

/// Counters accumulated over a chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    /// Gamma draws whose rate hit [`RATE_CAP`].
    pub rate_cap_hits: u64,
    /// Kept iterations with a positive composite log-density, a negative
    /// weight or a positive pair log-likelihood.
    pub boundedness_violations: u64,
    pub max_obs_log_density: f64,
    pub max_pair_loglik: f64,
    pub min_weight: f64,
}

/// One stored iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub nu: Vec<f64>,
    /// `[h][pair] -> coefficients`
    pub theta: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<Vec<f64>>,
    pub indicators: Vec<Vec<bool>>,
    pub gamma0: Vec<f64>,
    pub z: Option<Vec<usize>>,
}

impl Draw {
    fn from_state(state: &MixtureState, store_z: bool) -> Self {
        Self {
            nu: state.nu.clone(),
            theta: state
                .components
                .iter()
                .map(|c| c.params.iter().map(|pp| pp.theta.clone()).collect())
                .collect(),
            weights: state.components.iter().map(|c| c.weights.clone()).collect(),
            indicators: state
                .components
                .iter()
                .map(|c| c.indicators.clone())
                .collect(),
            gamma0: state.components.iter().map(|c| c.slab_prob).collect(),
            z: store_z.then(|| state.z.clone()),
        }
    }
}

/// Output of [`run_chain`].
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub levels: Vec<usize>,
    pub names: Vec<String>,
    pub pairs: Vec<PairIndex>,
    pub n: usize,
    pub hyper: Hyperparams,
    pub config: SamplerConfig,
    pub draws: Vec<Draw>,
    pub diagnostics: ChainDiagnostics,
    pub wall_seconds: f64,
}

impl PosteriorDraws {
    pub fn components(&self) -> usize {
        self.hyper.components
    }
}

/// Per-(component, pair) state touched by the parallel blocks.
#[derive(Debug, Clone)]
struct PairSlot {
    component: usize,
    pair: usize,
    rng: RngHandle,
    log_odds: Vec<f64>,
    theta: Vec<f64>,
    weight: f64,
    indicator: bool,
    loglik: f64,
    capped: bool,
}

/// Stepwise access to the sampler.
pub struct GibbsSampler<'a> {
    data: &'a CategoricalDataset,
    layout: PairLayout,
    hyper: Hyperparams,
    priors: Vec<PairPrior>,
    slots: Vec<PairSlot>,
    slab_probs: Vec<f64>,
    nu: Vec<f64>,
    z: Vec<usize>,
    global: RngHandle,
    parallel: bool,
    iteration: usize,
    diagnostics: ChainDiagnostics,
    last_max_density: f64,
}

impl<'a> GibbsSampler<'a> {
    pub fn new(
        data: &'a CategoricalDataset,
        hyper: Hyperparams,
        config: &SamplerConfig,
    ) -> Result<Self> {
        let layout = PairLayout::new(data.levels())?;
        hyper.validate(&layout)?;
        let h_count = hyper.components;
        let means = hyper.prior_means(&layout);
        let priors = layout
            .designs()
            .iter()
            .zip(&means)
            .map(|(design, mu)| PairPrior::new(design, mu, hyper.sigma2))
            .collect::<Result<Vec<_>>>()?;

        let base = config.chain << 32;
        let mut global = RngHandle::new(config.seed, base);
        let z: Vec<usize> = (0..data.n())
            .map(|_| {
                use rand::Rng;
                global.random_range(0..h_count)
            })
            .collect();

        let mut slots = Vec::with_capacity(h_count * layout.len());
        for h in 0..h_count {
            for (e, (prior, mu)) in priors.iter().zip(&means).enumerate() {
                slots.push(PairSlot {
                    component: h,
                    pair: e,
                    rng: RngHandle::new(config.seed, base + 1 + (h * layout.len() + e) as u64),
                    log_odds: prior.mean.clone(),
                    theta: mu.clone(),
                    weight: hyper.fixed_weight.unwrap_or(1.0),
                    indicator: true,
                    loglik: 0.0,
                    capped: false,
                });
            }
        }

        Ok(Self {
            data,
            layout,
            priors,
            slots,
            slab_probs: vec![0.5; h_count],
            nu: vec![1.0 / h_count as f64; h_count],
            z,
            global,
            parallel: config.parallel,
            iteration: 0,
            diagnostics: ChainDiagnostics {
                max_obs_log_density: f64::NEG_INFINITY,
                max_pair_loglik: f64::NEG_INFINITY,
                min_weight: f64::INFINITY,
                ..Default::default()
            },
            hyper,
            last_max_density: f64::NEG_INFINITY,
        })
    }

    pub fn layout(&self) -> &PairLayout {
        &self.layout
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn diagnostics(&self) -> &ChainDiagnostics {
        &self.diagnostics
    }

    /// Current pair log-likelihoods `[h][pair]`.
    pub fn pair_logliks(&self) -> Vec<Vec<f64>> {
        let p = self.layout.len();
        self.slots
            .chunks(p)
            .map(|c| c.iter().map(|s| s.loglik).collect())
            .collect()
    }

    /// Largest composite log-density evaluated in the latest allocation sweep.
    pub fn last_max_obs_log_density(&self) -> f64 {
        self.last_max_density
    }

    pub fn state(&self) -> MixtureState {
        let p = self.layout.len();
        let components = self
            .slots
            .chunks(p)
            .zip(&self.slab_probs)
            .map(|(chunk, &gamma0)| ComponentState {
                params: chunk
                    .iter()
                    .map(|s| PairParams {
                        pair: self.layout.pairs()[s.pair],
                        theta: s.theta.clone(),
                    })
                    .collect(),
                weights: chunk.iter().map(|s| s.weight).collect(),
                indicators: chunk.iter().map(|s| s.indicator).collect(),
                slab_prob: gamma0,
            })
            .collect();
        MixtureState {
            nu: self.nu.clone(),
            z: self.z.clone(),
            components,
        }
    }

    /// One full cycle.
    pub fn step(&mut self) -> Result<()> {
        let it = self.iteration;
        let h_count = self.hyper.components;
        let tallies = group_tallies(self.data, self.layout.pairs(), &self.z, h_count);
        let (a0, a1) = (self.hyper.a0, self.hyper.a1);
        let layout = &self.layout;
        let priors = &self.priors;
        let slab_probs = &self.slab_probs;
        let fixed_weight = self.hyper.fixed_weight;

        let work = |slot: &mut PairSlot| -> Result<()> {
            let (h, e) = (slot.component, slot.pair);
            let design = &layout.designs()[e];
            let counts = &tallies[h][e];
            let site = Some((layout.pairs()[e].j, layout.pairs()[e].k));
            slot.theta = update_theta(
                &mut slot.log_odds,
                counts,
                slot.weight,
                &priors[e],
                design,
                &mut slot.rng,
            )
            .map_err(|err| err.at(it, "theta", Some(h), site))?;
            let norm = log_sum_exp(&slot.log_odds);
            let log_probs: Vec<f64> = slot.log_odds.iter().map(|t| t - norm).collect();
            slot.loglik = counts_loglik(counts, &log_probs);
            if let Some(w) = fixed_weight {
                slot.weight = w;
                return Ok(());
            }
            slot.indicator = update_delta(
                slot.weight,
                slot.loglik,
                slab_probs[h],
                a0,
                a1,
                &mut slot.rng,
            )
            .map_err(|err| err.at(it, "delta", Some(h), site))?;
            let draw = update_w(slot.indicator, slot.loglik, a0, a1, &mut slot.rng)
                .map_err(|err| err.at(it, "w", Some(h), site))?;
            slot.weight = draw.value;
            slot.capped = draw.capped;
            Ok(())
        };
        if self.parallel {
            self.slots.par_iter_mut().try_for_each(work)?;
        } else {
            self.slots.iter_mut().try_for_each(work)?;
        }

        let p = self.layout.len();
        for (h, chunk) in self.slots.chunks(p).enumerate() {
            self.diagnostics.rate_cap_hits += chunk.iter().filter(|s| s.capped).count() as u64;
            let indicators: Vec<bool> = chunk.iter().map(|s| s.indicator).collect();
            self.slab_probs[h] = update_gamma0(&indicators, &mut self.global)
                .map_err(|err| err.at(it, "gamma0", Some(h), None))?;
        }

        let state = self.state();
        let tables = self
            .slots
            .chunks(p)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|s| {
                        let norm = log_sum_exp(&s.log_odds);
                        s.log_odds.iter().map(|t| t - norm).collect()
                    })
                    .collect::<Vec<Vec<f64>>>()
            })
            .collect::<Vec<_>>();
        let (z, sweep) = allocate(
            self.data,
            &state.nu,
            &state.components,
            &tables,
            &self.layout,
            &mut self.global,
        )
        .map_err(|err| err.at(it, "z", None, None))?;
        self.z = z;
        self.last_max_density = sweep.max_obs_log_density;

        self.nu = update_nu(&self.z, h_count, &mut self.global)
            .map_err(|err| err.at(it, "nu", None, None))?;
        check_simplex(&self.nu, 1e-12).map_err(|err| err.at(it, "nu", None, None))?;

        self.iteration += 1;
        Ok(())
    }

    fn record_bounds(&mut self) {
        let max_ll = self
            .slots
            .iter()
            .map(|s| s.loglik)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_w = self
            .slots
            .iter()
            .map(|s| s.weight)
            .fold(f64::INFINITY, f64::min);
        let d = &mut self.diagnostics;
        d.max_pair_loglik = d.max_pair_loglik.max(max_ll);
        d.min_weight = d.min_weight.min(min_w);
        d.max_obs_log_density = d.max_obs_log_density.max(self.last_max_density);
        if max_ll > 0.0 || min_w < 0.0 || self.last_max_density > 0.0 {
            d.boundedness_violations += 1;
        }
    }
}

/// Run one chain and keep the post-burn-in, thinned draws.
pub fn run_chain(
    data: &CategoricalDataset,
    hyper: &Hyperparams,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let started = Instant::now();
    let mut sampler = GibbsSampler::new(data, hyper.clone(), config)?;
    let mut draws = Vec::with_capacity(config.kept());
    let mut lap = Instant::now();
    for it in 0..config.iterations {
        sampler.step()?;
        if it >= config.burn_in && (it - config.burn_in).is_multiple_of(config.thin) {
            sampler.record_bounds();
            draws.push(Draw::from_state(&sampler.state(), config.store_allocations));
        }
        if (it + 1) % 100 == 0 {
            info!(
                "chain {} iteration {}/{} ({:.2}s per 100 iterations)",
                config.chain,
                it + 1,
                config.iterations,
                lap.elapsed().as_secs_f64()
            );
            lap = Instant::now();
        }
    }
    let diagnostics = sampler.diagnostics().clone();
    if diagnostics.rate_cap_hits > 0 {
        debug!("gamma rate cap applied {} times", diagnostics.rate_cap_hits);
    }
    Ok(PosteriorDraws {
        levels: data.levels().to_vec(),
        names: data.names().to_vec(),
        pairs: sampler.layout().pairs().to_vec(),
        n: data.n(),
        hyper: hyper.clone(),
        config: config.clone(),
        draws,
        diagnostics,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_edge_cases() {
        assert_eq!(delta_success_prob(0.7, -3.0, 1.0, 10.0, 10.0).unwrap(), 1.0);
        assert_eq!(delta_success_prob(0.7, -3.0, 0.0, 10.0, 10.0).unwrap(), 0.0);
        assert!(delta_success_prob(0.7, 0.5, 0.5, 10.0, 10.0).is_err());
        let mut rng = RngHandle::new(1, 1);
        for _ in 0..50 {
            assert!(update_delta(0.3, -1.0, 1.0, 10.0, 10.0, &mut rng).unwrap());
            assert!(!update_delta(0.3, -1.0, 0.0, 10.0, 10.0, &mut rng).unwrap());
        }
    }

    #[test]
    fn delta_probability_matches_density_ratio() {
        // Gamma(1 + a0, rate) and Gamma(1, rate) densities at w = 1,
        // rate = a1 - l = 60, evaluated independently through statrs.
        use statrs::distribution::{Continuous, Gamma};
        let slab = Gamma::new(11.0, 60.0).unwrap().pdf(1.0);
        let spike = Gamma::new(1.0, 60.0).unwrap().pdf(1.0);
        let expected = 0.5 * slab / (0.5 * slab + 0.5 * spike);
        let got = delta_success_prob(1.0, -50.0, 0.5, 10.0, 10.0).unwrap();
        assert!(
            (got - expected).abs() < 1e-12 * expected.max(1e-300),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn weight_update_means() {
        let mut rng = RngHandle::new(2, 2);
        let reps = 40_000;
        let m0: f64 = (0..reps)
            .map(|_| update_w(false, 0.0, 10.0, 10.0, &mut rng).unwrap().value)
            .sum::<f64>()
            / reps as f64;
        assert!((m0 - 0.1).abs() < 4.0 * 0.1 / (reps as f64).sqrt());
        let m1: f64 = (0..reps)
            .map(|_| update_w(true, -1.0, 10.0, 10.0, &mut rng).unwrap().value)
            .sum::<f64>()
            / reps as f64;
        let sd = (11.0f64).sqrt() / 11.0;
        assert!((m1 - 1.0).abs() < 4.0 * sd / (reps as f64).sqrt());
        // rate grows as the fit worsens
        let mean_at = |l: f64| 11.0 / (10.0 - l);
        assert!(mean_at(-100.0) < mean_at(-10.0));
        assert!(update_w(true, 1e-3, 10.0, 10.0, &mut rng).is_err());
        let capped = update_w(true, -1e300, 10.0, 10.0, &mut rng).unwrap();
        assert!(capped.capped && capped.value >= 0.0);
    }

    #[test]
    fn gamma0_parameters() {
        assert_eq!(gamma0_posterior(&[true; 105]), (105.5, 0.5));
        assert_eq!(gamma0_posterior(&[false; 105]), (0.5, 105.5));
        assert_eq!(gamma0_posterior(&[true, false, true]), (2.5, 1.5));
    }

    #[test]
    fn nu_parameters() {
        assert_eq!(nu_posterior(&[], 5), vec![0.2; 5]);
        let z = vec![0usize; 400];
        assert_eq!(nu_posterior(&z, 5), vec![400.2, 0.2, 0.2, 0.2, 0.2]);
    }

    #[test]
    fn nu_draw_mean() {
        let mut rng = RngHandle::new(3, 0);
        let z: Vec<usize> = (0..30)
            .map(|i| i % 3)
            .chain(std::iter::repeat_n(0, 10))
            .collect();
        let alpha = nu_posterior(&z, 4);
        let total: f64 = alpha.iter().sum();
        let reps = 20_000;
        let mut acc = [0.0; 4];
        for _ in 0..reps {
            for (a, v) in acc.iter_mut().zip(update_nu(&z, 4, &mut rng).unwrap()) {
                *a += v;
            }
        }
        for (h, a) in acc.iter().enumerate() {
            let m = alpha[h] / total;
            let sd = (m * (1.0 - m) / (total + 1.0)).sqrt();
            assert!((a / reps as f64 - m).abs() < 4.0 * sd / (reps as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn prior_covariance_is_design_outer_product() {
        let design = CornerDesign::new(2, 3).unwrap();
        let prior = PairPrior::new(&design, &[0.0; 6], 3.0).unwrap();
        let cov = design.matrix() * design.matrix().transpose() * 3.0;
        let ident = prior.precision() * cov;
        for r in 0..6 {
            for c in 0..6 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((ident[(r, c)] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_group_draws_from_prior() {
        let design = CornerDesign::new(2, 2).unwrap();
        let mu = [0.5, -1.0, 0.25, 0.75];
        let prior = PairPrior::new(&design, &mu, 3.0).unwrap();
        let mut rng = RngHandle::new(4, 9);
        let mut t = prior.mean().to_vec();
        let sweeps = 40_000;
        let mut acc = [0.0; 4];
        for _ in 0..sweeps {
            update_theta(&mut t, &[0, 0, 0, 0], 1.0, &prior, &design, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(&t) {
                *a += v;
            }
        }
        let target = design.scores(&mu).unwrap();
        for (a, m) in acc.iter().zip(&target) {
            // Autocorrelated draws: allow a generous band around the prior mean.
            assert!(
                (a / sweeps as f64 - m).abs() < 0.15,
                "{} vs {m}",
                a / sweeps as f64
            );
        }

        // zero weight with data behaves identically: likelihood is ignored
        let mut r1 = RngHandle::new(5, 0);
        let mut r2 = RngHandle::new(5, 0);
        let mut t1 = prior.mean().to_vec();
        let mut t2 = prior.mean().to_vec();
        update_theta(&mut t1, &[9, 1, 4, 2], 0.0, &prior, &design, &mut r1).unwrap();
        update_theta(&mut t2, &[0, 0, 0, 0], 1.0, &prior, &design, &mut r2).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn allocation_single_component() {
        let data = CategoricalDataset::from_rows(vec![2, 2], &[vec![1, 2], vec![2, 2], vec![1, 1]])
            .unwrap();
        let config = SamplerConfig {
            iterations: 3,
            burn_in: 0,
            ..Default::default()
        };
        let hyper = Hyperparams {
            components: 1,
            ..Default::default()
        };
        let mut s = GibbsSampler::new(&data, hyper, &config).unwrap();
        for _ in 0..3 {
            s.step().unwrap();
            assert!(s.state().z.iter().all(|&h| h == 0));
        }
    }

    #[test]
    fn allocation_probability_two_components() {
        // Component 1 uniform, component 2 puts 10x the mass of the others on
        // the observed cell (2,2): probabilities (1/13)*3 each and 10/13.
        let layout = PairLayout::new(&[2, 2]).unwrap();
        let design = &layout.designs()[0];
        let mean = vec![vec![0.0; 4]];
        let uniform = ComponentState::initial(&layout, &mean);
        let mut peaked = uniform.clone();
        peaked.params[0].theta = design.coefficients(&[0.0, 0.0, 0.0, 10f64.ln()]).unwrap();
        let state = MixtureState {
            nu: vec![0.4, 0.6],
            z: vec![],
            components: vec![uniform, peaked],
        };
        let probs = allocation_probs(&[2, 2], &state, &layout).unwrap();
        let a = 0.4 * 0.25;
        let b = 0.6 * 10.0 / 13.0;
        assert!((probs[1] - b / (a + b)).abs() < 1e-12);

        let twins = MixtureState {
            nu: vec![0.3, 0.7],
            z: vec![],
            components: vec![state.components[1].clone(), state.components[1].clone()],
        };
        let probs = allocation_probs(&[1, 2], &twins, &layout).unwrap();
        assert!((probs[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = SamplerConfig {
            iterations: 10,
            burn_in: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let thin0 = SamplerConfig {
            thin: 0,
            ..Default::default()
        };
        assert!(thin0.validate().is_err());
        assert_eq!(
            SamplerConfig {
                iterations: 2000,
                burn_in: 1000,
                thin: 3,
                ..Default::default()
            }
            .kept(),
            334
        );
    }

    #[test]
    fn parallel_and_serial_chains_agree() {
        let rows: Vec<Vec<u16>> = (0..30)
            .map(|i| {
                vec![
                    (i % 2 + 1) as u16,
                    (i % 3 + 1) as u16,
                    ((i / 2) % 2 + 1) as u16,
                ]
            })
            .collect();
        let data = CategoricalDataset::from_rows(vec![2, 3, 2], &rows).unwrap();
        let hyper = Hyperparams {
            components: 2,
            ..Default::default()
        };
        let mut config = SamplerConfig {
            iterations: 20,
            burn_in: 10,
            seed: 17,
            parallel: true,
            ..Default::default()
        };
        let a = run_chain(&data, &hyper, &config).unwrap();
        config.parallel = false;
        let b = run_chain(&data, &hyper, &config).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.draws.len(), 10);
    }
}
