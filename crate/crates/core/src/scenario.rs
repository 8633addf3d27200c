//! Synthetic data generators for the four simulation settings, with exact
//! ground-truth tables.
//!
//! * 1: latent class model, flat Dirichlet draws for weights and probabilities.
//! * 2: dense log-linear law with main effects and two-way interactions on
//!   block J; Dirichlet-multinomial variables elsewhere.
//! * 3: mass 0.1 on each diagonal cell of block J, the rest spread evenly;
//!   Dirichlet-multinomial elsewhere.
//! * 4: scenario 2 plus a log-linear law with up to three-way interactions
//!   on block J'.
//!
//! Block tables are enumerated exactly and sampled cell by cell.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{MillsError, Result};
use crate::lca::LatentClassModel;
use crate::random::{self, RngHandle};
use crate::table::{pair_set, CategoricalDataset, PairIndex};

/// Largest block table the generators will enumerate.
const MAX_BLOCK_CELLS: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub seed: u64,
    /// Block J, 0-based variable indices.
    pub block: Vec<usize>,
    /// Block J' (scenario 4), 0-based.
    pub second_block: Vec<usize>,
    /// Standard deviation of the log-linear coefficients.
    pub coef_sd: f64,
    /// Symmetric Dirichlet-multinomial concentration for non-block variables.
    pub dm_alpha: f64,
    /// Classes of the scenario-1 latent class model.
    pub classes: usize,
    /// Probability of each diagonal cell in scenario 3.
    pub diagonal_mass: f64,
    /// Scenario 4: let J' start at the last variable of J and overwrite it.
    pub literal_overlap: bool,
}

impl ScenarioSpec {
    /// Defaults of the simulation study: n=400, p=15, d=4, J = 1..5,
    /// J' = 6..10. Blocks are clipped to the available variables.
    pub fn new(id: u8, n: usize, p: usize, d: usize, seed: u64) -> Self {
        Self {
            id,
            n,
            p,
            d,
            seed,
            block: (0..5.min(p)).collect(),
            second_block: (5.min(p)..10.min(p)).collect(),
            coef_sd: 0.1,
            dm_alpha: 3.0,
            classes: 5,
            diagonal_mass: 0.1,
            literal_overlap: false,
        }
    }

    pub fn with_literal_overlap(mut self) -> Self {
        self.literal_overlap = true;
        self.second_block = (4.min(self.p)..10.min(self.p)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.id) {
            return Err(MillsError::InvalidParameter(format!(
                "unknown scenario {}",
                self.id
            )));
        }
        if self.p < 2 || self.d < 2 || self.d > u16::MAX as usize {
            return Err(MillsError::InvalidParameter(format!(
                "need p >= 2 and d >= 2, got p={}, d={}",
                self.p, self.d
            )));
        }
        for blk in [&self.block, &self.second_block] {
            if blk.iter().any(|&j| j >= self.p) {
                return Err(MillsError::InvalidParameter(
                    "block variable out of range".into(),
                ));
            }
            if self
                .d
                .checked_pow(blk.len() as u32)
                .is_none_or(|c| c > MAX_BLOCK_CELLS)
            {
                return Err(MillsError::InvalidParameter(format!(
                    "block of {} variables with {} levels is too large to enumerate",
                    blk.len(),
                    self.d
                )));
            }
        }
        if self.id != 1 && self.block.is_empty() {
            return Err(MillsError::InvalidParameter("block J is empty".into()));
        }
        if self.id == 4 && self.second_block.is_empty() {
            return Err(MillsError::InvalidParameter(format!(
                "block J' is empty for p={}",
                self.p
            )));
        }
        if self.id == 3 && self.diagonal_mass * self.d as f64 >= 1.0 {
            return Err(MillsError::InvalidParameter(format!(
                "diagonal mass {} over {} cells leaves nothing for the rest",
                self.diagonal_mass, self.d
            )));
        }
        if !(self.coef_sd >= 0.0) || !(self.dm_alpha > 0.0) || self.classes < 1 {
            return Err(MillsError::InvalidParameter(
                "invalid scenario knobs".into(),
            ));
        }
        Ok(())
    }
}

/// Joint law of a block of variables; `table` is row-major with the first
/// variable varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTable {
    pub vars: Vec<usize>,
    pub levels: Vec<usize>,
    pub table: Vec<f64>,
}

impl BlockTable {
    /// Marginal over `keep` (subset of `vars`, in the order given).
    pub fn marginal(&self, keep: &[usize]) -> Result<Vec<f64>> {
        let pos = keep
            .iter()
            .map(|v| {
                self.vars.iter().position(|u| u == v).ok_or_else(|| {
                    MillsError::InvalidInput(format!("variable {} not in block", v + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_levels: Vec<usize> = pos.iter().map(|&i| self.levels[i]).collect();
        let mut out = vec![0.0; out_levels.iter().product()];
        let mut idx = vec![0usize; self.levels.len()];
        for &mass in &self.table {
            let cell = pos
                .iter()
                .zip(&out_levels)
                .fold(0, |acc, (&i, &d)| acc * d + idx[i]);
            out[cell] += mass;
            for i in (0..idx.len()).rev() {
                idx[i] += 1;
                if idx[i] < self.levels[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        Ok(out)
    }
}

/// Exact generating law of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub spec: ScenarioSpec,
    pub levels: Vec<usize>,
    pub blocks: Vec<BlockTable>,
    /// Category probabilities of variables generated independently.
    pub independent: Vec<Option<Vec<f64>>>,
    /// Scenario 1 only.
    pub latent_class: Option<LatentClassModel>,
}

impl ScenarioTruth {
    /// Block that generated variable `j` (the last writer wins).
    fn owner(&self, j: usize) -> Option<usize> {
        self.blocks.iter().rposition(|b| b.vars.contains(&j))
    }

    pub fn univariate(&self, j: usize) -> Result<Vec<f64>> {
        if let Some(lcm) = &self.latent_class {
            let mut m = vec![0.0; self.levels[j]];
            for (&nu, class) in lcm.nu.iter().zip(&lcm.psi) {
                for (slot, &q) in m.iter_mut().zip(&class[j]) {
                    *slot += nu * q;
                }
            }
            return Ok(m);
        }
        match self.owner(j) {
            Some(b) => self.blocks[b].marginal(&[j]),
            None => self.independent[j]
                .clone()
                .ok_or_else(|| MillsError::Invariant(format!("variable {} has no law", j + 1))),
        }
    }

    /// True bivariate table of a pair, row-major.
    pub fn pair_margin(&self, pair: PairIndex) -> Result<Vec<f64>> {
        if let Some(lcm) = &self.latent_class {
            return Ok(lcm.bivariate(pair));
        }
        match (self.owner(pair.j), self.owner(pair.k)) {
            (Some(a), Some(b)) if a == b => self.blocks[a].marginal(&[pair.j, pair.k]),
            _ => {
                let (mj, mk) = (self.univariate(pair.j)?, self.univariate(pair.k)?);
                Ok(mj
                    .iter()
                    .flat_map(|a| mk.iter().map(move |b| a * b))
                    .collect())
            }
        }
    }

    pub fn pair_margins(&self) -> Result<Vec<(PairIndex, Vec<f64>)>> {
        pair_set(self.levels.len())?
            .into_iter()
            .map(|pr| Ok((pr, self.pair_margin(pr)?)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub data: CategoricalDataset,
    pub truth: ScenarioTruth,
}

/// Enumerated log-linear law on `d^m` cells containing every term of order
/// `1..=order`, each non-reference coefficient drawn `N(0, sd^2)`.
pub fn loglinear_block(
    vars: &[usize],
    d: usize,
    order: usize,
    sd: f64,
    rng: &mut RngHandle,
) -> Result<BlockTable> {
    let m = vars.len();
    let cells = d.pow(m as u32);
    let mut scores = vec![0.0; cells];
    let codes: Vec<Vec<usize>> = (0..cells)
        .map(|mut c| {
            let mut code = vec![0; m];
            for slot in code.iter_mut().rev() {
                *slot = c % d;
                c /= d;
            }
            code
        })
        .collect();
    for subset in (1u32..(1 << m)).filter(|s| (s.count_ones() as usize) <= order) {
        let members: Vec<usize> = (0..m).filter(|&i| subset & (1 << i) != 0).collect();
        // coefficients indexed by the non-reference levels of the members
        let n_coef = (d - 1).pow(members.len() as u32);
        let coef = (0..n_coef)
            .map(|_| random::gaussian(rng, 0.0, sd))
            .collect::<Result<Vec<_>>>()?;
        for (score, code) in scores.iter_mut().zip(&codes) {
            if members.iter().all(|&i| code[i] > 0) {
                let idx = members
                    .iter()
                    .fold(0, |acc, &i| acc * (d - 1) + code[i] - 1);
                *score += coef[idx];
            }
        }
    }
    let norm = crate::loglinear::log_sum_exp(&scores);
    Ok(BlockTable {
        vars: vars.to_vec(),
        levels: vec![d; m],
        table: scores.iter().map(|s| (s - norm).exp()).collect(),
    })
}

/// Mass `diag` on each cell `(a, ..., a)`, the remainder shared equally.
pub fn diagonal_block(vars: &[usize], d: usize, diag: f64) -> Result<BlockTable> {
    let m = vars.len();
    let cells = d.pow(m as u32);
    let off = cells - d;
    if off == 0 || diag * d as f64 >= 1.0 {
        return Err(MillsError::InvalidParameter(format!(
            "cannot put mass {diag} on each of {d} diagonal cells out of {cells}"
        )));
    }
    let rest = (1.0 - diag * d as f64) / off as f64;
    let stride: usize = (0..m).map(|i| d.pow(i as u32)).sum();
    let mut table = vec![rest; cells];
    for a in 0..d {
        table[a * stride] = diag;
    }
    Ok(BlockTable {
        vars: vars.to_vec(),
        levels: vec![d; m],
        table,
    })
}

fn sample_block(
    block: &BlockTable,
    codes: &mut [u16],
    p: usize,
    n: usize,
    rng: &mut RngHandle,
) -> Result<()> {
    let dist = WeightedIndex::new(&block.table)
        .map_err(|e| MillsError::Invariant(format!("block table: {e}")))?;
    for i in 0..n {
        let mut cell = dist.sample(rng);
        for (&j, &d) in block.vars.iter().zip(&block.levels).rev() {
            codes[i * p + j] = (cell % d + 1) as u16;
            cell /= d;
        }
    }
    Ok(())
}

fn independent_variables(
    spec: &ScenarioSpec,
    skip: &[usize],
    codes: &mut [u16],
    rng: &mut RngHandle,
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut laws = vec![None; spec.p];
    for (j, law) in laws.iter_mut().enumerate() {
        if skip.contains(&j) {
            continue;
        }
        let pi = random::dirichlet(rng, &vec![spec.dm_alpha; spec.d])?;
        let dist = WeightedIndex::new(&pi).map_err(|e| MillsError::Invariant(format!("{e}")))?;
        for i in 0..spec.n {
            codes[i * spec.p + j] = (dist.sample(rng) + 1) as u16;
        }
        *law = Some(pi);
    }
    Ok(laws)
}

/// `n` observations from a latent class model.
pub fn sample_latent_class(
    model: &LatentClassModel,
    levels: &[usize],
    n: usize,
    rng: &mut RngHandle,
) -> Result<CategoricalDataset> {
    model.validate(levels)?;
    let mut codes = Vec::with_capacity(n * levels.len());
    for _ in 0..n {
        codes.extend(model.sample_row(rng)?.1);
    }
    CategoricalDataset::new(levels.to_vec(), codes)
}

fn finish(spec: &ScenarioSpec, codes: Vec<u16>, truth: ScenarioTruth) -> Result<Scenario> {
    let data = CategoricalDataset::new(vec![spec.d; spec.p], codes)?
        .with_names((1..=spec.p).map(|j| format!("V{j}")).collect())?;
    Ok(Scenario { data, truth })
}

fn truth(
    spec: &ScenarioSpec,
    blocks: Vec<BlockTable>,
    independent: Vec<Option<Vec<f64>>>,
) -> ScenarioTruth {
    ScenarioTruth {
        spec: spec.clone(),
        levels: vec![spec.d; spec.p],
        blocks,
        independent,
        latent_class: None,
    }
}

pub fn gen_scenario1(spec: &ScenarioSpec, rng: &mut RngHandle) -> Result<Scenario> {
    spec.validate()?;
    let levels = vec![spec.d; spec.p];
    let model = LatentClassModel {
        nu: random::dirichlet(rng, &vec![1.0; spec.classes])?,
        psi: (0..spec.classes)
            .map(|_| {
                levels
                    .iter()
                    .map(|&d| random::dirichlet(rng, &vec![1.0; d]))
                    .collect()
            })
            .collect::<Result<_>>()?,
    };
    let data = sample_latent_class(&model, &levels, spec.n, rng)?;
    let mut t = truth(spec, Vec::new(), vec![None; spec.p]);
    t.latent_class = Some(model);
    finish(spec, data.codes().to_vec(), t)
}

pub fn gen_scenario2(spec: &ScenarioSpec, rng: &mut RngHandle) -> Result<Scenario> {
    spec.validate()?;
    let block = loglinear_block(&spec.block, spec.d, 2, spec.coef_sd, rng)?;
    let mut codes = vec![0u16; spec.n * spec.p];
    sample_block(&block, &mut codes, spec.p, spec.n, rng)?;
    let independent = independent_variables(spec, &spec.block, &mut codes, rng)?;
    finish(spec, codes, truth(spec, vec![block], independent))
}

pub fn gen_scenario3(spec: &ScenarioSpec, rng: &mut RngHandle) -> Result<Scenario> {
    spec.validate()?;
    let block = diagonal_block(&spec.block, spec.d, spec.diagonal_mass)?;
    let mut codes = vec![0u16; spec.n * spec.p];
    sample_block(&block, &mut codes, spec.p, spec.n, rng)?;
    let independent = independent_variables(spec, &spec.block, &mut codes, rng)?;
    finish(spec, codes, truth(spec, vec![block], independent))
}

pub fn gen_scenario4(spec: &ScenarioSpec, rng: &mut RngHandle) -> Result<Scenario> {
    spec.validate()?;
    let first = loglinear_block(&spec.block, spec.d, 2, spec.coef_sd, rng)?;
    let second = loglinear_block(&spec.second_block, spec.d, 3, spec.coef_sd, rng)?;
    let mut codes = vec![0u16; spec.n * spec.p];
    sample_block(&first, &mut codes, spec.p, spec.n, rng)?;
    sample_block(&second, &mut codes, spec.p, spec.n, rng)?;
    let covered: Vec<usize> = spec
        .block
        .iter()
        .chain(&spec.second_block)
        .copied()
        .collect();
    let independent = independent_variables(spec, &covered, &mut codes, rng)?;
    finish(spec, codes, truth(spec, vec![first, second], independent))
}

/// Dispatch on `spec.id` with the generator stream `(seed, 0)`.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    let mut rng = RngHandle::new(spec.seed, 0);
    match spec.id {
        1 => gen_scenario1(spec, &mut rng),
        2 => gen_scenario2(spec, &mut rng),
        3 => gen_scenario3(spec, &mut rng),
        4 => gen_scenario4(spec, &mut rng),
        other => Err(MillsError::InvalidParameter(format!(
            "unknown scenario {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_pair(block: &BlockTable, a: usize, b: usize) -> Vec<f64> {
        let d = block.levels[0];
        let m = block.vars.len();
        let mut out = vec![0.0; d * d];
        for (cell, &mass) in block.table.iter().enumerate() {
            let code: Vec<usize> = (0..m)
                .map(|i| cell / d.pow((m - 1 - i) as u32) % d)
                .collect();
            out[code[a] * d + code[b]] += mass;
        }
        out
    }

    #[test]
    fn seeds_are_deterministic() {
        for id in 1..=4 {
            let spec = ScenarioSpec::new(id, 50, 12, 3, 17);
            let a = generate(&spec).unwrap();
            let b = generate(&spec).unwrap();
            assert_eq!(a.data.codes(), b.data.codes());
            assert_eq!(a.truth, b.truth);
            let c = generate(&ScenarioSpec { seed: 18, ..spec }).unwrap();
            assert_ne!(a.data.codes(), c.data.codes());
        }
    }

    #[test]
    fn degenerate_latent_class_gives_all_ones() {
        let levels = vec![4; 3];
        let model = LatentClassModel {
            nu: vec![0.5, 0.5],
            psi: vec![vec![vec![1.0, 0.0, 0.0, 0.0]; 3]; 2],
        };
        let data = sample_latent_class(&model, &levels, 200, &mut RngHandle::new(1, 0)).unwrap();
        assert!(data.codes().iter().all(|&c| c == 1));
    }

    #[test]
    fn scenario1_margins_converge() {
        let spec = ScenarioSpec::new(1, 50_000, 4, 4, 5);
        let s = generate(&spec).unwrap();
        for j in 0..4 {
            let truth = s.truth.univariate(j).unwrap();
            let mut freq = [0.0; 4];
            for row in s.data.rows() {
                freq[row[j] as usize - 1] += 1.0 / 50_000.0;
            }
            let tv: f64 = 0.5
                * freq
                    .iter()
                    .zip(&truth)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            assert!(tv < 0.01, "variable {j}: tv {tv}");
        }
    }

    #[test]
    fn zero_coefficients_give_uniform_blocks() {
        let mut rng = RngHandle::new(0, 0);
        let b = loglinear_block(&[0, 1, 2, 3, 4], 4, 2, 0.0, &mut rng).unwrap();
        assert!(b.table.iter().all(|&v| (v - 1.0 / 1024.0).abs() < 1e-15));
        let b = loglinear_block(&[5, 6, 7, 8, 9, 10], 4, 3, 0.0, &mut rng).unwrap();
        assert!(b.table.iter().all(|&v| (v - 1.0 / 4096.0).abs() < 1e-15));
    }

    #[test]
    fn loglinear_blocks_normalise_and_marginalise() {
        let mut rng = RngHandle::new(3, 0);
        for (m, order) in [(5, 2), (6, 3)] {
            let vars: Vec<usize> = (0..m).collect();
            let b = loglinear_block(&vars, 4, order, 0.1, &mut rng).unwrap();
            assert!((b.table.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b.table.iter().all(|&v| v > 0.0));
            for a in 0..m {
                for c in a + 1..m {
                    let got = b.marginal(&[a, c]).unwrap();
                    let want = brute_pair(&b, a, c);
                    for (x, y) in got.iter().zip(&want) {
                        assert!((x - y).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn loglinear_block_order_controls_interactions() {
        // with order 1 the table factorises into its margins
        let b = loglinear_block(&[0, 1, 2], 3, 1, 1.0, &mut RngHandle::new(8, 0)).unwrap();
        let m: Vec<Vec<f64>> = (0..3).map(|v| b.marginal(&[v]).unwrap()).collect();
        for (cell, &mass) in b.table.iter().enumerate() {
            let prod = m[0][cell / 9] * m[1][cell / 3 % 3] * m[2][cell % 3];
            assert!((mass - prod).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_block_masses() {
        let b = diagonal_block(&[0, 1, 2, 3, 4], 4, 0.1).unwrap();
        let diag: Vec<usize> = (0..4).map(|a| a * (1 + 4 + 16 + 64 + 256)).collect();
        let diag_mass: f64 = diag.iter().map(|&c| b.table[c]).sum();
        assert!((diag_mass - 0.4).abs() < 1e-15);
        for (c, &v) in b.table.iter().enumerate() {
            if !diag.contains(&c) {
                assert_eq!(v, 0.6 / 1020.0);
            }
        }
        assert!((b.table.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scenario3_diagonal_frequency() {
        let spec = ScenarioSpec::new(3, 100_000, 6, 4, 11);
        let s = generate(&spec).unwrap();
        let hits = s
            .data
            .rows()
            .filter(|r| r[..5].iter().all(|&c| c == 1))
            .count() as f64;
        let se = (0.1f64 * 0.9 / 100_000.0).sqrt();
        assert!(
            (hits / 100_000.0 - 0.1).abs() < 3.0 * se,
            "{}",
            hits / 100_000.0
        );
    }

    #[test]
    fn truth_margins_are_distributions() {
        for id in 1..=4 {
            let s = generate(&ScenarioSpec::new(id, 20, 12, 3, 2)).unwrap();
            let margins = s.truth.pair_margins().unwrap();
            assert_eq!(margins.len(), 66);
            for (_, t) in margins {
                assert!(t.iter().all(|&v| v >= 0.0));
                assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_pairs_use_joint_law_and_others_factorise() {
        let s = generate(&ScenarioSpec::new(3, 10, 8, 3, 4)).unwrap();
        let inside = s.truth.pair_margin(PairIndex::new(0, 1).unwrap()).unwrap();
        assert!((inside[0] - s.truth.blocks[0].marginal(&[0, 1]).unwrap()[0]).abs() < 1e-15);
        let across = s.truth.pair_margin(PairIndex::new(0, 6).unwrap()).unwrap();
        let (m0, m6) = (
            s.truth.univariate(0).unwrap(),
            s.truth.univariate(6).unwrap(),
        );
        assert!((across[4] - m0[1] * m6[1]).abs() < 1e-15);
    }

    #[test]
    fn literal_overlap_lets_second_block_own_shared_variable() {
        let spec = ScenarioSpec::new(4, 30, 15, 4, 6).with_literal_overlap();
        assert_eq!(spec.second_block, vec![4, 5, 6, 7, 8, 9]);
        let s = generate(&spec).unwrap();
        assert_eq!(s.truth.owner(4), Some(1));
        let m = s.truth.pair_margin(PairIndex::new(4, 5).unwrap()).unwrap();
        let want = s.truth.blocks[1].marginal(&[4, 5]).unwrap();
        assert_eq!(m, want);
        let default = ScenarioSpec::new(4, 30, 15, 4, 6);
        assert_eq!(default.second_block, vec![5, 6, 7, 8, 9]);
    }
}
