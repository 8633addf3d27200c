use mills_core::analytics::{bivariate_estimate, cramer_v, summarize, MillsTables};
use mills_core::gibbs::{run_chain, Draw, Hyperparams, SamplerConfig};
use mills_core::loglinear::{cell_log_probs, PairLayout};
use mills_core::metrics::eval_metrics;
use mills_core::random::{self, RngHandle};
use mills_core::scenario::{generate, ScenarioSpec};
use mills_core::table::{marginal_counts, pair_set, CategoricalDataset, CornerDesign};
use proptest::prelude::*;

fn rows_from_counts(counts: &[(u16, u16, usize)]) -> Vec<Vec<u16>> {
    counts
        .iter()
        .flat_map(|&(a, b, reps)| std::iter::repeat_n(vec![a, b], reps))
        .collect()
}

fn config(iterations: usize, burn_in: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        iterations,
        burn_in,
        seed,
        ..Default::default()
    }
}

/// Posterior mean cell probabilities of the saturated 2x2 model with
/// independent N(0, sigma2) coefficients, by quadrature over the three
/// identifiable coefficients (the intercept cancels).
fn grid_posterior_mean(counts: [f64; 4], sigma2: f64) -> [f64; 4] {
    let (lo, step, m) = (-7.0, 0.07, 200);
    let n: f64 = counts.iter().sum();
    let mut acc = [0.0; 4];
    let mut norm = 0.0;
    let mut log_max = f64::NEG_INFINITY;
    // two passes: the first finds the largest log weight for stability
    for pass in 0..2 {
        for i in 0..m {
            let alpha = lo + step * i as f64;
            for j in 0..m {
                let beta = lo + step * j as f64;
                for k in 0..m {
                    let gamma = lo + step * k as f64;
                    let s = [0.0, beta, alpha, alpha + beta + gamma];
                    let kappa = s.iter().map(|v| v.exp()).sum::<f64>().ln();
                    let loglik: f64 =
                        counts.iter().zip(&s).map(|(y, v)| y * v).sum::<f64>() - n * kappa;
                    let logw =
                        loglik - (alpha * alpha + beta * beta + gamma * gamma) / (2.0 * sigma2);
                    if pass == 0 {
                        log_max = log_max.max(logw);
                        continue;
                    }
                    let w = (logw - log_max).exp();
                    norm += w;
                    for (a, v) in acc.iter_mut().zip(&s) {
                        *a += w * (v - kappa).exp();
                    }
                }
            }
        }
    }
    acc.map(|a| a / norm)
}

#[test]
fn single_pair_chain_matches_grid_oracle() {
    let counts = [30.0, 10.0, 5.0, 5.0];
    let rows = rows_from_counts(&[(1, 1, 30), (1, 2, 10), (2, 1, 5), (2, 2, 5)]);
    let data = CategoricalDataset::from_rows(vec![2, 2], &rows).unwrap();
    let hyper = Hyperparams {
        components: 1,
        sigma2: 3.0,
        fixed_weight: Some(1.0),
        ..Default::default()
    };
    let fit = run_chain(&data, &hyper, &config(20_000, 2_000, 17)).unwrap();
    let est = &summarize(&MillsTables::new(&fit).unwrap(), None).unwrap()[0]
        .table
        .mean;
    let oracle = grid_posterior_mean(counts, 3.0);
    for (c, (e, o)) in est.iter().zip(&oracle).enumerate() {
        assert!((e - o).abs() < 0.03, "cell {c}: chain {e} vs grid {o}");
    }
}

#[test]
fn unit_weights_and_diffuse_prior_recover_empirical_tables() {
    let scenario = generate(&ScenarioSpec::new(1, 500, 3, 3, 8)).unwrap();
    let data = &scenario.data;
    let hyper = Hyperparams {
        components: 1,
        sigma2: 100.0,
        fixed_weight: Some(1.0),
        ..Default::default()
    };
    let fit = run_chain(data, &hyper, &config(3_000, 1_000, 2)).unwrap();
    for s in summarize(&MillsTables::new(&fit).unwrap(), None).unwrap() {
        let counts = marginal_counts(data, s.table.pair, None).unwrap().counts;
        let tv: f64 = s
            .table
            .mean
            .iter()
            .zip(&counts)
            .map(|(e, &c)| (e - c as f64 / data.n() as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "pair {}: total variation {tv}", s.table.pair);
    }
}

#[test]
fn prior_only_chain_keeps_weights_and_indicators_in_range() {
    let data = CategoricalDataset::new(vec![2, 3, 2], Vec::new()).unwrap();
    let fit = run_chain(&data, &Hyperparams::default(), &config(300, 100, 1)).unwrap();
    assert_eq!(fit.diagnostics.boundedness_violations, 0);
    for d in &fit.draws {
        assert!(d.weights.iter().flatten().all(|&w| w >= 0.0));
        assert!(d.gamma0.iter().all(|&g| (0.0..=1.0).contains(&g)));
    }
}

#[test]
fn relabelled_components_give_identical_tables() {
    let scenario = generate(&ScenarioSpec::new(3, 120, 4, 3, 5)).unwrap();
    let hyper = Hyperparams {
        components: 4,
        ..Default::default()
    };
    let fit = run_chain(&scenario.data, &hyper, &config(60, 40, 3)).unwrap();
    let layout = PairLayout::new(&fit.levels).unwrap();
    for draw in &fit.draws {
        let mut perm = draw.clone();
        perm.nu.rotate_left(1);
        perm.theta.rotate_left(1);
        perm.nu.swap(0, 2);
        perm.theta.swap(0, 2);
        for (e, design) in layout.designs().iter().enumerate() {
            assert_eq!(
                bivariate_estimate(draw, e, design).unwrap(),
                bivariate_estimate(&perm, e, design).unwrap()
            );
        }
    }
}

fn random_draw(levels: &[usize], components: usize, seed: u64) -> Draw {
    let mut rng = RngHandle::new(seed, 3);
    let pairs = pair_set(levels.len()).unwrap();
    let theta = (0..components)
        .map(|_| {
            pairs
                .iter()
                .map(|pr| {
                    (0..levels[pr.j] * levels[pr.k])
                        .map(|_| random::gaussian(&mut rng, 0.0, 2.0).unwrap())
                        .collect()
                })
                .collect()
        })
        .collect();
    Draw {
        nu: random::dirichlet(&mut rng, &vec![0.7; components]).unwrap(),
        theta,
        weights: vec![vec![1.0; pairs.len()]; components],
        indicators: vec![vec![true; pairs.len()]; components],
        gamma0: vec![0.5; components],
        z: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_draw_tables_lie_on_simplex(levels in proptest::collection::vec(2usize..=5, 2..5), h in 1usize..6, seed in any::<u64>()) {
        let draw = random_draw(&levels, h, seed);
        let layout = PairLayout::new(&levels).unwrap();
        for (e, design) in layout.designs().iter().enumerate() {
            let t = bivariate_estimate(&draw, e, design).unwrap();
            prop_assert!(t.iter().all(|&v| v >= 0.0));
            prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn component_permutation_is_exact(h in 2usize..7, seed in any::<u64>(), shift in 1usize..6) {
        let levels = [3, 2, 4];
        let draw = random_draw(&levels, h, seed);
        let mut perm = draw.clone();
        perm.nu.rotate_right(shift % h);
        perm.theta.rotate_right(shift % h);
        let layout = PairLayout::new(&levels).unwrap();
        for (e, design) in layout.designs().iter().enumerate() {
            prop_assert_eq!(bivariate_estimate(&draw, e, design).unwrap(), bivariate_estimate(&perm, e, design).unwrap());
        }
    }

    #[test]
    fn cramer_v_ignores_level_relabelling(
        d1 in 2usize..=5,
        d2 in 2usize..=5,
        raw in proptest::collection::vec(0.01f64..1.0, 25),
        rs in any::<u64>(),
    ) {
        let cells = &raw[..d1 * d2];
        let total: f64 = cells.iter().sum();
        let table: Vec<f64> = cells.iter().map(|v| v / total).collect();
        let rows: Vec<usize> = (0..d1).map(|a| (a + rs as usize) % d1).collect();
        let cols: Vec<usize> = (0..d2).rev().collect();
        let mut permuted = vec![0.0; d1 * d2];
        for a in 0..d1 {
            for b in 0..d2 {
                permuted[rows[a] * d2 + cols[b]] = table[a * d2 + b];
            }
        }
        let v = cramer_v(&table, d1, d2).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert_eq!(v, cramer_v(&permuted, d1, d2).unwrap());
    }

    #[test]
    fn metrics_nonnegative_and_vanish_on_equality(
        d1 in 2usize..=4,
        d2 in 2usize..=4,
        a in proptest::collection::vec(0.01f64..1.0, 16),
        b in proptest::collection::vec(0.01f64..1.0, 16),
    ) {
        let norm = |v: &[f64]| { let t: f64 = v.iter().sum(); v.iter().map(|x| x / t).collect::<Vec<_>>() };
        let (p, q) = (norm(&a[..d1 * d2]), norm(&b[..d1 * d2]));
        let m = eval_metrics(&p, &q, d1, d2, 100).unwrap();
        prop_assert!(m.kl >= 0.0 && m.wasserstein >= -1e-12 && m.pearson >= 0.0);
        let same = eval_metrics(&p, &p, d1, d2, 100).unwrap();
        prop_assert_eq!((same.kl, same.pearson), (0.0, 0.0));
        prop_assert!(same.wasserstein.abs() < 1e-12);
    }

    #[test]
    fn cell_probabilities_sum_to_one(d1 in 2usize..=5, d2 in 2usize..=5, theta in proptest::collection::vec(-20.0f64..20.0, 25)) {
        let design = CornerDesign::new(d1, d2).unwrap();
        let lp = cell_log_probs(&theta[..d1 * d2], &design).unwrap();
        prop_assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(lp.iter().all(|&v| v <= 0.0));
    }
}
