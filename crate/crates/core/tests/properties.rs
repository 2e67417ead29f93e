use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spectree::panel::{full_grid_periodogram, CovariateKind};
use spectree::sampler::{
    backfit_sweep, birth_log_ratio_terms, death_log_ratio_terms, full_fit, merge_scale, split_scale, BirthTerms,
    DeathTerms, Model, MoveKind, MoveProbs, Residuals, SamplerConfig, SamplerState,
};
use spectree::spectrum::{coeff_log_acceptance, find_mode, neg_log_posterior, whittle_loglik, CosineBasis, NodeData, NodeParams};
use spectree::tree::{
    enumerate_cutpoints, CovariateSpace, Leaf, NodeKind, ProportionPrior, SplitProportions, Tree, TreePriorConfig,
};
use spectree::RowMatrix;

fn params() -> NodeParams {
    NodeParams::new(0.0, vec![0.0; 7], 1.0, 1.0).unwrap()
}

fn leaf(subjects: Vec<usize>) -> Leaf {
    Leaf {
        params: params(),
        log_spectrum: Vec::new(),
        subjects,
    }
}

fn random_space(rng: &mut ChaCha8Rng, n: usize) -> CovariateSpace {
    let kinds = vec![
        CovariateKind::Continuous,
        CovariateKind::Categorical {
            levels: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        },
        CovariateKind::Discrete,
    ];
    let rows = (0..n)
        .map(|_| vec![rng.random::<f64>(), rng.random_range(0..4) as f64, rng.random_range(0..6) as f64])
        .collect();
    CovariateSpace::new(kinds, rows).unwrap()
}

/// Grows `n_splits` random admissible splits.
fn random_tree(rng: &mut ChaCha8Rng, space: &CovariateSpace, config: &TreePriorConfig, n_splits: usize) -> Tree {
    let mut tree = Tree::stump(space, params(), Vec::new());
    for _ in 0..n_splits {
        let leaves = tree.leaves();
        let id = leaves[rng.random_range(0..leaves.len())];
        let node = tree.node(id);
        let subjects = tree.leaf(id).subjects.clone();
        let rules: Vec<_> = (0..space.n_covariates())
            .flat_map(|p| enumerate_cutpoints(p, space, config, &node.region, &subjects))
            .collect();
        if rules.is_empty() {
            continue;
        }
        let rule = rules[rng.random_range(0..rules.len())].clone();
        let (l, r) = Tree::partition(space, &rule, &subjects);
        tree.split_leaf(id, rule, leaf(l), leaf(r));
    }
    tree
}

/// Leaf whose root path accepts `omega`, found bottom-up from each leaf.
fn path_oracle(tree: &Tree, omega: &[f64]) -> Vec<usize> {
    tree.leaves()
        .into_iter()
        .filter(|&id| {
            let mut child = id;
            while let Some(parent) = tree.node(child).parent {
                let NodeKind::Internal { rule, left, .. } = &tree.node(parent).kind else {
                    unreachable!()
                };
                if rule.goes_left(omega) != (*left == child) {
                    return false;
                }
                child = parent;
            }
            true
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn split_then_merge_recovers_scale(x in 1e-4f64..1e4, u in 0.01f64..0.99) {
        let (l, r) = split_scale(x, u);
        let (x2, u2) = merge_scale(l, r);
        prop_assert!((x2 - x).abs() <= 1e-12 * x);
        prop_assert!((u2 - u).abs() <= 1e-12);
    }

    #[test]
    fn birth_and_matched_death_ratios_cancel(
        depth in 0usize..6,
        log_p_rule in -12.0f64..0.0,
        ls in any::<bool>(),
        rs in any::<bool>(),
        n_leaves in 1usize..40,
        n_prunable_after in 1usize..20,
        tau2 in 1e-3f64..1e3,
        u_tau in 0.01f64..0.99,
        a in 1e-3f64..1e3,
        u_a in 0.01f64..0.99,
        gamma in 0.5f64..0.99,
        theta in 0.5f64..3.0,
        pb in 0.1f64..0.45,
    ) {
        let prior = TreePriorConfig { gamma, theta, ..TreePriorConfig::default() };
        let moves = MoveProbs { birth: pb, death: pb, change: 1.0 - 2.0 * pb };
        let birth = birth_log_ratio_terms(
            &BirthTerms { depth, log_p_rule, left_splittable: ls, right_splittable: rs, n_leaves, n_prunable_after, tau2, u_tau, a, u_a },
            &prior,
            &moves,
        );
        let (tl, tr) = split_scale(tau2, u_tau);
        let (al, ar) = split_scale(a, u_a);
        let death = death_log_ratio_terms(
            &DeathTerms {
                depth, log_p_rule, left_splittable: ls, right_splittable: rs,
                n_leaves: n_leaves + 1, n_prunable: n_prunable_after,
                tau2_left: tl, tau2_right: tr, a_left: al, a_right: ar,
            },
            &prior,
            &moves,
        );
        prop_assert!(((birth + death).exp() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn parseval_holds(x in prop::collection::vec(-1e3f64..1e3, 2..300)) {
        let total: f64 = full_grid_periodogram(&x).iter().sum();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        prop_assert!((total - energy).abs() <= 1e-8 * energy.max(1e-300));
    }

    #[test]
    fn basis_is_even_in_frequency(nu in 0.001f64..0.999) {
        let mut freqs = vec![nu, 1.0 - nu];
        freqs.extend((1..=8).map(|k| k as f64 / 20.0));
        let b = CosineBasis::new(&freqs, 7, 100.0).unwrap();
        for s in 0..7 {
            prop_assert!((b.row(0)[s] - b.row(1)[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn whittle_ignores_series_order(seed in any::<u64>(), nb in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 15;
        let rows: Vec<Vec<f64>> = (0..nb).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let log_f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let fwd: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let rev: Vec<&[f64]> = rows.iter().rev().map(|r| r.as_slice()).collect();
        let a = whittle_loglik(&fwd, &log_f).unwrap();
        let b = whittle_loglik(&rev, &log_f).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn objective_is_strictly_convex(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 25;
        let freqs: Vec<f64> = (1..=n).map(|k| k as f64 / 52.0).collect();
        let basis = CosineBasis::new(&freqs, 7, 100.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let block: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let data = NodeData::from_block(&block, n);
        let theta: Vec<f64> = (0..8).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let tau2 = rng.random_range(0.01..50.0);
        let h = neg_log_posterior(&theta, &data, tau2, &basis).hessian;
        prop_assert!(h.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn mh_ratio_forward_times_backward_is_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20;
        let freqs: Vec<f64> = (1..=n).map(|k| k as f64 / 42.0).collect();
        let basis = CosineBasis::new(&freqs, 7, 100.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let block: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let data = NodeData::from_block(&block, n);
        let mode = find_mode(&data, 1.0, &basis, &[0.0; 8]).unwrap();
        let a = mode.sample(&mut rng);
        let b = mode.sample(&mut rng);
        let fwd = coeff_log_acceptance(&a, &b, &data, 1.0, &basis, &mode);
        let bwd = coeff_log_acceptance(&b, &a, &data, 1.0, &basis, &mode);
        prop_assert!((fwd + bwd).abs() < 1e-9 * fwd.abs().max(1.0));
        prop_assert_eq!(coeff_log_acceptance(&a, &a, &data, 1.0, &basis, &mode), 0.0);
    }

    #[test]
    fn assignment_agrees_with_path_oracle(seed in any::<u64>(), splits in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = TreePriorConfig { min_node_size: 2, grid_size: 20, ..TreePriorConfig::default() };
        let space = random_space(&mut rng, 60);
        let tree = random_tree(&mut rng, &space, &config, splits);
        prop_assert!(tree.check(&space).is_ok());
        let mut seen = vec![false; space.n_subjects()];
        for id in tree.leaves() {
            for &l in &tree.leaf(id).subjects {
                prop_assert!(!seen[l]);
                seen[l] = true;
                prop_assert_eq!(tree.assign(space.row(l)), id);
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        for _ in 0..100 {
            let omega = vec![rng.random::<f64>(), rng.random_range(0..4) as f64, rng.random_range(0..6) as f64];
            let hits = path_oracle(&tree, &omega);
            prop_assert_eq!(hits.len(), 1);
            prop_assert_eq!(tree.assign(&omega), hits[0]);
            prop_assert_eq!(tree.to_record().assign(&omega), hits[0]);
        }
    }
}

fn toy_model(seed: u64, l: usize, n: usize, config: SamplerConfig) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = random_space(&mut rng, l);
    let freqs: Vec<f64> = (1..=n).map(|k| k as f64 / (2 * n + 2) as f64).collect();
    let mut log_pgram = RowMatrix::zeros(l, n);
    for s in 0..l {
        let shift = if space.row(s)[0] < 0.5 { 1.5 } else { -0.5 };
        for k in 0..n {
            let e: f64 = -(1.0 - rng.random::<f64>()).ln();
            log_pgram.set(s, k, shift + (2.0 * std::f64::consts::PI * freqs[k]).cos() + e.ln());
        }
    }
    Model::from_parts(space, &freqs, log_pgram, config).unwrap()
}

fn small_config(n_trees: usize) -> SamplerConfig {
    SamplerConfig {
        n_trees,
        n_iter: 100,
        burn_in: 10,
        check_fitted: true,
        tree: TreePriorConfig {
            min_node_size: 3,
            grid_size: 30,
            ..TreePriorConfig::default()
        },
        ..SamplerConfig::default()
    }
}

#[test]
fn sweeps_keep_structure_fit_and_counters_consistent() {
    for (seed, prior) in [(1, ProportionPrior::Uniform), (2, ProportionPrior::Dirichlet)] {
        let config = SamplerConfig {
            split_prior: prior,
            dirichlet_start: Some(0),
            ..small_config(3)
        };
        let model = toy_model(seed, 40, 12, config);
        let mut state = SamplerState::initial(&model, ChaCha8Rng::seed_from_u64(seed));
        let (b, d) = (MoveKind::Birth.index(), MoveKind::Death.index());
        for _ in 0..150 {
            let before = state.total_internal() as i64;
            let (ab, ad) = (state.counters.accepted[b] as i64, state.counters.accepted[d] as i64);
            backfit_sweep(&mut state, &model, None).unwrap();
            let births = state.counters.accepted[b] as i64 - ab;
            let deaths = state.counters.accepted[d] as i64 - ad;
            assert_eq!(state.total_internal() as i64 - before, births - deaths);
            for tree in &state.forest {
                tree.check(&model.space).unwrap();
            }
            let scratch = full_fit(&state.forest, 40, 12);
            for (a, f) in scratch.as_slice().iter().zip(state.fitted.as_slice()) {
                assert!((a - f).abs() < 1e-10);
            }
        }
        assert!(state.counters.accepted[b] > 0, "no BIRTH accepted");
    }
}

#[test]
fn residual_statistics_agree_between_routes() {
    let model = toy_model(3, 40, 12, small_config(3));
    let mut state = SamplerState::initial(&model, ChaCha8Rng::seed_from_u64(3));
    for _ in 0..40 {
        backfit_sweep(&mut state, &model, None).unwrap();
    }
    let (l, n) = (40, 12);
    for j in 0..state.forest.len() {
        let direct = Residuals::direct(&state, j, &model.log_pgram);
        // exp(log I - fitted) times exp(own tree), cell by cell
        let mut product = RowMatrix::zeros(l, n);
        let own = full_fit(std::slice::from_ref(&state.forest[j]), l, n);
        for s in 0..l {
            for k in 0..n {
                let v = (model.log_pgram.get(s, k) - state.fitted.get(s, k)).exp() * own.get(s, k).exp();
                product.set(s, k, v);
            }
        }
        let via_product = Residuals {
            log: direct.log.clone(),
            exp: product,
        };
        for id in state.forest[j].leaves() {
            let subjects = &state.forest[j].leaf(id).subjects;
            let a = NodeData::from_subjects(&direct.log, subjects);
            let b = via_product.node_data(subjects);
            assert_eq!(a.n_series(), b.n_series());
            for (x, y) in a.log_sum_exp().iter().zip(b.log_sum_exp()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }
}

#[test]
fn change_only_chain_keeps_leaf_count() {
    let model = toy_model(4, 30, 10, small_config(1));
    let mut state = SamplerState::initial(&model, ChaCha8Rng::seed_from_u64(4));
    let mut grown = false;
    for _ in 0..200 {
        backfit_sweep(&mut state, &model, Some(MoveKind::Birth)).unwrap();
        if state.forest[0].n_leaves() >= 2 {
            grown = true;
            break;
        }
    }
    assert!(grown);
    let leaves = state.forest[0].n_leaves();
    for _ in 0..50 {
        backfit_sweep(&mut state, &model, Some(MoveKind::Change)).unwrap();
        assert_eq!(state.forest[0].n_leaves(), leaves);
        state.forest[0].check(&model.space).unwrap();
    }
}

/// Every tree reachable from the stump, each leaf either kept or split by one
/// of its admissible rules.
fn all_trees(space: &CovariateSpace, config: &TreePriorConfig) -> Vec<Tree> {
    fn expand(tree: Tree, open: Vec<usize>, space: &CovariateSpace, config: &TreePriorConfig, out: &mut Vec<Tree>) {
        let Some((&id, rest)) = open.split_first() else {
            out.push(tree);
            return;
        };
        expand(tree.clone(), rest.to_vec(), space, config, out);
        let region = tree.node(id).region.clone();
        let subjects = tree.leaf(id).subjects.clone();
        for p in 0..space.n_covariates() {
            for rule in enumerate_cutpoints(p, space, config, &region, &subjects) {
                let mut t = tree.clone();
                let (l, r) = Tree::partition(space, &rule, &subjects);
                let (li, ri) = t.split_leaf(id, rule, leaf(l), leaf(r));
                let mut next = rest.to_vec();
                next.extend([li, ri]);
                expand(t, next, space, config, out);
            }
        }
    }
    let mut out = Vec::new();
    expand(Tree::stump(space, params(), Vec::new()), vec![Tree::ROOT], space, config, &mut out);
    out
}

#[test]
fn tree_prior_sums_to_one_over_enumerable_trees() {
    let kinds = vec![
        CovariateKind::Discrete,
        CovariateKind::Categorical {
            levels: vec!["x".into(), "y".into(), "z".into()],
        },
    ];
    let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 0.0], vec![3.0, 1.0]];
    let space = CovariateSpace::new(kinds, rows).unwrap();
    let config = TreePriorConfig {
        min_node_size: 1,
        grid_size: 3,
        ..TreePriorConfig::default()
    };
    let trees = all_trees(&space, &config);
    assert!(trees.len() > 50, "only {} trees", trees.len());
    assert!(trees.iter().any(|t| t.internals().len() >= 3));
    for props in [
        SplitProportions::uniform(2, ProportionPrior::Uniform, 1.0),
        SplitProportions::from_weights(&[0.8, 0.2], ProportionPrior::Dirichlet, 1.0).unwrap(),
    ] {
        let total: f64 = trees.iter().map(|t| t.log_prior(&space, &props, &config).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "sum of tree priors {total}");
    }
}
