use kobt::boost::{
    cross_validate, find_best_split, fit_boosted, fit_tree, BoostParams, Booster, BoostedModel, TreeNode,
};
use kobt::data::{DataMatrix, Dataset, Task};
use kobt::importance::{
    exact_shapley_oracle, saabas_values, structural_importance, tree_shap_values, Statistic,
};
use kobt::RngStream;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

fn random_matrix(n: usize, p: usize, seed: u64, discrete: bool) -> DataMatrix {
    let mut rng = RngStream::new(seed, 99).rng();
    let cols = (0..p)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if discrete {
                        rng.gen_range(0..5) as f64
                    } else {
                        StandardNormal.sample(&mut rng)
                    }
                })
                .collect()
        })
        .collect();
    DataMatrix::from_columns(cols, names(p)).unwrap()
}

fn soft(g: f64, a: f64) -> f64 {
    (g.abs() - a).max(0.0) * g.signum()
}

/// Every (feature, midpoint) pair evaluated from scratch.
fn brute_force_split(
    x: &DataMatrix,
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    prm: &BoostParams,
) -> Option<(usize, f64, f64)> {
    let score = |g: f64, h: f64| {
        if h + prm.lambda <= 0.0 {
            0.0
        } else {
            soft(g, prm.alpha).powi(2) / (h + prm.lambda)
        }
    };
    let g: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h: f64 = rows.iter().map(|&r| hess[r]).sum();
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x.p() {
        let mut vals: Vec<f64> = rows.iter().map(|&r| x.get(r, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let left: Vec<usize> = rows.iter().copied().filter(|&r| x.get(r, f) < t).collect();
            let gl: f64 = left.iter().map(|&r| grad[r]).sum();
            let hl: f64 = left.iter().map(|&r| hess[r]).sum();
            if hl < prm.min_child_weight || h - hl < prm.min_child_weight {
                continue;
            }
            let gain = 0.5 * (score(gl, hl) + score(g - gl, h - hl) - score(g, h)) - prm.gamma;
            if gain > 0.0 && best.is_none_or(|b| gain > b.2 + 1e-12 * b.2.abs()) {
                best = Some((f, t, gain));
            }
        }
    }
    best
}

#[test]
fn split_finder_matches_exhaustive_oracle() {
    for seed in 0..200u64 {
        let mut rng = RngStream::new(seed, 1).rng();
        let n = rng.gen_range(2..=50);
        let p = rng.gen_range(1..=8);
        let x = random_matrix(n.max(2), p, seed, seed % 3 == 0);
        let grad: Vec<f64> = (0..x.n()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let hess: Vec<f64> = (0..x.n()).map(|_| rng.gen_range(0.1..2.0)).collect();
        let prm = BoostParams {
            lambda: rng.gen_range(0.0..3.0),
            alpha: rng.gen_range(0.0..0.5),
            gamma: rng.gen_range(0.0..0.2),
            min_child_weight: rng.gen_range(0.0..3.0),
            ..BoostParams::default()
        };
        let rows: Vec<usize> = (0..x.n()).filter(|_| rng.gen_bool(0.8)).collect();
        if rows.len() < 2 {
            continue;
        }
        let features: Vec<usize> = (0..p).collect();
        let got = find_best_split(&x, &rows, &features, &grad, &hess, &prm);
        let want = brute_force_split(&x, &rows, &grad, &hess, &prm);
        match (got, want) {
            (None, None) => {}
            (Some(s), Some((f, t, g))) => {
                assert_eq!((s.feature, s.threshold), (f, t), "seed {seed} gains {} {g}", s.gain);
                assert!((s.gain - g).abs() <= 1e-9 * g.abs().max(1.0), "seed {seed}");
            }
            other => panic!("seed {seed}: {other:?}"),
        }
    }
}

fn regression(x: DataMatrix, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, 5).rng();
    let y = (0..x.n())
        .map(|i| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.get(i, 0) * 1.5 - (x.get(i, x.p() - 1) > 0.3) as u8 as f64 + 0.5 * e
        })
        .collect();
    Dataset::new(x, y, None, Task::Regression).unwrap()
}

fn small_model(seed: u64) -> (BoostedModel, DataMatrix) {
    let mut rng = RngStream::new(seed, 2).rng();
    let p = rng.gen_range(2..=8);
    let n = rng.gen_range(20..=60);
    let d = regression(random_matrix(n, p, seed, seed % 4 == 0), seed);
    let params = BoostParams {
        max_depth: rng.gen_range(1..=3),
        max_trees: rng.gen_range(1..=8),
        eta: 0.5,
        lambda: rng.gen_range(0.0..2.0),
        min_child_weight: rng.gen_range(0.0..4.0),
        subsample_cols: if seed % 2 == 0 { 1.0 } else { 0.6 },
        booster: if seed % 3 == 0 { Booster::Dart } else { Booster::Gbrt },
        dart_dropout: 0.3,
        ..BoostParams::default()
    };
    let model = fit_boosted(&d, &params, RngStream::new(seed, 3), None).unwrap();
    (model, d.x)
}

#[test]
fn tree_shap_matches_exact_enumeration() {
    for seed in 0..50u64 {
        let (model, x) = small_model(seed);
        let shap = tree_shap_values(&model, &x).unwrap();
        for i in 0..x.n().min(10) {
            let oracle = exact_shapley_oracle(&model, &x.row(i)).unwrap();
            for (j, o) in oracle.iter().enumerate() {
                assert!((shap.get(i, j) - o).abs() < 1e-10, "seed {seed} row {i} feature {j}");
            }
        }
    }
}

#[test]
fn local_accuracy_for_both_attributions() {
    for seed in 0..100u64 {
        let (model, x) = small_model(1000 + seed);
        let margin = model.predict_margin(&x, None).unwrap();
        for attr in [tree_shap_values(&model, &x).unwrap(), saabas_values(&model, &x).unwrap()] {
            for (i, m) in margin.iter().enumerate() {
                let total = attr.base_value + attr.row(i).iter().sum::<f64>();
                assert!((total - m).abs() < 1e-8, "seed {seed} row {i}");
            }
        }
    }
}

#[test]
fn shap_is_additive_across_trees() {
    let (model, x) = small_model(7);
    let whole = tree_shap_values(&model, &x).unwrap();
    let mut summed = vec![0.0; whole.values.len()];
    for b in 0..model.trees.len() {
        let single = BoostedModel {
            trees: vec![model.trees[b].clone()],
            tree_weights: vec![model.tree_weights[b]],
            best_iteration: 1,
            ..model.clone()
        };
        let part = tree_shap_values(&single, &x).unwrap();
        summed.iter_mut().zip(&part.values).for_each(|(s, v)| *s += v);
    }
    for (a, b) in whole.values.iter().zip(&summed) {
        assert!((a - b).abs() < 1e-10);
    }
}

fn features_used(node: &TreeNode, used: &mut Vec<bool>) {
    if let TreeNode::Split { feature, left, right, .. } = node {
        used[*feature] = true;
        features_used(left, used);
        features_used(right, used);
    }
}

#[test]
fn unused_features_score_exactly_zero() {
    for seed in 0..20u64 {
        let (model, x) = small_model(2000 + seed);
        let mut used = vec![false; x.p()];
        model.trees.iter().for_each(|t| features_used(&t.root, &mut used));
        let shap = tree_shap_values(&model, &x).unwrap();
        let saabas = saabas_values(&model, &x).unwrap();
        for stat in [Statistic::Gain, Statistic::Cover, Statistic::Frequency] {
            let v = structural_importance(&model, stat).unwrap();
            for j in (0..x.p()).filter(|&j| !used[j]) {
                assert_eq!(v.values[j], 0.0);
            }
        }
        for j in (0..x.p()).filter(|&j| !used[j]) {
            for i in 0..x.n() {
                assert_eq!(shap.get(i, j), 0.0);
                assert_eq!(saabas.get(i, j), 0.0);
            }
        }
    }
}

#[test]
fn gain_importance_recomputes_from_serialized_nodes() {
    let d = regression(random_matrix(80, 5, 3, false), 3);
    let params = BoostParams { max_trees: 15, max_depth: 3, gamma: 0.05, alpha: 0.1, ..BoostParams::default() };
    let model = fit_boosted(&d, &params, RngStream::new(1, 1), None).unwrap();
    let json: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
    // Replay the boosting rounds to get each split's gradient sums.
    let mut expect = vec![0.0; 5];
    let mut margin = vec![model.base_score; d.n()];
    let score = |g: f64, h: f64| soft(g, params.alpha).powi(2) / (h + params.lambda);
    fn walk(
        node: &serde_json::Value,
        rows: Vec<usize>,
        x: &DataMatrix,
        grad: &[f64],
        out: &mut [f64],
        score: &dyn Fn(f64, f64) -> f64,
        gamma: f64,
    ) {
        if node["type"] == "leaf" {
            return;
        }
        let f = node["feature"].as_u64().unwrap() as usize;
        let t = node["threshold"].as_f64().unwrap();
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, f) < t);
        let gs = |rs: &[usize]| rs.iter().map(|&i| grad[i]).sum::<f64>();
        let (gl, gr) = (gs(&l), gs(&r));
        let (hl, hr) = (l.len() as f64, r.len() as f64);
        out[f] += 0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma;
        walk(&node["left"], l, x, grad, out, score, gamma);
        walk(&node["right"], r, x, grad, out, score, gamma);
    }
    for (b, tree) in json["trees"].as_array().unwrap().iter().enumerate() {
        let grad: Vec<f64> = margin.iter().zip(&d.y).map(|(m, y)| m - y).collect();
        walk(&tree["root"], (0..d.n()).collect(), &d.x, &grad, &mut expect, &score, params.gamma);
        for (i, m) in margin.iter_mut().enumerate() {
            *m += model.tree_weights[b] * model.trees[b].predict_matrix_row(&d.x, i);
        }
    }
    let got = structural_importance(&model, Statistic::Gain).unwrap();
    for (g, e) in got.values.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-9 * e.abs().max(1.0), "{g} vs {e}");
    }
}

#[test]
fn pure_noise_cv_error_near_unit_variance() {
    let params = BoostParams { max_trees: 200, ..BoostParams::default() };
    for seed in 0..20u64 {
        let x = random_matrix(200, 5, 500 + seed, false);
        let mut rng = RngStream::new(500 + seed, 7).rng();
        let y = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let d = Dataset::new(x, y, None, Task::Regression).unwrap();
        let cv = cross_validate(&d, &params, 10, RngStream::new(seed, 0)).unwrap();
        assert!((0.7..=1.4).contains(&cv.cvte), "seed {seed}: {}", cv.cvte);
    }
}

fn check_tree(node: &TreeNode, rows: &[usize], x: &DataMatrix, grad: &[f64], prm: &BoostParams, depth: usize) {
    assert!(depth <= prm.max_depth);
    match node {
        TreeNode::Leaf { weight, cover } => {
            let g: f64 = rows.iter().map(|&r| grad[r]).sum();
            let h = rows.len() as f64;
            assert_eq!(*cover, h);
            let expect = if h + prm.lambda > 0.0 { -soft(g, prm.alpha) / (h + prm.lambda) } else { 0.0 };
            assert!((weight - expect).abs() < 1e-10);
        }
        TreeNode::Split { feature, threshold, cover, left, right, .. } => {
            assert_eq!(*cover, left.cover() + right.cover());
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, *feature) < *threshold);
            assert!(!l.is_empty() && !r.is_empty());
            check_tree(left, &l, x, grad, prm, depth + 1);
            check_tree(right, &r, x, grad, prm, depth + 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grown_trees_satisfy_structural_invariants(
        seed in 0u64..10_000,
        n in 2usize..60,
        p in 1usize..6,
        depth in 1usize..5,
        lambda in 0.0f64..3.0,
        alpha in 0.0f64..1.0,
        discrete in any::<bool>(),
    ) {
        let x = random_matrix(n, p, seed, discrete);
        let mut rng = RngStream::new(seed, 4).rng();
        let grad: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let hess = vec![1.0; n];
        let prm = BoostParams { max_depth: depth, lambda, alpha, min_child_weight: 0.0, ..BoostParams::default() };
        let rows: Vec<usize> = (0..n).collect();
        let tree = fit_tree(&x, &rows, &grad, &hess, &prm, RngStream::new(seed, 0));
        prop_assert!(tree.depth <= depth);
        prop_assert!(tree.leaf_count() <= 1 << depth);
        prop_assert_eq!(tree.root.cover(), n as f64);
        check_tree(&tree.root, &rows, &x, &grad, &prm, 0);
    }

    #[test]
    fn gbrt_training_loss_never_increases(seed in 0u64..10_000, gamma in 0.0f64..1.0) {
        let d = regression(random_matrix(40, 3, seed, false), seed);
        let prm = BoostParams { eta: 0.3, gamma, max_trees: 15, ..BoostParams::default() };
        let model = fit_boosted(&d, &prm, RngStream::new(seed, 0), None).unwrap();
        let mse = |b: usize| {
            let pr = model.predict(&d.x, Some(b)).unwrap();
            pr.iter().zip(&d.y).map(|(a, y)| (a - y).powi(2)).sum::<f64>() / d.n() as f64
        };
        for b in 0..model.trees.len() {
            prop_assert!(mse(b + 1) <= mse(b) + 1e-12);
        }
    }
}
