//! Regularized gradient-boosted trees with GBRT and DART boosters.
//!
//! Only the feature matrix `x` of a [`Dataset`] is used for splitting;
//! covariates are expected to have been regressed out of the response
//! beforehand.

mod tree;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use tree::{
    find_best_split, fit_tree, leaf_weight, node_score, soft_threshold, split_gain, RegressionTree,
    SplitCandidate, TreeNode,
};

use crate::data::{DataMatrix, Dataset};
use crate::error::{KobtError, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Booster {
    #[default]
    Gbrt,
    Dart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Objective {
    #[default]
    SquaredError,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct BoostParams {
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub subsample_rows: f64,
    pub subsample_cols: f64,
    pub booster: Booster,
    /// Per-round drop probability of each existing tree; DART only.
    pub dart_dropout: f64,
    pub max_trees: usize,
    pub early_stopping_rounds: usize,
    pub objective: Objective,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            eta: 0.1,
            gamma: 0.0,
            lambda: 1.0,
            alpha: 0.0,
            max_depth: 6,
            min_child_weight: 1.0,
            subsample_rows: 1.0,
            subsample_cols: 1.0,
            booster: Booster::Gbrt,
            dart_dropout: 0.1,
            max_trees: 100,
            early_stopping_rounds: 5,
            objective: Objective::SquaredError,
        }
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(KobtError::invalid(field, reason))
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<()> {
        check(self.eta > 0.0 && self.eta <= 1.0, "eta", "must lie in (0, 1]")?;
        check(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma", "must be finite and >= 0")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be finite and >= 0")?;
        check(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha", "must be finite and >= 0")?;
        check(self.max_depth >= 1, "max_depth", "must be >= 1")?;
        check(
            self.min_child_weight >= 0.0 && self.min_child_weight.is_finite(),
            "min_child_weight",
            "must be finite and >= 0",
        )?;
        check(
            self.subsample_rows > 0.0 && self.subsample_rows <= 1.0,
            "subsample_rows",
            "must lie in (0, 1]",
        )?;
        check(
            self.subsample_cols > 0.0 && self.subsample_cols <= 1.0,
            "subsample_cols",
            "must lie in (0, 1]",
        )?;
        check(
            self.dart_dropout >= 0.0 && self.dart_dropout < 1.0,
            "dart_dropout",
            "must lie in [0, 1)",
        )?;
        check(self.max_trees >= 1, "max_trees", "must be >= 1")?;
        check(self.early_stopping_rounds >= 1, "early_stopping_rounds", "must be >= 1")?;
        Ok(())
    }
}

fn sigmoid(m: f64) -> f64 {
    1.0 / (1.0 + (-m).exp())
}

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub params: BoostParams,
    /// Mean training response; a probability for the logistic objective.
    pub base_score: f64,
    pub num_features: usize,
    pub trees: Vec<RegressionTree>,
    pub tree_weights: Vec<f64>,
    /// Number of leading trees used by default at prediction time.
    pub best_iteration: usize,
    /// Held-out loss after 0, 1, 2, ... trees; empty without validation.
    pub validation_history: Vec<f64>,
}

impl BoostedModel {
    /// Constant term of the ensemble on the margin scale.
    pub fn base_margin(&self) -> f64 {
        match self.params.objective {
            Objective::SquaredError => self.base_score,
            Objective::Logistic => {
                let p = self.base_score.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                (p / (1.0 - p)).ln()
            }
        }
    }

    fn check_width(&self, x: &DataMatrix) -> Result<()> {
        if x.p() != self.num_features {
            return Err(KobtError::Shape(format!(
                "model expects {} columns, got {}",
                self.num_features,
                x.p()
            )));
        }
        Ok(())
    }

    fn tree_count(&self, num_trees: Option<usize>) -> usize {
        num_trees.unwrap_or(self.best_iteration).min(self.trees.len())
    }

    /// Raw ensemble output (log-odds for the logistic objective).
    pub fn predict_margin(&self, x: &DataMatrix, num_trees: Option<usize>) -> Result<Vec<f64>> {
        self.check_width(x)?;
        let b = self.tree_count(num_trees);
        let base = self.base_margin();
        Ok((0..x.n())
            .map(|i| {
                let mut m = base;
                for (t, w) in self.trees[..b].iter().zip(&self.tree_weights) {
                    m += w * t.predict_matrix_row(x, i);
                }
                m
            })
            .collect())
    }

    /// Predictions on the response scale: probabilities for logistic.
    pub fn predict(&self, x: &DataMatrix, num_trees: Option<usize>) -> Result<Vec<f64>> {
        let m = self.predict_margin(x, num_trees)?;
        Ok(match self.params.objective {
            Objective::SquaredError => m,
            Objective::Logistic => m.into_iter().map(sigmoid).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        model.params.validate()?;
        if model.trees.len() != model.tree_weights.len() {
            return Err(KobtError::invalid("tree_weights", "length differs from trees"));
        }
        Ok(model)
    }
}

pub fn predict(model: &BoostedModel, x: &DataMatrix, num_trees: Option<usize>) -> Result<Vec<f64>> {
    model.predict(x, num_trees)
}

/// Mean loss used for training and early stopping.
fn objective_loss(objective: Objective, y: &[f64], margin: &[f64]) -> f64 {
    let n = y.len() as f64;
    match objective {
        Objective::SquaredError => y.iter().zip(margin).map(|(a, m)| (a - m).powi(2)).sum::<f64>() / n,
        Objective::Logistic => {
            y.iter()
                .zip(margin)
                .map(|(a, &m)| {
                    let p = sigmoid(m).clamp(1e-15, 1.0 - 1e-15);
                    -(a * p.ln() + (1.0 - a) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n
        }
    }
}

/// Held-out score reported by cross-validation: MSE for regression,
/// misclassification rate at probability 0.5 for logistic.
pub fn holdout_score(objective: Objective, y: &[f64], prediction: &[f64]) -> f64 {
    let n = y.len() as f64;
    match objective {
        Objective::SquaredError => y.iter().zip(prediction).map(|(a, m)| (a - m).powi(2)).sum::<f64>() / n,
        Objective::Logistic => {
            y.iter()
                .zip(prediction)
                .filter(|(a, p)| (**p > 0.5) != (**a > 0.5))
                .count() as f64
                / n
        }
    }
}

fn gradients(objective: Objective, y: &[f64], margin: &[f64], grad: &mut [f64], hess: &mut [f64]) {
    for i in 0..y.len() {
        match objective {
            Objective::SquaredError => {
                grad[i] = margin[i] - y[i];
                hess[i] = 1.0;
            }
            Objective::Logistic => {
                let p = sigmoid(margin[i]);
                grad[i] = p - y[i];
                hess[i] = p * (1.0 - p);
            }
        }
    }
}

fn check_response(objective: Objective, y: &[f64]) -> Result<()> {
    if objective == Objective::Logistic && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(KobtError::invalid("y", "logistic objective needs responses in {0, 1}"));
    }
    Ok(())
}

const DROP_STREAM: u64 = 0;
const TREE_STREAM: u64 = 1;

/// Fits a boosted ensemble by forward stagewise additive modeling.
///
/// With `validation`, training stops once the held-out loss has not improved
/// for `early_stopping_rounds` consecutive rounds and `best_iteration` is the
/// tree count with the lowest held-out loss (earliest on ties). Without it,
/// all `max_trees` rounds run.
pub fn fit_boosted(
    dataset: &Dataset,
    params: &BoostParams,
    stream: RngStream,
    validation: Option<&Dataset>,
) -> Result<BoostedModel> {
    params.validate()?;
    let x = &dataset.x;
    let y = &dataset.y;
    check_response(params.objective, y)?;
    if let Some(v) = validation {
        if v.x.p() != x.p() {
            return Err(KobtError::Shape(format!(
                "validation has {} columns, training has {}",
                v.x.p(),
                x.p()
            )));
        }
        check_response(params.objective, &v.y)?;
    }
    let n = x.n();
    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut model = BoostedModel {
        params: params.clone(),
        base_score,
        num_features: x.p(),
        trees: Vec::new(),
        tree_weights: Vec::new(),
        best_iteration: 0,
        validation_history: Vec::new(),
    };
    let base = model.base_margin();
    let dart = params.booster == Booster::Dart;
    let presorted = tree::presort(x);
    let all_rows = vec![true; n];

    let mut margin = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    // Per-tree raw outputs; DART needs them to drop and rescale trees.
    let mut train_out: Vec<Vec<f64>> = Vec::new();
    let mut valid_out: Vec<Vec<f64>> = Vec::new();
    let mut valid_margin = validation.map(|v| vec![base; v.n()]);
    if let (Some(v), Some(vm)) = (validation, &valid_margin) {
        model.validation_history.push(objective_loss(params.objective, &v.y, vm));
    }
    let mut best_loss = model.validation_history.first().copied().unwrap_or(f64::INFINITY);

    for round in 0..params.max_trees {
        let round_stream = stream.child(round as u64);
        let mut dropped: Vec<usize> = Vec::new();
        if dart && !model.trees.is_empty() {
            let mut rng = round_stream.child(DROP_STREAM).rng();
            for b in 0..model.trees.len() {
                if rng.gen::<f64>() < params.dart_dropout {
                    dropped.push(b);
                }
            }
            if !dropped.is_empty() {
                let mut is_dropped = vec![false; model.trees.len()];
                dropped.iter().for_each(|&b| is_dropped[b] = true);
                margin.iter_mut().for_each(|m| *m = base);
                for (b, out) in train_out.iter().enumerate() {
                    if !is_dropped[b] {
                        let w = model.tree_weights[b];
                        margin.iter_mut().zip(out).for_each(|(m, o)| *m += w * o);
                    }
                }
            }
        }
        gradients(params.objective, y, &margin, &mut grad, &mut hess);
        let tree = tree::fit_tree_presorted(
            x,
            &presorted,
            &all_rows,
            &grad,
            &hess,
            params,
            round_stream.child(TREE_STREAM),
        );
        let out: Vec<f64> = (0..n).map(|i| tree.predict_matrix_row(x, i)).collect();
        let k = dropped.len() as f64;
        let w_new = params.eta / (k + 1.0);
        for &b in &dropped {
            model.tree_weights[b] *= k / (k + 1.0);
        }
        let v_out = validation.map(|v| (0..v.n()).map(|i| tree.predict_matrix_row(&v.x, i)).collect::<Vec<_>>());
        model.trees.push(tree);
        model.tree_weights.push(w_new);

        if dropped.is_empty() {
            margin.iter_mut().zip(&out).for_each(|(m, o)| *m += w_new * o);
            if let (Some(vm), Some(vo)) = (valid_margin.as_mut(), &v_out) {
                vm.iter_mut().zip(vo).for_each(|(m, o)| *m += w_new * o);
            }
        }
        if dart {
            train_out.push(out);
            if let Some(vo) = v_out {
                valid_out.push(vo);
            }
            if !dropped.is_empty() {
                rebuild_margin(&mut margin, base, &model.tree_weights, &train_out);
                if let Some(vm) = valid_margin.as_mut() {
                    rebuild_margin(vm, base, &model.tree_weights, &valid_out);
                }
            }
        }

        if let (Some(v), Some(vm)) = (validation, &valid_margin) {
            let loss = objective_loss(params.objective, &v.y, vm);
            model.validation_history.push(loss);
            let count = model.trees.len();
            if loss < best_loss {
                best_loss = loss;
                model.best_iteration = count;
            }
            if count - model.best_iteration >= params.early_stopping_rounds {
                break;
            }
        }
    }
    if validation.is_none() {
        model.best_iteration = model.trees.len();
    }
    Ok(model)
}

fn rebuild_margin(margin: &mut [f64], base: f64, weights: &[f64], outputs: &[Vec<f64>]) {
    margin.iter_mut().for_each(|m| *m = base);
    for (w, out) in weights.iter().zip(outputs) {
        margin.iter_mut().zip(out).for_each(|(m, o)| *m += w * o);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub cvte: f64,
    /// Rounded mean of the per-fold best iterations, at least 1.
    pub best_num_trees: usize,
    pub fold_scores: Vec<f64>,
    pub fold_best_iterations: Vec<usize>,
    /// Fold index of every row.
    pub fold_of_row: Vec<usize>,
}

/// K-fold cross-validated test error with per-fold early stopping.
pub fn cross_validate(dataset: &Dataset, params: &BoostParams, k: usize, stream: RngStream) -> Result<CvResult> {
    params.validate()?;
    if k < 2 {
        return Err(KobtError::invalid("k", "need at least 2 folds"));
    }
    let n = dataset.n();
    if n < 2 * k {
        return Err(KobtError::invalid("k", format!("{n} rows cannot fill {k} folds of 2 rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream.child(0).rng());
    let mut fold_of_row = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold_of_row[row] = pos % k;
    }
    let folds: Vec<Result<(f64, usize)>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of_row[i] != f).collect();
            let held: Vec<usize> = (0..n).filter(|&i| fold_of_row[i] == f).collect();
            let train_set = dataset.subset_rows(&train)?;
            let held_set = dataset.subset_rows(&held)?;
            let model = fit_boosted(&train_set, params, stream.child(1 + f as u64), Some(&held_set))?;
            let pred = model.predict(&held_set.x, None)?;
            Ok((holdout_score(params.objective, &held_set.y, &pred), model.best_iteration))
        })
        .collect();
    let mut fold_scores = Vec::with_capacity(k);
    let mut fold_best_iterations = Vec::with_capacity(k);
    for r in folds {
        let (s, b) = r?;
        fold_scores.push(s);
        fold_best_iterations.push(b);
    }
    let cvte = fold_scores.iter().sum::<f64>() / k as f64;
    let mean_best = fold_best_iterations.iter().sum::<usize>() as f64 / k as f64;
    Ok(CvResult {
        cvte,
        best_num_trees: (mean_best.round() as usize).max(1),
        fold_scores,
        fold_best_iterations,
        fold_of_row,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_names, Task};
    use rand_distr::{Distribution, StandardNormal};

    fn random_dataset(n: usize, p: usize, seed: u64, signal: bool) -> Dataset {
        let mut rng = RngStream::new(seed, 0).rng();
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                if signal {
                    2.0 * cols[0][i] + (cols[1][i] > 0.0) as u8 as f64 + 0.3 * noise
                } else {
                    noise
                }
            })
            .collect();
        let x = DataMatrix::from_columns(cols, default_names("x", p)).unwrap();
        Dataset::new(x, y, None, Task::Regression).unwrap()
    }

    fn train_mse(model: &BoostedModel, d: &Dataset, b: usize) -> f64 {
        let pred = model.predict(&d.x, Some(b)).unwrap();
        holdout_score(Objective::SquaredError, &d.y, &pred)
    }

    #[test]
    fn empty_ensemble_predicts_base_score() {
        let d = random_dataset(30, 2, 1, true);
        let model = fit_boosted(&d, &BoostParams::default(), RngStream::new(0, 0), None).unwrap();
        let base = model.predict(&d.x, Some(0)).unwrap();
        let mean = d.y.iter().sum::<f64>() / 30.0;
        assert!(base.iter().all(|&v| v == mean));
    }

    #[test]
    fn full_step_single_tree_is_optimal_fit() {
        let d = random_dataset(60, 3, 2, true);
        let params = BoostParams {
            eta: 1.0,
            lambda: 0.0,
            max_trees: 1,
            max_depth: 3,
            ..BoostParams::default()
        };
        let model = fit_boosted(&d, &params, RngStream::new(0, 0), None).unwrap();
        // A full step lands every row on its leaf's mean response.
        let pred = model.predict(&d.x, None).unwrap();
        let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
        for (i, v) in pred.iter().enumerate() {
            groups.entry(v.to_bits()).or_default().push(i);
        }
        for (bits, rows) in groups {
            let mean = rows.iter().map(|&i| d.y[i]).sum::<f64>() / rows.len() as f64;
            assert!((f64::from_bits(bits) - mean).abs() < 1e-10);
        }
        assert!(train_mse(&model, &d, 1) < train_mse(&model, &d, 0));
    }

    #[test]
    fn training_loss_is_monotone() {
        let d = random_dataset(80, 4, 3, true);
        let params = BoostParams { eta: 0.01, max_trees: 60, ..BoostParams::default() };
        let model = fit_boosted(&d, &params, RngStream::new(0, 0), None).unwrap();
        let losses: Vec<f64> = (0..=60).map(|b| train_mse(&model, &d, b)).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn dart_without_dropout_matches_gbrt() {
        let d = random_dataset(50, 3, 4, true);
        let gbrt = BoostParams { max_trees: 20, subsample_rows: 0.8, ..BoostParams::default() };
        let dart = BoostParams { booster: Booster::Dart, dart_dropout: 0.0, ..gbrt.clone() };
        let a = fit_boosted(&d, &gbrt, RngStream::new(5, 1), None).unwrap();
        let b = fit_boosted(&d, &dart, RngStream::new(5, 1), None).unwrap();
        assert_eq!(a.trees, b.trees);
        assert_eq!(a.tree_weights, b.tree_weights);
    }

    #[test]
    fn dart_weights_follow_normalization() {
        let d = random_dataset(60, 3, 5, true);
        let params = BoostParams {
            booster: Booster::Dart,
            dart_dropout: 0.5,
            max_trees: 15,
            ..BoostParams::default()
        };
        let model = fit_boosted(&d, &params, RngStream::new(1, 1), None).unwrap();
        assert!(model.tree_weights.iter().all(|&w| w > 0.0 && w <= params.eta));
        assert!(model.tree_weights.iter().any(|&w| w < params.eta));
        let again = fit_boosted(&d, &params, RngStream::new(1, 1), None).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn prediction_matches_incremental_accumulation() {
        let d = random_dataset(40, 3, 6, true);
        let params = BoostParams { max_trees: 12, ..BoostParams::default() };
        let model = fit_boosted(&d, &params, RngStream::new(0, 0), None).unwrap();
        let full = model.predict(&d.x, Some(12)).unwrap();
        for i in 0..d.n() {
            let row = d.x.row(i);
            let per_tree: Vec<f64> = model
                .trees
                .iter()
                .zip(&model.tree_weights)
                .map(|(t, w)| w * t.predict_row(&row))
                .collect();
            let reverse: f64 = per_tree.iter().rev().sum::<f64>() + model.base_score;
            assert!((full[i] - reverse).abs() < 1e-10);
        }
    }

    #[test]
    fn stump_predicts_piecewise_constant() {
        let x = DataMatrix::from_columns(vec![vec![0.0, 1.0, 2.0, 3.0]], vec!["x".into()]).unwrap();
        let d = Dataset::new(x, vec![-1.0, -1.0, 1.0, 1.0], None, Task::Regression).unwrap();
        let params = BoostParams { eta: 1.0, lambda: 0.0, max_depth: 1, max_trees: 1, ..BoostParams::default() };
        let model = fit_boosted(&d, &params, RngStream::new(0, 0), None).unwrap();
        let probe = DataMatrix::from_columns(vec![vec![-5.0, 1.4, 1.6, 9.0]], vec!["x".into()]).unwrap();
        assert_eq!(model.predict(&probe, None).unwrap(), vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn column_mismatch_is_rejected() {
        let d = random_dataset(20, 3, 7, false);
        let model = fit_boosted(&d, &BoostParams { max_trees: 2, ..BoostParams::default() }, RngStream::new(0, 0), None)
            .unwrap();
        let narrow = d.x.select_columns(&[0, 1]).unwrap();
        assert!(matches!(model.predict(&narrow, None), Err(KobtError::Shape(_))));
    }

    #[test]
    fn json_round_trip_preserves_predictions() {
        let d = random_dataset(50, 3, 8, true);
        let params = BoostParams { booster: Booster::Dart, dart_dropout: 0.2, max_trees: 10, ..BoostParams::default() };
        let model = fit_boosted(&d, &params, RngStream::new(0, 0), None).unwrap();
        let back = BoostedModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let a = model.predict(&d.x, None).unwrap();
        let b = back.predict(&d.x, None).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() <= 1e-15));
    }

    #[test]
    fn logistic_needs_binary_response_and_outputs_probabilities() {
        let d = random_dataset(60, 2, 9, true);
        let params = BoostParams { objective: Objective::Logistic, max_trees: 5, ..BoostParams::default() };
        assert!(fit_boosted(&d, &params, RngStream::new(0, 0), None).unwrap_err().is_validation());
        let yb: Vec<f64> = d.y.iter().map(|&v| (v > 0.0) as u8 as f64).collect();
        let db = Dataset::new(d.x.clone(), yb, None, Task::BinaryClassification).unwrap();
        let model = fit_boosted(&db, &params, RngStream::new(0, 0), None).unwrap();
        let p = model.predict(&db.x, None).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let cv = cross_validate(&db, &params, 3, RngStream::new(1, 0)).unwrap();
        assert!(cv.cvte >= 0.0 && cv.cvte < 0.5);
    }

    #[test]
    fn early_stopping_records_best_iteration() {
        let d = random_dataset(120, 3, 10, false);
        let train = d.subset_rows(&(0..80).collect::<Vec<_>>()).unwrap();
        let held = d.subset_rows(&(80..120).collect::<Vec<_>>()).unwrap();
        let params = BoostParams { eta: 0.3, max_trees: 200, ..BoostParams::default() };
        let model = fit_boosted(&train, &params, RngStream::new(0, 0), Some(&held)).unwrap();
        assert!(model.trees.len() < 200);
        assert_eq!(model.trees.len(), model.best_iteration + 5);
        let best = model.validation_history[model.best_iteration];
        assert!(model.validation_history.iter().all(|&v| v >= best));
    }

    #[test]
    fn constant_response_has_zero_cv_error() {
        let d = random_dataset(40, 2, 11, false);
        let c = Dataset::new(d.x.clone(), vec![3.5; 40], None, Task::Regression).unwrap();
        let cv = cross_validate(&c, &BoostParams::default(), 4, RngStream::new(0, 0)).unwrap();
        assert_eq!(cv.cvte, 0.0);
    }

    #[test]
    fn cv_is_deterministic_and_validates_folds() {
        let d = random_dataset(40, 2, 12, true);
        let params = BoostParams { max_trees: 30, ..BoostParams::default() };
        let a = cross_validate(&d, &params, 5, RngStream::new(3, 0)).unwrap();
        let b = cross_validate(&d, &params, 5, RngStream::new(3, 0)).unwrap();
        assert_eq!(a, b);
        for f in 0..5 {
            assert_eq!(a.fold_of_row.iter().filter(|&&g| g == f).count(), 8);
        }
        assert!(cross_validate(&d, &params, 1, RngStream::new(3, 0)).is_err());
        assert!(cross_validate(&d, &params, 21, RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn invalid_params_are_named() {
        let bad = BoostParams { eta: 0.0, ..BoostParams::default() };
        match bad.validate() {
            Err(KobtError::Invalid { field, .. }) => assert_eq!(field, "eta"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = BoostParams { subsample_cols: 1.5, ..BoostParams::default() };
        assert!(bad.validate().is_err());
    }
}
