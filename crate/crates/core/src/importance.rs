//! Per-feature importance statistics of a boosted ensemble.
//!
//! Structural statistics (gain, cover, frequency) are read off the split
//! nodes. Saabas and Tree SHAP attribute each sample's margin prediction to
//! features; a global score is the mean absolute attribution. Conditional
//! expectations follow the path-dependent convention: a feature outside the
//! conditioning set is integrated out by descending both children in
//! proportion to their training cover.
//!
//! All statistics use the model's leading `best_iteration` trees, the same
//! ensemble `predict` uses by default.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boost::{BoostedModel, RegressionTree, TreeNode};
use crate::data::{format_f64, DataMatrix};
use crate::error::{KobtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Statistic {
    Gain,
    Cover,
    #[serde(alias = "weight")]
    Frequency,
    #[default]
    Shap,
    Saabas,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [
        Statistic::Gain,
        Statistic::Cover,
        Statistic::Frequency,
        Statistic::Shap,
        Statistic::Saabas,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Statistic::Gain => "gain",
            Statistic::Cover => "cover",
            Statistic::Frequency => "frequency",
            Statistic::Shap => "shap",
            Statistic::Saabas => "saabas",
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Statistic {
    type Err = KobtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gain" => Ok(Statistic::Gain),
            "cover" => Ok(Statistic::Cover),
            "frequency" | "weight" => Ok(Statistic::Frequency),
            "shap" => Ok(Statistic::Shap),
            "saabas" => Ok(Statistic::Saabas),
            other => Err(KobtError::invalid(
                "statistic",
                format!("unknown statistic {other:?}; expected gain, cover, frequency, shap or saabas"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionKind {
    Shap,
    Saabas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub kind: Statistic,
    pub values: Vec<f64>,
}

/// Per-sample, per-feature attributions with `phi0 + row sum == margin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub kind: AttributionKind,
    pub n: usize,
    pub p: usize,
    /// Row-major `n x p`.
    pub values: Vec<f64>,
    pub base_value: f64,
}

impl AttributionMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.p + j]
    }

    /// Writes one row per sample with the feature columns followed by a
    /// constant `base_value` column.
    pub fn write_csv(&self, path: &Path, feature_names: &[String]) -> Result<()> {
        if feature_names.len() != self.p {
            return Err(KobtError::Shape(format!(
                "{} names for {} attribution columns",
                feature_names.len(),
                self.p
            )));
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<&str> = feature_names.iter().map(String::as_str).collect();
        header.push("base_value");
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for i in 0..self.n {
            let mut rec: Vec<String> = self.row(i).iter().map(|&v| format_f64(v)).collect();
            rec.push(format_f64(self.base_value));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| KobtError::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> KobtError {
    KobtError::io(path, std::io::Error::other(e.to_string()))
}

fn active_trees(model: &BoostedModel) -> impl Iterator<Item = (&RegressionTree, f64)> {
    let b = model.best_iteration.min(model.trees.len());
    model.trees[..b].iter().zip(model.tree_weights.iter().copied())
}

fn check_width(model: &BoostedModel, x: &DataMatrix) -> Result<()> {
    if x.p() != model.num_features {
        return Err(KobtError::Shape(format!(
            "model expects {} columns, got {}",
            model.num_features,
            x.p()
        )));
    }
    Ok(())
}

/// Gain, cover or frequency summed over every split node using a feature.
pub fn structural_importance(model: &BoostedModel, kind: Statistic) -> Result<ImportanceVector> {
    let mut values = vec![0.0; model.num_features];
    fn walk(node: &TreeNode, kind: Statistic, values: &mut [f64]) {
        if let TreeNode::Split {
            feature,
            split_gain,
            cover,
            left,
            right,
            ..
        } = node
        {
            values[*feature] += match kind {
                Statistic::Gain => *split_gain,
                Statistic::Cover => *cover,
                _ => 1.0,
            };
            walk(left, kind, values);
            walk(right, kind, values);
        }
    }
    match kind {
        Statistic::Gain | Statistic::Cover | Statistic::Frequency => {}
        other => {
            return Err(KobtError::invalid(
                "statistic",
                format!("{other} is not a structural statistic"),
            ))
        }
    }
    for (tree, _) in active_trees(model) {
        walk(&tree.root, kind, &mut values);
    }
    Ok(ImportanceVector { kind, values })
}

fn base_value(model: &BoostedModel) -> f64 {
    model.base_margin() + active_trees(model).map(|(t, w)| w * t.root.expected_value()).sum::<f64>()
}

fn fill_rows(n: usize, p: usize, per_row: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let mut values = vec![0.0; n * p];
    values.par_chunks_mut(p.max(1)).enumerate().for_each(|(i, row)| per_row(i, row));
    values
}

/// Saabas attributions: along each sample's decision path, the change in
/// node expectation is credited to the split feature.
pub fn saabas_values(model: &BoostedModel, x: &DataMatrix) -> Result<AttributionMatrix> {
    check_width(model, x)?;
    let p = model.num_features;
    let trees: Vec<(&RegressionTree, f64)> = active_trees(model).collect();
    let values = fill_rows(x.n(), p, |i, row| {
        for &(tree, w) in &trees {
            let mut node = &tree.root;
            let mut expected = node.expected_value();
            while let TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } = node
            {
                let next: &TreeNode = if x.get(i, *feature) < *threshold { left } else { right };
                let e = next.expected_value();
                row[*feature] += w * (e - expected);
                expected = e;
                node = next;
            }
        }
    });
    Ok(AttributionMatrix {
        kind: AttributionKind::Saabas,
        n: x.n(),
        p,
        values,
        base_value: base_value(model),
    })
}

fn branch_fractions(left: &TreeNode, right: &TreeNode, cover: f64) -> (f64, f64) {
    if cover > 0.0 {
        (left.cover() / cover, right.cover() / cover)
    } else {
        (0.5, 0.5)
    }
}

#[derive(Clone, Copy)]
struct PathElement {
    feature: usize,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

const NO_FEATURE: usize = usize::MAX;

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: usize) {
    let l = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    let lf = (l + 1) as f64;
    for i in (0..l).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / lf;
        path[i].weight = zero_fraction * path[i].weight * (l - i) as f64 / lf;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, idx: usize) {
    let l = path.len() - 1;
    let one = path[idx].one_fraction;
    let zero = path[idx].zero_fraction;
    let lf = (l + 1) as f64;
    let mut next = path[l].weight;
    for j in (0..l).rev() {
        if one != 0.0 {
            let tmp = path[j].weight;
            path[j].weight = next * lf / ((j + 1) as f64 * one);
            next = tmp - path[j].weight * zero * (l - j) as f64 / lf;
        } else {
            path[j].weight = path[j].weight * lf / (zero * (l - j) as f64);
        }
    }
    for j in idx..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero_fraction = path[j + 1].zero_fraction;
        path[j].one_fraction = path[j + 1].one_fraction;
    }
    path.truncate(l);
}

fn unwound_path_sum(path: &[PathElement], idx: usize) -> f64 {
    let l = path.len() - 1;
    let one = path[idx].one_fraction;
    let zero = path[idx].zero_fraction;
    let lf = (l + 1) as f64;
    let mut total = 0.0;
    if one != 0.0 {
        let mut next = path[l].weight;
        for j in (0..l).rev() {
            let tmp = next * lf / ((j + 1) as f64 * one);
            total += tmp;
            next = path[j].weight - tmp * zero * (l - j) as f64 / lf;
        }
    } else {
        for j in (0..l).rev() {
            total += path[j].weight * lf / (zero * (l - j) as f64);
        }
    }
    total
}

fn tree_shap_recurse(
    node: &TreeNode,
    row: &dyn Fn(usize) -> f64,
    phi: &mut [f64],
    scale: f64,
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: usize,
) {
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    match node {
        TreeNode::Leaf { weight, .. } => {
            for i in 1..path.len() {
                let w = unwound_path_sum(&path, i);
                let e = path[i];
                phi[e.feature] += w * (e.one_fraction - e.zero_fraction) * weight * scale;
            }
        }
        TreeNode::Split {
            feature: split,
            threshold,
            cover,
            left,
            right,
            ..
        } => {
            let (fl, fr) = branch_fractions(left, right, *cover);
            let goes_left = row(*split) < *threshold;
            let (hot, cold, f_hot, f_cold) = if goes_left {
                (left, right, fl, fr)
            } else {
                (right, left, fr, fl)
            };
            let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == *split) {
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            // Branches carrying zero weight on both halves contribute nothing.
            let hot_zero = incoming_zero * f_hot;
            if hot_zero != 0.0 || incoming_one != 0.0 {
                tree_shap_recurse(hot, row, phi, scale, path.clone(), hot_zero, incoming_one, *split);
            }
            let cold_zero = incoming_zero * f_cold;
            if cold_zero != 0.0 {
                tree_shap_recurse(cold, row, phi, scale, path, cold_zero, 0.0, *split);
            }
        }
    }
}

/// Adds one tree's SHAP values, scaled by `scale`, for a single sample.
fn tree_shap_single(tree: &RegressionTree, row: &dyn Fn(usize) -> f64, scale: f64, phi: &mut [f64]) {
    let path = Vec::with_capacity(tree.depth + 2);
    tree_shap_recurse(&tree.root, row, phi, scale, path, 1.0, 1.0, NO_FEATURE);
}

/// Exact path-dependent SHAP values in polynomial time per tree.
pub fn tree_shap_values(model: &BoostedModel, x: &DataMatrix) -> Result<AttributionMatrix> {
    check_width(model, x)?;
    let p = model.num_features;
    let trees: Vec<(&RegressionTree, f64)> = active_trees(model).collect();
    let values = fill_rows(x.n(), p, |i, row| {
        let access = |j: usize| x.get(i, j);
        for &(tree, w) in &trees {
            tree_shap_single(tree, &access, w, row);
        }
    });
    Ok(AttributionMatrix {
        kind: AttributionKind::Shap,
        n: x.n(),
        p,
        values,
        base_value: base_value(model),
    })
}

pub const ORACLE_MAX_FEATURES: usize = 15;

/// Path-dependent conditional expectation of one tree given the features in
/// the bit set `known`.
fn conditional_expectation(node: &TreeNode, row: &[f64], known: u32) -> f64 {
    match node {
        TreeNode::Leaf { weight, .. } => *weight,
        TreeNode::Split {
            feature,
            threshold,
            cover,
            left,
            right,
        ..
        } => {
            if known & (1u32 << *feature) != 0 {
                let next = if row[*feature] < *threshold { left } else { right };
                conditional_expectation(next, row, known)
            } else {
                let (fl, fr) = branch_fractions(left, right, *cover);
                fl * conditional_expectation(left, row, known) + fr * conditional_expectation(right, row, known)
            }
        }
    }
}

/// Shapley values by enumerating every coalition. Exponential in `p`.
pub fn exact_shapley_oracle(model: &BoostedModel, x_row: &[f64]) -> Result<Vec<f64>> {
    let p = model.num_features;
    if p > ORACLE_MAX_FEATURES {
        return Err(KobtError::invalid(
            "p",
            format!("exact enumeration supports at most {ORACLE_MAX_FEATURES} features, got {p}"),
        ));
    }
    if x_row.len() != p {
        return Err(KobtError::Shape(format!("row has {} values, model expects {p}", x_row.len())));
    }
    let trees: Vec<(&RegressionTree, f64)> = active_trees(model).collect();
    let subsets = 1u32 << p;
    let value: Vec<f64> = (0..subsets)
        .map(|s| {
            trees
                .iter()
                .map(|(t, w)| w * conditional_expectation(&t.root, x_row, s))
                .sum()
        })
        .collect();
    let weights = coalition_weights(p);
    let mut phi = vec![0.0; p];
    for (j, phi_j) in phi.iter_mut().enumerate() {
        let bit = 1u32 << j;
        for s in (0..subsets).filter(|s| s & bit == 0) {
            *phi_j += weights[s.count_ones() as usize] * (value[(s | bit) as usize] - value[s as usize]);
        }
    }
    Ok(phi)
}

/// `|S|! (p - |S| - 1)! / p!` indexed by `|S|`.
pub fn coalition_weights(p: usize) -> Vec<f64> {
    let ln_fact = |k: usize| (1..=k).map(|v| (v as f64).ln()).sum::<f64>();
    (0..p)
        .map(|s| (ln_fact(s) + ln_fact(p - s - 1) - ln_fact(p)).exp())
        .collect()
}

/// Per-feature mean absolute attribution over samples.
pub fn mean_abs_aggregate(attr: &AttributionMatrix) -> ImportanceVector {
    let mut values = vec![0.0; attr.p];
    for i in 0..attr.n {
        for (v, a) in values.iter_mut().zip(attr.row(i)) {
            *v += a.abs();
        }
    }
    if attr.n > 0 {
        values.iter_mut().for_each(|v| *v /= attr.n as f64);
    }
    let kind = match attr.kind {
        AttributionKind::Shap => Statistic::Shap,
        AttributionKind::Saabas => Statistic::Saabas,
    };
    ImportanceVector { kind, values }
}

/// Any of the five statistics as a per-feature vector; attribution-based
/// ones are averaged over the rows of `x`.
pub fn feature_importance(model: &BoostedModel, x: &DataMatrix, kind: Statistic) -> Result<ImportanceVector> {
    match kind {
        Statistic::Shap => Ok(mean_abs_aggregate(&tree_shap_values(model, x)?)),
        Statistic::Saabas => Ok(mean_abs_aggregate(&saabas_values(model, x)?)),
        _ => structural_importance(model, kind),
    }
}
