//! Regression trees grown by exact greedy search on gradient statistics.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::BoostParams;
use crate::data::DataMatrix;
use crate::rng::RngStream;

/// `sign(g) * max(|g| - alpha, 0)`.
pub fn soft_threshold(g: f64, alpha: f64) -> f64 {
    if g > alpha {
        g - alpha
    } else if g < -alpha {
        g + alpha
    } else {
        0.0
    }
}

/// Structure score `soft(G, alpha)^2 / (H + lambda)` of a node.
pub fn node_score(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    let denom = h + lambda;
    if denom <= 0.0 {
        return 0.0;
    }
    let s = soft_threshold(g, alpha);
    s * s / denom
}

/// Optimal leaf weight `-soft(G, alpha) / (H + lambda)`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    let denom = h + lambda;
    if denom <= 0.0 {
        return 0.0;
    }
    -soft_threshold(g, alpha) / denom
}

/// Penalized gain of splitting `(G, H)` into `(G_L, H_L)` and the remainder.
pub fn split_gain(g_left: f64, h_left: f64, g: f64, h: f64, params: &BoostParams) -> f64 {
    let (l, a) = (params.lambda, params.alpha);
    0.5 * (node_score(g_left, h_left, l, a) + node_score(g - g_left, h - h_left, l, a)
        - node_score(g, h, l, a))
        - params.gamma
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        weight: f64,
        cover: f64,
    },
    /// Rows with `x[feature] < threshold` go left, the rest go right.
    Split {
        feature: usize,
        threshold: f64,
        split_gain: f64,
        cover: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match self {
            TreeNode::Leaf { cover, .. } | TreeNode::Split { cover, .. } => *cover,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    /// Cover-weighted mean of the leaf values below this node.
    pub fn expected_value(&self) -> f64 {
        match self {
            TreeNode::Leaf { weight, .. } => *weight,
            TreeNode::Split { left, right, cover, .. } => {
                if *cover <= 0.0 {
                    return 0.5 * (left.expected_value() + right.expected_value());
                }
                (left.cover() * left.expected_value() + right.cover() * right.expected_value()) / cover
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub root: TreeNode,
    pub depth: usize,
}

impl RegressionTree {
    pub fn from_root(root: TreeNode) -> Self {
        let depth = root.depth();
        Self { root, depth }
    }

    pub fn leaf_count(&self) -> usize {
        self.root.leaf_count()
    }

    /// Value of the leaf that `row` (a feature accessor) lands in.
    pub fn predict_with(&self, value: impl Fn(usize) -> f64) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { weight, .. } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if value(*feature) < *threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.predict_with(|j| row[j])
    }

    pub fn predict_matrix_row(&self, x: &DataMatrix, i: usize) -> f64 {
        self.predict_with(|j| x.get(i, j))
    }
}

/// Best split found for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    /// Number of node rows routed left.
    pub left_count: usize,
    pub left_grad: f64,
    pub left_hess: f64,
}

/// Scans one feature whose node rows are given in ascending value order.
/// Returns the best valid midpoint, lowest threshold winning ties.
fn scan_sorted_feature(
    feature: usize,
    sorted_rows: &[u32],
    values: &[f64],
    grad: &[f64],
    hess: &[f64],
    g_total: f64,
    h_total: f64,
    params: &BoostParams,
) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    let (mut gl, mut hl) = (0.0, 0.0);
    let len = sorted_rows.len();
    for pos in 0..len.saturating_sub(1) {
        let r = sorted_rows[pos] as usize;
        gl += grad[r];
        hl += hess[r];
        let v = values[r];
        let v_next = values[sorted_rows[pos + 1] as usize];
        if !(v < v_next) {
            continue;
        }
        let hr = h_total - hl;
        if hl < params.min_child_weight || hr < params.min_child_weight {
            continue;
        }
        let gain = split_gain(gl, hl, g_total, h_total, params);
        if gain > 0.0 && best.is_none_or(|b| beats(gain, b.gain)) {
            let mut threshold = 0.5 * (v + v_next);
            if !(threshold > v) {
                threshold = v_next;
            }
            best = Some(SplitCandidate {
                feature,
                threshold,
                gain,
                left_count: pos + 1,
                left_grad: gl,
                left_hess: hl,
            });
        }
    }
    best
}

/// Gains within a relative 1e-12 count as tied, so equal partitions reached
/// through different summation orders keep the earlier candidate.
fn beats(gain: f64, incumbent: f64) -> bool {
    gain > incumbent + 1e-12 * incumbent.abs()
}

fn better(candidate: Option<SplitCandidate>, incumbent: Option<SplitCandidate>) -> Option<SplitCandidate> {
    match (candidate, incumbent) {
        (Some(c), Some(i)) if beats(c.gain, i.gain) => Some(c),
        (Some(c), None) => Some(c),
        (_, inc) => inc,
    }
}

/// Exact greedy split search over the given node rows and candidate features.
///
/// Candidate thresholds are midpoints of consecutive distinct values. Ties in
/// gain go to the lowest feature index, then the lowest threshold. Returns
/// `None` when no split has positive penalized gain with both children
/// meeting `min_child_weight`.
pub fn find_best_split(
    x: &DataMatrix,
    rows: &[usize],
    features: &[usize],
    grad: &[f64],
    hess: &[f64],
    params: &BoostParams,
) -> Option<SplitCandidate> {
    if rows.len() < 2 {
        return None;
    }
    let g_total: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h_total: f64 = rows.iter().map(|&r| hess[r]).sum();
    let mut sorted_features: Vec<usize> = features.to_vec();
    sorted_features.sort_unstable();
    sorted_features.dedup();
    let mut best = None;
    for &f in &sorted_features {
        let col = x.col(f);
        let mut order: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
        order.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
        let cand = scan_sorted_feature(f, &order, col, grad, hess, g_total, h_total, params);
        best = better(cand, best);
    }
    best
}

/// Row indices of each column sorted by value (ties by row index).
pub(crate) fn presort(x: &DataMatrix) -> Vec<Vec<u32>> {
    (0..x.p())
        .map(|j| {
            let col = x.col(j);
            let mut order: Vec<u32> = (0..x.n() as u32).collect();
            order.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            order
        })
        .collect()
}

const PARALLEL_SCAN_WORK: usize = 1 << 16;

struct TreeBuilder<'a> {
    x: &'a DataMatrix,
    features: Vec<usize>,
    /// One row order per entry of `features`; every node owns the same
    /// `[start, end)` segment in each of them.
    sorted: Vec<Vec<u32>>,
    goes_left: Vec<bool>,
    scratch: Vec<u32>,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a BoostParams,
}

impl TreeBuilder<'_> {
    fn best_split(&self, start: usize, end: usize, g: f64, h: f64) -> Option<SplitCandidate> {
        let scan = |k: usize| {
            let f = self.features[k];
            scan_sorted_feature(
                f,
                &self.sorted[k][start..end],
                self.x.col(f),
                self.grad,
                self.hess,
                g,
                h,
                self.params,
            )
        };
        let work = (end - start) * self.features.len();
        let per_feature: Vec<Option<SplitCandidate>> = if work >= PARALLEL_SCAN_WORK {
            (0..self.features.len()).into_par_iter().map(scan).collect()
        } else {
            (0..self.features.len()).map(scan).collect()
        };
        // Fixed-order reduction keeps the lowest-feature tie-break.
        per_feature.into_iter().fold(None, |best, c| better(c, best))
    }

    fn grow(&mut self, start: usize, end: usize, depth: usize) -> TreeNode {
        let rows = &self.sorted[0][start..end];
        let g: f64 = rows.iter().map(|&r| self.grad[r as usize]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r as usize]).sum();
        let (lambda, alpha) = (self.params.lambda, self.params.alpha);
        let leaf = TreeNode::Leaf {
            weight: leaf_weight(g, h, lambda, alpha),
            cover: h,
        };
        if depth >= self.params.max_depth || end - start < 2 {
            return leaf;
        }
        let Some(split) = self.best_split(start, end, g, h) else {
            return leaf;
        };
        let k_best = self
            .features
            .iter()
            .position(|&f| f == split.feature)
            .expect("split feature is a candidate");
        let mid = start + split.left_count;
        for &r in &self.sorted[k_best][start..mid] {
            self.goes_left[r as usize] = true;
        }
        for &r in &self.sorted[k_best][mid..end] {
            self.goes_left[r as usize] = false;
        }
        for k in 0..self.sorted.len() {
            let seg = &mut self.sorted[k][start..end];
            self.scratch.clear();
            let mut write = 0;
            for idx in 0..seg.len() {
                let r = seg[idx];
                if self.goes_left[r as usize] {
                    seg[write] = r;
                    write += 1;
                } else {
                    self.scratch.push(r);
                }
            }
            seg[write..].copy_from_slice(&self.scratch);
            debug_assert_eq!(write, split.left_count);
        }
        let left = self.grow(start, mid, depth + 1);
        let right = self.grow(mid, end, depth + 1);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            split_gain: split.gain,
            cover: h,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

fn subsample_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64).round() as usize).clamp(1, total)
}

/// Grows one tree on presorted columns. `in_rows` marks the rows available
/// to this tree before row subsampling.
pub(crate) fn fit_tree_presorted(
    x: &DataMatrix,
    presorted: &[Vec<u32>],
    in_rows: &[bool],
    grad: &[f64],
    hess: &[f64],
    params: &BoostParams,
    stream: RngStream,
) -> RegressionTree {
    let mut rng = stream.rng();
    let p = x.p();
    let mut mask = in_rows.to_vec();
    if params.subsample_rows < 1.0 {
        let available: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let keep = subsample_count(params.subsample_rows, available.len());
        mask.iter_mut().for_each(|m| *m = false);
        for idx in sample(&mut rng, available.len(), keep).into_iter() {
            mask[available[idx]] = true;
        }
    }
    let features: Vec<usize> = if params.subsample_cols < 1.0 {
        let keep = subsample_count(params.subsample_cols, p);
        let mut f: Vec<usize> = sample(&mut rng, p, keep).into_vec();
        f.sort_unstable();
        f
    } else {
        (0..p).collect()
    };
    let sorted: Vec<Vec<u32>> = features
        .iter()
        .map(|&f| presorted[f].iter().copied().filter(|&r| mask[r as usize]).collect())
        .collect();
    let n_rows = sorted.first().map_or(0, Vec::len);
    let mut builder = TreeBuilder {
        x,
        features,
        sorted,
        goes_left: vec![false; x.n()],
        scratch: Vec::with_capacity(n_rows),
        grad,
        hess,
        params,
    };
    let root = builder.grow(0, n_rows, 0);
    RegressionTree::from_root(root)
}

/// Fits a single regression tree to gradient statistics on the given rows.
pub fn fit_tree(
    x: &DataMatrix,
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    params: &BoostParams,
    stream: RngStream,
) -> RegressionTree {
    let presorted = presort(x);
    let mut in_rows = vec![false; x.n()];
    for &r in rows {
        in_rows[r] = true;
    }
    fit_tree_presorted(x, &presorted, &in_rows, grad, hess, params, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_names;
    use rand::Rng;

    fn params() -> BoostParams {
        BoostParams {
            gamma: 0.0,
            lambda: 0.0,
            alpha: 0.0,
            min_child_weight: 1.0,
            ..BoostParams::default()
        }
    }

    fn column(values: &[f64]) -> DataMatrix {
        DataMatrix::from_columns(vec![values.to_vec()], vec!["x".into()]).unwrap()
    }

    #[test]
    fn separable_split_and_exact_leaf_means() {
        let x = column(&[1.0, 2.0, 3.0, 4.0]);
        let y = [0.0, 0.0, 10.0, 10.0];
        let grad: Vec<f64> = y.iter().map(|v| 0.0 - v).collect();
        let hess = vec![1.0; 4];
        let p = params();
        let s = find_best_split(&x, &[0, 1, 2, 3], &[0], &grad, &hess, &p).unwrap();
        assert_eq!(s.feature, 0);
        assert_eq!(s.threshold, 2.5);
        let tree = fit_tree(&x, &[0, 1, 2, 3], &grad, &hess, &BoostParams { max_depth: 1, ..p }, RngStream::new(0, 0));
        assert_eq!(tree.predict_row(&[1.5]), 0.0);
        assert_eq!(tree.predict_row(&[3.5]), 10.0);
    }

    #[test]
    fn large_gamma_blocks_split() {
        let x = column(&[1.0, 2.0, 3.0, 4.0]);
        let grad = [0.0, 0.0, -10.0, -10.0];
        let hess = [1.0; 4];
        let p = BoostParams { gamma: 1e6, ..params() };
        assert!(find_best_split(&x, &[0, 1, 2, 3], &[0], &grad, &hess, &p).is_none());
    }

    #[test]
    fn leaf_weight_closed_forms() {
        // residuals [1,2,3] from prediction 0: G = -6, H = 3.
        let (g, h) = (-6.0, 3.0);
        assert_eq!(leaf_weight(g, h, 0.0, 0.0), 2.0);
        assert_eq!(leaf_weight(g, h, 3.0, 0.0), 1.0);
        assert_eq!(leaf_weight(g, h, 0.0, 6.0), 0.0);
        let x = column(&[1.0, 2.0, 3.0]);
        let grad = [-1.0, -2.0, -3.0];
        let hess = [1.0; 3];
        for (lambda, alpha, expect) in [(0.0, 0.0, 2.0), (3.0, 0.0, 1.0), (0.0, 6.0, 0.0)] {
            let p = BoostParams { lambda, alpha, gamma: 1e9, ..params() };
            let tree = fit_tree(&x, &[0, 1, 2], &grad, &hess, &p, RngStream::new(0, 0));
            assert!(tree.root.is_leaf());
            assert_eq!(tree.predict_row(&[0.0]), expect);
        }
    }

    #[test]
    fn min_child_weight_respected() {
        let x = column(&[1.0, 2.0, 3.0, 4.0]);
        let grad = [-10.0, 0.0, 0.0, 0.0];
        let hess = [1.0; 4];
        let p = BoostParams { min_child_weight: 2.0, ..params() };
        let s = find_best_split(&x, &[0, 1, 2, 3], &[0], &grad, &hess, &p).unwrap();
        assert_eq!(s.threshold, 2.5);
    }

    #[test]
    fn ties_go_to_lowest_feature() {
        let col = vec![1.0, 2.0, 3.0, 4.0];
        let x = DataMatrix::from_columns(vec![col.clone(), col], default_names("x", 2)).unwrap();
        let grad = [1.0, 1.0, -1.0, -1.0];
        let hess = [1.0; 4];
        let s = find_best_split(&x, &[0, 1, 2, 3], &[1, 0], &grad, &hess, &params()).unwrap();
        assert_eq!(s.feature, 0);
    }

    #[test]
    fn depth_cover_and_leaf_invariants() {
        let mut rng = RngStream::new(7, 0).rng();
        let n = 200;
        let p = 4;
        let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let x = DataMatrix::from_columns(cols, default_names("x", p)).unwrap();
        let grad: Vec<f64> = (0..n).map(|i| (x.get(i, 0) * 6.0).sin() + x.get(i, 1)).collect();
        let hess = vec![1.0; n];
        let prm = BoostParams { max_depth: 3, lambda: 1.0, alpha: 0.1, ..params() };
        let rows: Vec<usize> = (0..n).collect();
        let tree = fit_tree(&x, &rows, &grad, &hess, &prm, RngStream::new(0, 0));
        assert!(tree.depth <= 3);
        assert!(tree.leaf_count() <= 8);
        assert_eq!(tree.root.cover(), n as f64);

        fn check(node: &TreeNode, rows: Vec<usize>, x: &DataMatrix, g: &[f64], h: &[f64], prm: &BoostParams) {
            match node {
                TreeNode::Leaf { weight, cover } => {
                    let gs: f64 = rows.iter().map(|&r| g[r]).sum();
                    let hs: f64 = rows.iter().map(|&r| h[r]).sum();
                    assert!((cover - hs).abs() < 1e-10);
                    assert!((weight - leaf_weight(gs, hs, prm.lambda, prm.alpha)).abs() < 1e-10);
                }
                TreeNode::Split { feature, threshold, cover, left, right, .. } => {
                    assert!((cover - (left.cover() + right.cover())).abs() < 1e-10);
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| x.get(i, *feature) < *threshold);
                    check(left, l, x, g, h, prm);
                    check(right, r, x, g, h, prm);
                }
            }
        }
        check(&tree.root, rows, &x, &grad, &hess, &prm);
    }

    #[test]
    fn column_subsampling_limits_features() {
        let mut rng = RngStream::new(8, 0).rng();
        let n = 100;
        let p = 10;
        let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let x = DataMatrix::from_columns(cols, default_names("x", p)).unwrap();
        let grad: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let hess = vec![1.0; n];
        let prm = BoostParams { max_depth: 4, subsample_cols: 0.2, subsample_rows: 0.5, ..params() };
        let rows: Vec<usize> = (0..n).collect();
        let tree = fit_tree(&x, &rows, &grad, &hess, &prm, RngStream::new(3, 3));
        let mut used = std::collections::BTreeSet::new();
        fn collect(node: &TreeNode, used: &mut std::collections::BTreeSet<usize>) {
            if let TreeNode::Split { feature, left, right, .. } = node {
                used.insert(*feature);
                collect(left, used);
                collect(right, used);
            }
        }
        collect(&tree.root, &mut used);
        assert!(used.len() <= 2);
        assert_eq!(tree.root.cover(), 50.0);
        let again = fit_tree(&x, &rows, &grad, &hess, &prm, RngStream::new(3, 3));
        assert_eq!(tree, again);
    }
}
