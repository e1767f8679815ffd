//! Model-X knockoff construction and knockoff quality metrics.
//!
//! Three samplers are provided:
//!
//! * shrunk Gaussian: second-order Gaussian knockoffs from a linear-shrinkage
//!   covariance estimate pulled toward the identity;
//! * sparse Gaussian: the same sampler on a thresholded covariance estimate;
//! * principal-component permutation: a sequential, distribution-free
//!   construction that regresses each column on the leading principal
//!   components of the remaining columns and the knockoffs built so far, then
//!   permutes the residuals.
//!
//! All samplers work on the standardized scale and map their output back to
//! the original column means and standard deviations.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{standardize_columns, DataMatrix, Standardization};
use crate::error::{KobtError, Result};
use crate::linalg::{reconstruct, sym_eigen, top_eigen, SortedEigen};
use crate::rng::RngStream;

/// Smallest eigenvalue allowed in any covariance estimate.
pub const EIGEN_FLOOR: f64 = 1e-8;

const STANDARDIZED_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMethod {
    Shrunk,
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma: DMatrix<f64>,
    pub method: CovarianceMethod,
    /// Linear shrinkage weight on the identity (0 for the sparse estimator).
    pub shrinkage_intensity: f64,
    pub min_eigenvalue: f64,
    /// Off-diagonal threshold used by the sparse estimator.
    pub threshold: Option<f64>,
}

impl CovarianceEstimate {
    pub fn p(&self) -> usize {
        self.sigma.nrows()
    }
}

/// How off-diagonal sample covariances are thresholded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum ThresholdRule {
    /// Keep entries with `|s| > t` unchanged, zero the rest.
    #[default]
    Hard,
    /// `sign(s) * max(|s| - t, 0)`.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum KnockoffKind {
    ShrunkGaussian,
    SparseGaussian {
        /// Off-diagonal threshold; `None` uses the universal `sqrt(ln p / n)`.
        #[serde(default)]
        threshold: Option<f64>,
        #[serde(default)]
        rule: ThresholdRule,
    },
    PcPermute {
        num_pcs: usize,
    },
}

impl KnockoffKind {
    pub fn sparse_default() -> Self {
        KnockoffKind::SparseGaussian {
            threshold: None,
            rule: ThresholdRule::Hard,
        }
    }

    /// Short label used in report tables.
    pub fn label(&self) -> String {
        match self {
            KnockoffKind::ShrunkGaussian => "shrunk".into(),
            KnockoffKind::SparseGaussian { .. } => "sparse".into(),
            KnockoffKind::PcPermute { num_pcs } => format!("pc{num_pcs}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KnockoffKind::ShrunkGaussian => Ok(()),
            KnockoffKind::SparseGaussian { threshold, .. } => match threshold {
                Some(t) if !(t.is_finite() && *t >= 0.0) => Err(KobtError::invalid(
                    "knockoff.threshold",
                    format!("must be a finite value >= 0, got {t}"),
                )),
                _ => Ok(()),
            },
            KnockoffKind::PcPermute { num_pcs } if *num_pcs < 1 => {
                Err(KobtError::invalid("knockoff.num_pcs", "must be >= 1"))
            }
            KnockoffKind::PcPermute { .. } => Ok(()),
        }
    }
}

/// Record of principal-component counts clipped during a PC-permute run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PcClipRecord {
    pub requested: usize,
    pub min_used: usize,
    pub clipped_steps: usize,
}

/// Knockoff matrix paired column-for-column with the originals.
#[derive(Debug, Clone, PartialEq)]
pub struct KnockoffSet {
    pub z: DataMatrix,
    pub kind: KnockoffKind,
    pub seed: RngStream,
    pub pc_clip: Option<PcClipRecord>,
}

#[derive(Serialize)]
struct KnockoffSidecar<'a> {
    kind: &'a KnockoffKind,
    seed: RngStream,
    n: usize,
    p: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pc_clip: &'a Option<PcClipRecord>,
}

impl KnockoffSet {
    /// The knockoff matrix as CSV text with a header row.
    pub fn to_csv_string(&self) -> String {
        let mut out = self.z.column_names().join(",");
        out.push('\n');
        for i in 0..self.z.n() {
            let row: Vec<String> = (0..self.z.p())
                .map(|j| crate::data::format_f64(self.z.get(i, j)))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Provenance sidecar: kind, stream, shape and any PC clipping.
    pub fn sidecar_json(&self) -> Result<String> {
        let sidecar = KnockoffSidecar {
            kind: &self.kind,
            seed: self.seed,
            n: self.z.n(),
            p: self.z.p(),
            pc_clip: &self.pc_clip,
        };
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        Ok(json)
    }

    /// Writes the knockoff matrix as CSV and its provenance as a JSON sidecar.
    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv_string()).map_err(|e| KobtError::io(csv_path, e))?;
        std::fs::write(json_path, self.sidecar_json()?).map_err(|e| KobtError::io(json_path, e))
    }
}

fn check_standardized(x: &DataMatrix) -> Result<()> {
    if x.n() < 3 {
        return Err(KobtError::invalid("x", format!("need n >= 3, got {}", x.n())));
    }
    let n = x.n() as f64;
    for (j, col) in x.columns().enumerate() {
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if mean.abs() > STANDARDIZED_TOL || (sd - 1.0).abs() > STANDARDIZED_TOL {
            return Err(KobtError::invalid(
                "x",
                format!(
                    "column '{}' is not standardized (mean {mean:.3e}, sd {sd:.6})",
                    x.column_names()[j]
                ),
            ));
        }
    }
    Ok(())
}

/// `X^T X / (n - 1)` for a centered matrix.
fn sample_covariance(x: &DataMatrix) -> DMatrix<f64> {
    let m = x.to_dmatrix();
    let s = m.transpose() * &m / (x.n() as f64 - 1.0);
    crate::linalg::symmetrize(&s)
}

fn floor_eigenvalues(sigma: DMatrix<f64>) -> Result<(DMatrix<f64>, SortedEigen)> {
    let eig = sym_eigen(&sigma)?;
    if eig.values[0] >= EIGEN_FLOOR {
        return Ok((sigma, eig));
    }
    let repaired = reconstruct(&eig, |w| w.max(EIGEN_FLOOR));
    let eig = sym_eigen(&repaired)?;
    // Reconstruction can land a hair under the floor; the clipped spectrum is
    // what downstream code relies on.
    let eig = SortedEigen {
        values: eig.values.iter().map(|w| w.max(EIGEN_FLOOR)).collect(),
        vectors: eig.vectors,
    };
    Ok((repaired, eig))
}

/// Linear shrinkage toward the identity with the analytic
/// (Ledoit–Wolf) variance-minimizing intensity.
pub fn estimate_shrunk_covariance(x: &DataMatrix) -> Result<CovarianceEstimate> {
    check_standardized(x)?;
    let s = sample_covariance(x);
    let intensity = ledoit_wolf_intensity(x, &s);
    let p = x.p();
    let mut sigma = &s * (1.0 - intensity);
    for i in 0..p {
        sigma[(i, i)] += intensity;
    }
    let (sigma, eig) = floor_eigenvalues(sigma)?;
    Ok(CovarianceEstimate {
        sigma,
        method: CovarianceMethod::Shrunk,
        shrinkage_intensity: intensity,
        min_eigenvalue: eig.values[0],
        threshold: None,
    })
}

/// Shrinkage weight `min(b^2, d^2) / d^2` for the target `mu I`, `mu = tr(S)/p`.
fn ledoit_wolf_intensity(x: &DataMatrix, s: &DMatrix<f64>) -> f64 {
    let n = x.n() as f64;
    let p = x.p();
    let mu = s.trace() / p as f64;
    let s_frob2: f64 = s.iter().map(|v| v * v).sum();
    let d2 = (s_frob2 - 2.0 * mu * s.trace() + mu * mu * p as f64) / p as f64;
    if d2 <= 0.0 {
        return 0.0;
    }
    // sum_k ||x_k x_k^T - S||_F^2 = sum_k ||x_k||^4 - (n - 2) ||S||_F^2 when S = X^T X / (n-1).
    let row_norm4: f64 = (0..x.n())
        .map(|i| {
            let r2: f64 = (0..p).map(|j| x.get(i, j).powi(2)).sum();
            r2 * r2
        })
        .sum();
    let b_bar2 = ((row_norm4 - (n - 2.0) * s_frob2) / (n * n) / p as f64).max(0.0);
    b_bar2.min(d2) / d2
}

/// Thresholds every off-diagonal entry of a symmetric matrix.
pub fn threshold_covariance(s: &DMatrix<f64>, threshold: f64, rule: ThresholdRule) -> DMatrix<f64> {
    let mut out = s.clone();
    let p = s.nrows();
    for j in 0..p {
        for i in 0..p {
            if i == j {
                continue;
            }
            let v = s[(i, j)];
            out[(i, j)] = match rule {
                ThresholdRule::Hard => {
                    if v.abs() > threshold {
                        v
                    } else {
                        0.0
                    }
                }
                ThresholdRule::Soft => v.signum() * (v.abs() - threshold).max(0.0),
            };
        }
    }
    out
}

/// The universal threshold `sqrt(ln p / n)`.
pub fn universal_threshold(n: usize, p: usize) -> f64 {
    ((p as f64).ln() / n as f64).sqrt()
}

/// Sparse covariance: threshold the off-diagonal sample covariances, then
/// repair to positive definite by clipping eigenvalues at [`EIGEN_FLOOR`].
pub fn estimate_sparse_covariance(
    x: &DataMatrix,
    threshold: Option<f64>,
    rule: ThresholdRule,
) -> Result<CovarianceEstimate> {
    check_standardized(x)?;
    let t = threshold.unwrap_or_else(|| universal_threshold(x.n(), x.p()));
    if !(t.is_finite() && t >= 0.0) {
        return Err(KobtError::invalid("threshold", format!("must be >= 0, got {t}")));
    }
    let thresholded = threshold_covariance(&sample_covariance(x), t, rule);
    let (sigma, eig) = floor_eigenvalues(thresholded)?;
    Ok(CovarianceEstimate {
        sigma,
        method: CovarianceMethod::Sparse,
        shrinkage_intensity: 0.0,
        min_eigenvalue: eig.values[0],
        threshold: Some(t),
    })
}

/// Precomputed second-order Gaussian knockoff sampler for one covariance estimate.
///
/// With `s = min(2 lambda_min - 1e-8, 1)` (equicorrelated), each knockoff row is
/// `z = x A + e`, `A = I - Sigma^{-1} diag(s)`, `e ~ N(0, 2 diag(s) - diag(s) Sigma^{-1} diag(s))`.
#[derive(Debug, Clone)]
pub struct GaussianKnockoffSampler {
    transform: DMatrix<f64>,
    noise_factor_t: DMatrix<f64>,
    s: f64,
}

impl GaussianKnockoffSampler {
    pub fn new(cov: &CovarianceEstimate) -> Result<Self> {
        let p = cov.p();
        let eig = sym_eigen(&cov.sigma)?;
        let lambda_min = eig.values[0];
        if lambda_min < EIGEN_FLOOR * 0.5 {
            return Err(KobtError::Numerical(format!(
                "covariance estimate is not positive definite (lambda_min = {lambda_min:e})"
            )));
        }
        let s = (2.0 * lambda_min - EIGEN_FLOOR).clamp(0.0, 1.0);
        let sigma_inv = reconstruct(&eig, |w| 1.0 / w);
        let mut transform = -&sigma_inv * s;
        for i in 0..p {
            transform[(i, i)] += 1.0;
        }
        let mut cond = -&sigma_inv * (s * s);
        for i in 0..p {
            cond[(i, i)] += 2.0 * s;
        }
        let cond_eig = sym_eigen(&cond)?;
        let factor = DMatrix::from_fn(p, p, |i, k| {
            cond_eig.vectors[(i, k)] * cond_eig.values[k].max(0.0).sqrt()
        });
        Ok(Self {
            transform,
            noise_factor_t: factor.transpose(),
            s,
        })
    }

    /// The equicorrelated `s` value shared by every coordinate.
    pub fn s(&self) -> f64 {
        self.s
    }

    /// Samples knockoffs for standardized rows.
    pub fn sample(&self, x_std: &DataMatrix, stream: RngStream) -> Result<DataMatrix> {
        let (n, p) = (x_std.n(), x_std.p());
        if p != self.transform.nrows() {
            return Err(KobtError::Shape(format!(
                "sampler built for p={} but x has p={p}",
                self.transform.nrows()
            )));
        }
        let mut rng = stream.rng();
        let draws: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
        let g = DMatrix::from_row_slice(n, p, &draws);
        let z = x_std.to_dmatrix() * &self.transform + g * &self.noise_factor_t;
        DataMatrix::from_dmatrix(&z, knockoff_names(x_std.column_names()))
    }
}

fn knockoff_names(names: &[String]) -> Vec<String> {
    names.iter().map(|n| format!("{n}_knockoff")).collect()
}

/// Second-order Gaussian knockoffs on the standardized scale.
pub fn sample_gaussian_knockoffs(
    x_std: &DataMatrix,
    cov: &CovarianceEstimate,
    stream: RngStream,
) -> Result<DataMatrix> {
    if cov.p() != x_std.p() {
        return Err(KobtError::Shape(format!(
            "covariance is {}x{} but x has {} columns",
            cov.p(),
            cov.p(),
            x_std.p()
        )));
    }
    GaussianKnockoffSampler::new(cov)?.sample(x_std, stream)
}

/// Principal-component permutation knockoffs on the standardized scale.
///
/// For each column `j`: take the leading `k` principal component scores of
/// `(X_{-j}, Z_{1:j-1})`, regress `x_j` on them with an intercept, and set
/// `z_j = fitted + permute(residuals)`. `k` is clipped to the number of
/// available components (at most `n - 2`) and each clip is recorded.
fn pcc_standardized(
    x_std: &DataMatrix,
    k: usize,
    stream: RngStream,
) -> Result<(DataMatrix, PcClipRecord)> {
    let (n, p) = (x_std.n(), x_std.p());
    let xm = x_std.to_dmatrix();
    // Gram matrix of all columns of X plus the knockoff columns built so far.
    let mut gram = &xm * xm.transpose();
    let mut rng = stream.rng();
    let mut z_values = Vec::with_capacity(n * p);
    let mut record = PcClipRecord {
        requested: k,
        min_used: usize::MAX,
        clipped_steps: 0,
    };
    for j in 0..p {
        let xj = xm.column(j);
        let mut g = gram.clone();
        g.ger(-1.0, &xj, &xj, 1.0);
        let columns_available = p - 1 + j;
        let k_cap = k.min(n - 2).min(columns_available);
        let eig = top_eigen(&g, k_cap, 1e-10)?;
        let k_eff = k_cap.min(eig.rank);
        debug_assert_eq!(eig.values.len(), k_eff);
        if k_eff < k {
            record.clipped_steps += 1;
        }
        record.min_used = record.min_used.min(k_eff);

        let mut fitted = vec![0.0; n];
        for c in 0..k_eff {
            let u = eig.vectors.column(c);
            let coef = u.dot(&xj);
            for i in 0..n {
                fitted[i] += coef * u[i];
            }
        }
        let mut resid: Vec<f64> = (0..n).map(|i| xj[i] - fitted[i]).collect();
        resid.shuffle(&mut rng);
        let zj: Vec<f64> = fitted.iter().zip(&resid).map(|(f, e)| f + e).collect();
        let mean = zj.iter().sum::<f64>() / n as f64;
        let centered = nalgebra::DVector::from_iterator(n, zj.iter().map(|v| v - mean));
        gram.ger(1.0, &centered, &centered, 1.0);
        z_values.extend_from_slice(&zj);
    }
    if record.min_used == usize::MAX {
        record.min_used = k;
    }
    let z = DataMatrix::new(n, p, z_values, knockoff_names(x_std.column_names()))?;
    Ok((z, record))
}

/// Principal-component permutation knockoffs for raw (unstandardized) data.
pub fn sample_pcc_knockoffs(
    x: &DataMatrix,
    k: usize,
    stream: RngStream,
) -> Result<(DataMatrix, PcClipRecord)> {
    if k < 1 {
        return Err(KobtError::invalid("num_pcs", "must be >= 1"));
    }
    if x.n() < 4 {
        return Err(KobtError::invalid("x", format!("need n >= 4, got {}", x.n())));
    }
    if x.p() < 2 {
        return Err(KobtError::invalid("x", "need at least 2 columns"));
    }
    let (x_std, standardization) = standardize_columns(x)?;
    let (z_std, record) = pcc_standardized(&x_std, k, stream)?;
    Ok((standardization.invert(&z_std)?, record))
}

/// A knockoff generator prepared once for a design matrix and reused across
/// replicate draws.
#[derive(Debug, Clone)]
pub struct KnockoffSampler {
    kind: KnockoffKind,
    x_std: DataMatrix,
    standardization: Standardization,
    gaussian: Option<GaussianKnockoffSampler>,
    covariance: Option<CovarianceEstimate>,
}

impl KnockoffSampler {
    pub fn prepare(x: &DataMatrix, kind: &KnockoffKind) -> Result<Self> {
        kind.validate()?;
        let (x_std, standardization) = standardize_columns(x)?;
        let covariance = match kind {
            KnockoffKind::ShrunkGaussian => Some(estimate_shrunk_covariance(&x_std)?),
            KnockoffKind::SparseGaussian { threshold, rule } => {
                Some(estimate_sparse_covariance(&x_std, *threshold, *rule)?)
            }
            KnockoffKind::PcPermute { .. } => {
                if x.n() < 4 {
                    return Err(KobtError::invalid("x", format!("need n >= 4, got {}", x.n())));
                }
                if x.p() < 2 {
                    return Err(KobtError::invalid("x", "need at least 2 columns"));
                }
                None
            }
        };
        let gaussian = covariance.as_ref().map(GaussianKnockoffSampler::new).transpose()?;
        Ok(Self {
            kind: kind.clone(),
            x_std,
            standardization,
            gaussian,
            covariance,
        })
    }

    pub fn kind(&self) -> &KnockoffKind {
        &self.kind
    }

    pub fn covariance(&self) -> Option<&CovarianceEstimate> {
        self.covariance.as_ref()
    }

    /// Draws one knockoff matrix on the original scale.
    pub fn sample(&self, stream: RngStream) -> Result<KnockoffSet> {
        let (z_std, pc_clip) = match (&self.kind, &self.gaussian) {
            (KnockoffKind::PcPermute { num_pcs }, _) => {
                let (z, rec) = pcc_standardized(&self.x_std, *num_pcs, stream)?;
                (z, Some(rec))
            }
            (_, Some(g)) => (g.sample(&self.x_std, stream)?, None),
            _ => unreachable!("gaussian sampler prepared for gaussian kinds"),
        };
        Ok(KnockoffSet {
            z: self.standardization.invert(&z_std)?,
            kind: self.kind.clone(),
            seed: stream,
            pc_clip,
        })
    }
}

/// One-shot knockoff generation.
pub fn generate_knockoffs(x: &DataMatrix, kind: &KnockoffKind, stream: RngStream) -> Result<KnockoffSet> {
    KnockoffSampler::prepare(x, kind)?.sample(stream)
}

/// Mean absolute angle between corresponding columns, in radians.
pub fn maac(a: &DataMatrix, b: &DataMatrix) -> Result<f64> {
    if a.n() != b.n() || a.p() != b.p() {
        return Err(KobtError::Shape(format!(
            "maac needs equal shapes, got {}x{} and {}x{}",
            a.n(),
            a.p(),
            b.n(),
            b.p()
        )));
    }
    let mut total = 0.0;
    for j in 0..a.p() {
        let (ca, cb) = (a.col(j), b.col(j));
        let na = ca.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = cb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(KobtError::invalid("maac", format!("column {j} has zero norm")));
        }
        let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
        total += (dot.abs() / (na * nb)).min(1.0).acos();
    }
    Ok(total / a.p() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmmdResult {
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub bandwidth: f64,
}

/// Gaussian kernel matrix over the pooled rows `[x; z]` with the
/// median-distance bandwidth.
struct PooledKernel {
    k: Vec<f64>,
    m: usize,
    bandwidth: f64,
}

impl PooledKernel {
    fn new(x: &DataMatrix, z: &DataMatrix) -> Result<Self> {
        if x.n() != z.n() || x.p() != z.p() {
            return Err(KobtError::Shape("kmmd needs equal shapes".into()));
        }
        let n = x.n();
        let m = 2 * n;
        let p = x.p();
        let mut rows = vec![0.0; m * p];
        for i in 0..n {
            for j in 0..p {
                rows[i * p + j] = x.get(i, j);
                rows[(n + i) * p + j] = z.get(i, j);
            }
        }
        let mut d2 = vec![0.0; m * m];
        let mut dists = Vec::with_capacity(m * (m - 1) / 2);
        for a in 0..m {
            let ra = &rows[a * p..(a + 1) * p];
            for b in (a + 1)..m {
                let rb = &rows[b * p..(b + 1) * p];
                let d: f64 = ra.iter().zip(rb).map(|(u, v)| (u - v) * (u - v)).sum();
                d2[a * m + b] = d;
                d2[b * m + a] = d;
                dists.push(d.sqrt());
            }
        }
        let mid = dists.len() / 2;
        dists.select_nth_unstable_by(mid, f64::total_cmp);
        let mut median = dists[mid];
        if dists.len() % 2 == 0 {
            let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            median = 0.5 * (median + lower);
        }
        if median <= 0.0 || !median.is_finite() {
            return Err(KobtError::Numerical("degenerate kmmd bandwidth (pooled rows identical)".into()));
        }
        let scale = 1.0 / (2.0 * median * median);
        let k = d2.iter().map(|d| (-d * scale).exp()).collect();
        Ok(Self {
            k,
            m,
            bandwidth: median,
        })
    }

    /// Biased (V-statistic) squared MMD for the split given by `in_first`.
    fn mmd2(&self, in_first: &[bool]) -> f64 {
        let m = self.m;
        let (mut sxx, mut szz, mut sxz) = (0.0, 0.0, 0.0);
        let (mut nx, mut nz) = (0usize, 0usize);
        for a in 0..m {
            if in_first[a] {
                nx += 1;
            } else {
                nz += 1;
            }
            let row = &self.k[a * m..(a + 1) * m];
            for (b, &kv) in row.iter().enumerate() {
                match (in_first[a], in_first[b]) {
                    (true, true) => sxx += kv,
                    (false, false) => szz += kv,
                    (true, false) => sxz += kv,
                    (false, true) => {}
                }
            }
        }
        let (nx, nz) = (nx as f64, nz as f64);
        sxx / (nx * nx) + szz / (nz * nz) - 2.0 * sxz / (nx * nz)
    }
}

/// Squared kernel MMD between the rows of `x` and `z` (biased estimator,
/// Gaussian kernel, median-heuristic bandwidth).
pub fn kmmd_statistic(x: &DataMatrix, z: &DataMatrix) -> Result<f64> {
    let kernel = PooledKernel::new(x, z)?;
    let labels: Vec<bool> = (0..kernel.m).map(|a| a < x.n()).collect();
    Ok(kernel.mmd2(&labels))
}

/// Permutation two-sample test of "rows of `x` and rows of `z` share a distribution".
pub fn kmmd_test(
    x: &DataMatrix,
    z: &DataMatrix,
    num_permutations: usize,
    alpha: f64,
    stream: RngStream,
) -> Result<KmmdResult> {
    if num_permutations < 100 {
        return Err(KobtError::invalid("num_permutations", "must be >= 100"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KobtError::invalid("alpha", "must lie in (0, 1)"));
    }
    let kernel = PooledKernel::new(x, z)?;
    let n = x.n();
    let mut labels: Vec<bool> = (0..kernel.m).map(|a| a < n).collect();
    let statistic = kernel.mmd2(&labels);
    let mut rng = stream.rng();
    let mut null: Vec<f64> = (0..num_permutations)
        .map(|_| {
            labels.shuffle(&mut rng);
            kernel.mmd2(&labels)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * num_permutations as f64).ceil() as usize).clamp(1, num_permutations) - 1;
    let threshold = null[idx];
    Ok(KmmdResult {
        statistic,
        threshold,
        reject: statistic > threshold,
        bandwidth: kernel.bandwidth,
    })
}
