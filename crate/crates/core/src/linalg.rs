use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{KobtError, Result};

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub(crate) struct SortedEigen {
    pub values: Vec<f64>,
    /// Columns are eigenvectors, aligned with `values`.
    pub vectors: DMatrix<f64>,
}

pub(crate) fn sym_eigen(m: &DMatrix<f64>) -> Result<SortedEigen> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(KobtError::Numerical("non-finite entry in symmetric matrix".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let n = m.nrows();
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SortedEigen { values, vectors })
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `V diag(f(w)) V^T`.
pub(crate) fn reconstruct(eig: &SortedEigen, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(eig.vectors.nrows(), eig.vectors.ncols(), |i, k| {
        eig.vectors[(i, k)] * f(eig.values[k])
    });
    symmetrize(&(scaled * eig.vectors.transpose()))
}

/// Least-squares fit via SVD. Errors when the design is numerically rank
/// deficient.
pub(crate) fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() < a.ncols() {
        return Err(KobtError::invalid("w", "more covariate columns than rows"));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * a.nrows() as f64;
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(KobtError::invalid("w", "covariate matrix is rank deficient"));
    }
    svd.solve(b, tol)
        .map_err(|e| KobtError::Numerical(format!("least-squares solve failed: {e}")))
}

/// Leading eigenpairs of a symmetric matrix.
pub(crate) struct TopEigen {
    /// Descending.
    pub values: Vec<f64>,
    /// Columns are unit eigenvectors aligned with `values`.
    pub vectors: DMatrix<f64>,
    /// Number of eigenvalues above `rel_tol` times the largest one.
    pub rank: usize,
}

struct Tridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
    /// Householder vectors acting on indices `k + 1..`, with their `beta`.
    reflectors: Vec<(Vec<f64>, f64)>,
}

fn tridiagonalize(m: &DMatrix<f64>) -> Tridiagonal {
    let n = m.nrows();
    let mut a = symmetrize(m);
    let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
    let mut p = vec![0.0; n];
    for k in 0..n.saturating_sub(2) {
        let lo = k + 1;
        let mut v: Vec<f64> = (lo..n).map(|i| a[(i, k)]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push((v, 0.0));
            continue;
        }
        let alpha = if v[0] > 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            reflectors.push((v, 0.0));
            continue;
        }
        let beta = 2.0 / vv;
        let len = n - lo;
        let data = a.as_mut_slice();
        for (c, pc) in p.iter_mut().enumerate().take(len) {
            let col = &data[(lo + c) * n + lo..(lo + c + 1) * n];
            *pc = beta * col.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        }
        let kk = 0.5 * beta * p[..len].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>();
        p[..len].iter_mut().zip(&v).for_each(|(pr, vr)| *pr -= kk * vr);
        for c in 0..len {
            let (vc, wc) = (v[c], p[c]);
            let col = &mut data[(lo + c) * n + lo..(lo + c + 1) * n];
            for ((x, vr), pr) in col.iter_mut().zip(&v).zip(&p[..len]) {
                *x -= vr * wc + pr * vc;
            }
        }
        a[(lo, k)] = alpha;
        reflectors.push((v, beta));
    }
    Tridiagonal {
        diag: (0..n).map(|i| a[(i, i)]).collect(),
        off: (0..n.saturating_sub(1)).map(|i| a[(i + 1, i)]).collect(),
        reflectors,
    }
}

impl Tridiagonal {
    fn gershgorin_scale(&self) -> f64 {
        let n = self.diag.len();
        (0..n)
            .map(|i| {
                let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + if i + 1 < n { self.off[i].abs() } else { 0.0 };
                self.diag[i].abs() + r
            })
            .fold(f64::MIN_POSITIVE, f64::max)
    }

    /// All eigenvalues by implicit QL, values only, descending.
    fn eigenvalues(&self) -> Result<Vec<f64>> {
        let n = self.diag.len();
        let mut d = self.diag.clone();
        let mut e = vec![0.0; n];
        e[..n - 1].copy_from_slice(&self.off);
        for l in 0..n {
            let mut iter = 0;
            loop {
                let mut m = l;
                while m + 1 < n {
                    let dd = d[m].abs() + d[m + 1].abs();
                    if e[m].abs() <= f64::EPSILON * dd {
                        break;
                    }
                    m += 1;
                }
                if m == l {
                    break;
                }
                iter += 1;
                if iter > 60 {
                    return Err(KobtError::Numerical("tridiagonal QL did not converge".into()));
                }
                let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
                let mut r = (g * g + 1.0).sqrt();
                g = d[m] - d[l] + e[l] / (g + r.copysign(g));
                let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
                let mut i = m;
                let mut deflated = false;
                while i > l {
                    i -= 1;
                    let f = s * e[i];
                    let b = c * e[i];
                    r = (f * f + g * g).sqrt();
                    e[i + 1] = r;
                    if r == 0.0 {
                        d[i + 1] -= p;
                        e[m] = 0.0;
                        deflated = true;
                        break;
                    }
                    s = f / r;
                    c = g / r;
                    g = d[i + 1] - p;
                    r = (d[i] - g) * s + 2.0 * c * b;
                    p = s * r;
                    d[i + 1] = g + p;
                    g = c * r - b;
                }
                if deflated {
                    continue;
                }
                d[l] -= p;
                e[l] = g;
                e[m] = 0.0;
            }
        }
        d.sort_by(|a, b| b.total_cmp(a));
        Ok(d)
    }

    /// Solves `(T - shift I) y = b` in place by LU with partial pivoting.
    fn shifted_solve(&self, shift: f64, b: &mut [f64], tiny: f64) {
        let n = self.diag.len();
        let mut d: Vec<f64> = self.diag.iter().map(|v| v - shift).collect();
        let mut dl = self.off.clone();
        let mut du = self.off.clone();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        let guard = |v: &mut f64| {
            if v.abs() < tiny {
                *v = if *v < 0.0 { -tiny } else { tiny };
            }
        };
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                guard(&mut d[i]);
                let fact = dl[i] / d[i];
                dl[i] = fact;
                d[i + 1] -= fact * du[i];
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -fact;
                }
                swapped[i] = true;
            }
        }
        guard(&mut d[n - 1]);
        for i in 0..n.saturating_sub(1) {
            if swapped[i] {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - dl[i] * b[i];
            } else {
                b[i + 1] -= dl[i] * b[i];
            }
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            if i + 1 < n {
                s -= du[i] * b[i + 1];
            }
            if i + 2 < n {
                s -= du2[i] * b[i + 2];
            }
            b[i] = s / d[i];
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Top `k` eigenpairs of a symmetric matrix via Householder
/// tridiagonalization, implicit QL and inverse iteration. Much cheaper
/// than a full decomposition when `k` is small. At most `rank` pairs are
/// returned.
pub(crate) fn top_eigen(m: &DMatrix<f64>, k: usize, rel_tol: f64) -> Result<TopEigen> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(KobtError::Numerical("non-finite entry in symmetric matrix".into()));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(TopEigen { values: vec![], vectors: DMatrix::zeros(0, 0), rank: 0 });
    }
    let tri = tridiagonalize(m);
    let all = tri.eigenvalues()?;
    let top = all[0];
    let rank = if top > 0.0 { all.iter().filter(|&&w| w > top * rel_tol && w > 0.0).count() } else { 0 };
    let count = k.min(rank);
    let scale = tri.gershgorin_scale();
    let tiny = f64::EPSILON * scale;
    // Vectors of eigenvalues this close are explicitly reorthogonalized.
    let cluster = 1e-3 * scale;
    let mut values: Vec<f64> = Vec::with_capacity(count);
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(count);
    // Deterministic start vectors with no special structure.
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    let mut next_start = || -> Vec<f64> {
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    };
    for &lambda in all.iter().take(count) {
        let mut y = Vec::new();
        for _attempt in 0..3 {
            y = next_start();
            let mut alive = true;
            for _ in 0..3 {
                tri.shifted_solve(lambda, &mut y, tiny);
                for _ in 0..2 {
                    for (f, _) in found.iter().zip(&values).filter(|(_, &w)| (w - lambda).abs() <= cluster) {
                        let c: f64 = f.iter().zip(&y).map(|(a, b)| a * b).sum();
                        y.iter_mut().zip(f).for_each(|(yi, fi)| *yi -= c * fi);
                    }
                }
                if !(normalize(&mut y) > 0.0) {
                    alive = false;
                    break;
                }
            }
            if alive {
                break;
            }
            y.clear();
        }
        if y.is_empty() {
            return Err(KobtError::Numerical("inverse iteration collapsed".into()));
        }
        values.push(lambda);
        found.push(y);
    }
    let mut vectors = DMatrix::zeros(n, count);
    for (c, y) in found.iter().enumerate() {
        let mut v = y.clone();
        for (k_idx, (h, beta)) in tri.reflectors.iter().enumerate().rev() {
            if *beta == 0.0 {
                continue;
            }
            let lo = k_idx + 1;
            let dot: f64 = h.iter().zip(&v[lo..]).map(|(a, b)| a * b).sum();
            v[lo..].iter_mut().zip(h).for_each(|(vi, hi)| *vi -= beta * dot * hi);
        }
        vectors.set_column(c, &DVector::from_vec(v));
    }
    Ok(TopEigen { values, vectors, rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_gram(n: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::RngStream::new(seed, 0).rng();
        let a = DMatrix::from_fn(n, cols, |_, _| rng.gen::<f64>() - 0.5);
        &a * a.transpose()
    }

    #[test]
    fn top_eigen_matches_full_decomposition() {
        for (seed, (n, cols, k)) in [(20, 40, 5), (30, 10, 8), (50, 120, 30), (7, 7, 7), (2, 3, 1)].into_iter().enumerate() {
            let g = random_gram(n, cols, seed as u64);
            let full = sym_eigen(&g).unwrap();
            let top = top_eigen(&g, k, 1e-10).unwrap();
            let full_rank = full.values.iter().filter(|&&w| w > full.values[n - 1] * 1e-10 && w > 0.0).count();
            assert_eq!(top.rank, full_rank);
            assert_eq!(top.values.len(), k.min(full_rank));
            for (c, &w) in top.values.iter().enumerate() {
                let want = full.values[n - 1 - c];
                assert!((w - want).abs() <= 1e-10 * full.values[n - 1], "value {c}: {w} vs {want}");
                let u = top.vectors.column(c);
                let resid = (&g * u - u * w).norm();
                assert!(resid < 1e-9 * full.values[n - 1], "residual {resid}");
            }
            let gram = top.vectors.transpose() * &top.vectors;
            assert!((gram - DMatrix::identity(top.values.len(), top.values.len())).amax() < 1e-10);
        }
    }

    #[test]
    fn top_eigen_handles_rank_deficiency_and_repeats() {
        let g = random_gram(30, 6, 9);
        let top = top_eigen(&g, 10, 1e-10).unwrap();
        assert_eq!(top.rank, 6);
        assert_eq!(top.values.len(), 6);
        let id = DMatrix::<f64>::identity(5, 5) * 2.0;
        let top = top_eigen(&id, 3, 1e-10).unwrap();
        assert!(top.values.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let gram = top.vectors.transpose() * &top.vectors;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
    }
}
