//! Gaussian-process Bayesian optimization of the penalty triple
//! `(gamma, lambda, alpha)` over `[0, 20]^3`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::boost::{cross_validate, BoostParams};
use crate::data::Dataset;
use crate::error::{KobtError, Result};
use crate::rng::RngStream;

pub const UPPER_BOUND: f64 = 20.0;
pub const LENGTH_SCALES: [f64; 3] = [0.1, 0.3, 1.0];
pub const JITTER: f64 = 1e-6;
pub const EI_XI: f64 = 0.01;
pub const NUM_CANDIDATES: usize = 1024;
pub const NUM_LOCAL_CANDIDATES: usize = 64;
const LOCAL_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl HyperPoint {
    pub fn new(gamma: f64, lambda: f64, alpha: f64) -> Result<Self> {
        let p = Self { gamma, lambda, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(0.0..=UPPER_BOUND).contains(&v) {
                return Err(KobtError::invalid(name, format!("{v} outside [0, {UPPER_BOUND}]")));
            }
        }
        Ok(())
    }

    /// Coordinates scaled to the unit cube.
    pub fn to_unit(&self) -> [f64; 3] {
        [self.gamma / UPPER_BOUND, self.lambda / UPPER_BOUND, self.alpha / UPPER_BOUND]
    }

    pub fn from_unit(u: [f64; 3]) -> Self {
        let c = |v: f64| (v.clamp(0.0, 1.0) * UPPER_BOUND).clamp(0.0, UPPER_BOUND);
        Self {
            gamma: c(u[0]),
            lambda: c(u[1]),
            alpha: c(u[2]),
        }
    }

    pub fn apply(&self, base: &BoostParams) -> BoostParams {
        BoostParams {
            gamma: self.gamma,
            lambda: self.lambda,
            alpha: self.alpha,
            ..base.clone()
        }
    }
}

fn matern52(r: f64, length_scale: f64) -> f64 {
    let s = 5f64.sqrt() * r / length_scale;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fitted GP posterior over normalized inputs and standardized outputs.
#[derive(Debug, Clone)]
pub struct Surrogate {
    /// Distinct observed points; duplicates are averaged.
    pub observations: Vec<(HyperPoint, f64)>,
    pub length_scale: f64,
    /// Zero when all observations are equal.
    pub signal_variance: f64,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
    inputs: Vec<[f64; 3]>,
    y_mean: f64,
    y_scale: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
}

impl Surrogate {
    fn kernel(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        self.signal_variance * matern52(distance(a, b), self.length_scale)
    }

    /// Posterior mean and variance in standardized output units.
    fn predict_standardized(&self, u: &[f64; 3]) -> (f64, f64) {
        if self.signal_variance == 0.0 {
            return (0.0, 0.0);
        }
        let k = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|x| self.kernel(x, u)));
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .solve_lower_triangular(&k)
            .expect("Cholesky factor has a non-zero diagonal");
        let var = (self.signal_variance - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Posterior mean and variance on the observation scale.
    pub fn predict(&self, point: &HyperPoint) -> (f64, f64) {
        let (m, v) = self.predict_standardized(&point.to_unit());
        (self.y_mean + self.y_scale * m, self.y_scale * self.y_scale * v)
    }

    fn best_standardized(&self) -> f64 {
        self.observations
            .iter()
            .map(|(_, y)| (y - self.y_mean) / self.y_scale)
            .fold(f64::INFINITY, f64::min)
    }

    /// Expected improvement over the incumbent for minimization, in
    /// standardized units with margin `EI_XI`.
    pub fn expected_improvement(&self, point: &HyperPoint) -> f64 {
        let (m, var) = self.predict_standardized(&point.to_unit());
        if var <= 0.0 {
            return 0.0;
        }
        let sd = var.sqrt();
        let imp = self.best_standardized() - m - EI_XI;
        let z = imp / sd;
        let n = StdNormal::standard();
        (imp * n.cdf(z) + sd * n.pdf(z)).max(0.0)
    }

    pub fn incumbent(&self) -> (HyperPoint, f64) {
        let mut best = self.observations[0];
        for &o in &self.observations[1..] {
            if o.1 < best.1 {
                best = o;
            }
        }
        best
    }
}

fn merge_duplicates(observations: &[(HyperPoint, f64)]) -> Vec<(HyperPoint, f64)> {
    let mut merged: Vec<(HyperPoint, f64, usize)> = Vec::new();
    for &(p, y) in observations {
        match merged.iter_mut().find(|(q, _, _)| *q == p) {
            Some(entry) => {
                entry.1 += y;
                entry.2 += 1;
            }
            None => merged.push((p, y, 1)),
        }
    }
    merged.into_iter().map(|(p, s, c)| (p, s / c as f64)).collect()
}

struct GpFit {
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
}

fn fit_gp(inputs: &[[f64; 3]], y: &DVector<f64>, length_scale: f64, signal: f64) -> Option<GpFit> {
    let n = inputs.len();
    let mut jitter = JITTER;
    while jitter <= 1e-2 {
        let k = DMatrix::from_fn(n, n, |i, j| {
            signal * matern52(distance(&inputs[i], &inputs[j]), length_scale) + if i == j { jitter } else { 0.0 }
        });
        if let Some(c) = k.cholesky() {
            let alpha = c.solve(y);
            let l = c.l();
            let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
            let lml = -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Some(GpFit { chol: l, alpha, jitter, lml });
        }
        jitter *= 10.0;
    }
    None
}

/// Fits the GP surrogate. The shared length scale is the grid value with
/// the highest marginal likelihood (smallest on ties).
pub fn fit_surrogate(observations: &[(HyperPoint, f64)]) -> Result<Surrogate> {
    for (p, y) in observations {
        p.validate()?;
        if !y.is_finite() {
            return Err(KobtError::Numerical(format!("non-finite observation {y}")));
        }
    }
    let obs = merge_duplicates(observations);
    if obs.len() < 2 {
        return Err(KobtError::invalid(
            "observations",
            "need at least 2 distinct points to fit the surrogate",
        ));
    }
    let n = obs.len();
    let inputs: Vec<[f64; 3]> = obs.iter().map(|(p, _)| p.to_unit()).collect();
    let y_mean = obs.iter().map(|o| o.1).sum::<f64>() / n as f64;
    let var = obs.iter().map(|o| (o.1 - y_mean).powi(2)).sum::<f64>() / n as f64;
    let constant = var == 0.0;
    let y_scale = if constant { 1.0 } else { var.sqrt() };
    let signal = if constant { 0.0 } else { 1.0 };
    let y = DVector::from_iterator(n, obs.iter().map(|o| (o.1 - y_mean) / y_scale));
    let mut best: Option<(f64, GpFit)> = None;
    for &ls in &LENGTH_SCALES {
        if let Some(fit) = fit_gp(&inputs, &y, ls, signal) {
            if best.as_ref().is_none_or(|(_, b)| fit.lml > b.lml) {
                best = Some((ls, fit));
            }
        }
    }
    let (length_scale, fit) =
        best.ok_or_else(|| KobtError::Numerical("surrogate kernel matrix is not positive definite".into()))?;
    Ok(Surrogate {
        observations: obs,
        length_scale,
        signal_variance: signal,
        jitter: fit.jitter,
        log_marginal_likelihood: fit.lml,
        inputs,
        y_mean,
        y_scale,
        chol: fit.chol,
        alpha: fit.alpha,
    })
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// `count` points of the 3-d Halton sequence with a random toroidal shift.
pub fn shifted_halton(count: usize, stream: RngStream) -> Vec<[f64; 3]> {
    let mut rng = stream.rng();
    let shift: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    (1..=count as u64)
        .map(|i| {
            let mut u = [radical_inverse(i, 2), radical_inverse(i, 3), radical_inverse(i, 5)];
            for (v, s) in u.iter_mut().zip(shift) {
                *v = (*v + s).fract();
            }
            u
        })
        .collect()
}

/// Maximizes expected improvement over quasi-random candidates followed by
/// Gaussian perturbations of the incumbent. The first candidate wins ties,
/// so a posterior with zero variance everywhere returns candidate 0.
pub fn propose_next(surrogate: &Surrogate, stream: RngStream) -> HyperPoint {
    let mut candidates: Vec<HyperPoint> = shifted_halton(NUM_CANDIDATES, stream.child(0))
        .into_iter()
        .map(HyperPoint::from_unit)
        .collect();
    let (inc, _) = surrogate.incumbent();
    let u = inc.to_unit();
    let mut rng = stream.child(1).rng();
    let step = Normal::new(0.0, LOCAL_STEP).expect("valid step");
    for _ in 0..NUM_LOCAL_CANDIDATES {
        let mut v = u;
        v.iter_mut().for_each(|c| *c += step.sample(&mut rng));
        candidates.push(HyperPoint::from_unit(v));
    }
    let scores: Vec<f64> = candidates.par_iter().map(|c| surrogate.expected_improvement(c)).collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    candidates[best]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Acquisition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub point: HyperPoint,
    pub cvte: f64,
    pub stage: Stage,
    /// Logical clock: position in evaluation order.
    pub timestamp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: HyperPoint,
    pub cvte: f64,
    pub history: Vec<Evaluation>,
}

impl TuneResult {
    /// Position of the incumbent in the history (earliest on ties).
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, e) in self.history.iter().enumerate() {
            if e.cvte < self.history[best].cvte {
                best = i;
            }
        }
        best
    }
}

/// Minimizes `objective` over the cube: `n_init` shifted-Halton points,
/// then `n_iter` surrogate-guided proposals.
pub fn minimize<F>(objective: F, n_init: usize, n_iter: usize, stream: RngStream) -> Result<TuneResult>
where
    F: Fn(&HyperPoint) -> Result<f64> + Sync,
{
    if n_init < 1 {
        return Err(KobtError::invalid("n_init", "need at least one initial point"));
    }
    let init: Vec<HyperPoint> = shifted_halton(n_init, stream.child(0))
        .into_iter()
        .map(HyperPoint::from_unit)
        .collect();
    let values: Vec<Result<f64>> = init.par_iter().map(&objective).collect();
    let mut history = Vec::with_capacity(n_init + n_iter);
    for (point, v) in init.into_iter().zip(values) {
        history.push(Evaluation {
            point,
            cvte: v?,
            stage: Stage::Initial,
            timestamp: history.len(),
        });
    }
    for it in 0..n_iter {
        let observations: Vec<(HyperPoint, f64)> = history.iter().map(|e| (e.point, e.cvte)).collect();
        let round = stream.child2(1, it as u64);
        let point = match fit_surrogate(&observations) {
            Ok(s) => propose_next(&s, round),
            // Too few distinct points for a surrogate: explore at random.
            Err(e) if e.is_validation() => {
                let mut rng = round.rng();
                HyperPoint::from_unit([rng.gen(), rng.gen(), rng.gen()])
            }
            Err(e) => return Err(e),
        };
        let cvte = objective(&point)?;
        history.push(Evaluation {
            point,
            cvte,
            stage: Stage::Acquisition,
            timestamp: history.len(),
        });
    }
    let mut result = TuneResult {
        best: history[0].point,
        cvte: history[0].cvte,
        history,
    };
    let b = result.best_index();
    result.best = result.history[b].point;
    result.cvte = result.history[b].cvte;
    Ok(result)
}

/// Tunes the penalty triple by cross-validated error. Every evaluation
/// shares one fold assignment so points are compared on the same splits.
pub fn tune(
    dataset: &Dataset,
    base: &BoostParams,
    n_init: usize,
    n_iter: usize,
    k: usize,
    stream: RngStream,
) -> Result<TuneResult> {
    base.validate()?;
    let cv_stream = stream.child(2);
    minimize(
        |p| Ok(cross_validate(dataset, &p.apply(base), k, cv_stream)?.cvte),
        n_init,
        n_iter,
        stream.child(3),
    )
}
