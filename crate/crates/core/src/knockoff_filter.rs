//! The knockoff boosted-tree selection pipeline.
//!
//! For each of `q` replicates a knockoff copy `Z` of the design is drawn, a
//! boosted ensemble is fit on `[X, Z]`, and a per-column importance is
//! recorded. `T_j` is the mean importance of `x_j` minus that of `z_j`;
//! features whose `T_j` clears the knockoff+ threshold are selected.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes_opt::{tune, TuneResult};
use crate::boost::{fit_boosted, BoostParams, Objective};
use crate::data::{DataMatrix, Dataset, Task};
use crate::error::{KobtError, Result};
use crate::importance::{
    feature_importance, mean_abs_aggregate, saabas_values, structural_importance, tree_shap_values, Statistic,
};
use crate::knockoff::{KnockoffKind, KnockoffSampler};
use crate::linalg::least_squares;
use crate::rng::RngStream;

/// Serializes `f64::INFINITY` as the string `"inf"`.
pub mod inf_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct FilterConfig {
    pub q: usize,
    pub delta: f64,
    pub statistic: Statistic,
    pub knockoff: KnockoffKind,
    pub boost: BoostParams,
    /// Tune `(gamma, lambda, alpha)` once on `X` before the replicates.
    pub tune_penalties: bool,
    pub cv_folds: usize,
    pub tune_init: usize,
    pub tune_iter: usize,
    pub master_seed: u64,
    /// Randomly exchange each `(x_j, z_j)` column pair before fitting.
    pub swap_pairs: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            q: 20,
            delta: 0.1,
            statistic: Statistic::Shap,
            knockoff: KnockoffKind::ShrunkGaussian,
            boost: BoostParams::default(),
            tune_penalties: false,
            cv_folds: 10,
            tune_init: 10,
            tune_iter: 20,
            master_seed: 0,
            swap_pairs: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q < 1 {
            return Err(KobtError::invalid("q", "need at least one replicate"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(KobtError::invalid("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        if self.tune_penalties {
            if self.cv_folds < 2 {
                return Err(KobtError::invalid("cv_folds", "need at least 2 folds"));
            }
            if self.tune_init < 1 {
                return Err(KobtError::invalid("tune_init", "need at least one initial point"));
            }
        }
        self.knockoff.validate()?;
        self.boost.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoffStats {
    pub names: Vec<String>,
    pub mean_abs_orig: Vec<f64>,
    pub mean_abs_knock: Vec<f64>,
    pub t: Vec<f64>,
    pub replicates_used: usize,
    /// Replicates whose fit produced no splits and so contributed zeros.
    pub degenerate_replicates: usize,
}

impl KnockoffStats {
    fn finalize(names: Vec<String>, sum_orig: Vec<f64>, sum_knock: Vec<f64>, q: usize, degenerate: usize) -> Self {
        let mean_abs_orig: Vec<f64> = sum_orig.iter().map(|s| s / q as f64).collect();
        let mean_abs_knock: Vec<f64> = sum_knock.iter().map(|s| s / q as f64).collect();
        let t = mean_abs_orig.iter().zip(&mean_abs_knock).map(|(a, b)| a - b).collect();
        Self {
            names,
            mean_abs_orig,
            mean_abs_knock,
            t,
            replicates_used: q,
            degenerate_replicates: degenerate,
        }
    }
}

/// `y0 - W b` with `b` the least-squares coefficients on `[1, W]`. The
/// intercept is not added when `W` already has a constant column.
pub fn residualize_covariates(y0: &[f64], w: &DataMatrix) -> Result<Vec<f64>> {
    if w.n() != y0.len() {
        return Err(KobtError::Shape(format!(
            "covariates have {} rows, response has {}",
            w.n(),
            y0.len()
        )));
    }
    let has_constant = w.columns().any(|c| c.iter().all(|&v| v == c[0]) && c[0] != 0.0);
    let extra = usize::from(!has_constant);
    let n = w.n();
    let a = DMatrix::from_fn(n, w.p() + extra, |i, j| {
        if j < extra {
            1.0
        } else {
            w.get(i, j - extra)
        }
    });
    let b = DVector::from_column_slice(y0);
    let coef = least_squares(&a, &b)?;
    let fitted = &a * coef;
    Ok(y0.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect())
}

fn fit_params(config: &FilterConfig, task: Task) -> BoostParams {
    let mut params = config.boost.clone();
    params.objective = match task {
        Task::Regression => Objective::SquaredError,
        Task::BinaryClassification => Objective::Logistic,
    };
    params
}

const KNOCKOFF_STREAM: u64 = 0;
const SWAP_STREAM: u64 = 1;
const FIT_STREAM: u64 = 2;
const TUNE_STREAM: u64 = 0;

/// Stream used to tune penalties once before the replicates run.
pub fn tuning_stream(master_seed: u64) -> RngStream {
    RngStream::new(master_seed, 0).child(TUNE_STREAM)
}

/// Stream of replicate `m` (1-based).
pub fn replicate_stream(master_seed: u64, m: usize) -> RngStream {
    RngStream::new(master_seed, m as u64)
}

/// Importances for one replicate, split into original and knockoff halves.
struct ReplicateImportance {
    orig: Vec<Vec<f64>>,
    knock: Vec<Vec<f64>>,
    degenerate: bool,
}

fn run_replicate(
    dataset: &Dataset,
    sampler: &KnockoffSampler,
    params: &BoostParams,
    statistics: &[Statistic],
    swap_pairs: bool,
    stream: RngStream,
) -> Result<ReplicateImportance> {
    let x = &dataset.x;
    let p = x.p();
    let knock = sampler.sample(stream.child(KNOCKOFF_STREAM))?;
    let swapped: Vec<bool> = if swap_pairs {
        let mut rng = stream.child(SWAP_STREAM).rng();
        (0..p).map(|_| rng.gen::<bool>()).collect()
    } else {
        vec![false; p]
    };
    let mut values = Vec::with_capacity(2 * x.n() * p);
    let mut names = Vec::with_capacity(2 * p);
    for half in 0..2 {
        for j in 0..p {
            let from_knockoff = (half == 1) != swapped[j];
            let (src, name) = if from_knockoff {
                (knock.z.col(j), &knock.z.column_names()[j])
            } else {
                (x.col(j), &x.column_names()[j])
            };
            values.extend_from_slice(src);
            names.push(name.clone());
        }
    }
    let combined = DataMatrix::new(x.n(), 2 * p, values, names)?;
    let fit_set = Dataset::new(combined, dataset.y.clone(), None, dataset.task)?;
    let model = fit_boosted(&fit_set, params, stream.child(FIT_STREAM), None)?;
    let freq = structural_importance(&model, Statistic::Frequency)?;
    let degenerate = freq.values.iter().all(|&v| v == 0.0);
    let shap = if statistics.contains(&Statistic::Shap) {
        Some(mean_abs_aggregate(&tree_shap_values(&model, &fit_set.x)?))
    } else {
        None
    };
    let saabas = if statistics.contains(&Statistic::Saabas) {
        Some(mean_abs_aggregate(&saabas_values(&model, &fit_set.x)?))
    } else {
        None
    };
    let mut orig = Vec::with_capacity(statistics.len());
    let mut knock_imp = Vec::with_capacity(statistics.len());
    for stat in statistics {
        let v = match stat {
            Statistic::Shap => shap.clone().expect("computed above").values,
            Statistic::Saabas => saabas.clone().expect("computed above").values,
            Statistic::Frequency => freq.values.clone(),
            other => feature_importance(&model, &fit_set.x, *other)?.values,
        };
        let (mut o, mut k) = (vec![0.0; p], vec![0.0; p]);
        for j in 0..p {
            let (a, b) = (v[j].abs(), v[p + j].abs());
            if swapped[j] {
                o[j] = b;
                k[j] = a;
            } else {
                o[j] = a;
                k[j] = b;
            }
        }
        orig.push(o);
        knock_imp.push(k);
    }
    Ok(ReplicateImportance {
        orig,
        knock: knock_imp,
        degenerate,
    })
}

/// Knockoff statistics for several importance measures computed from the
/// same replicate fits. `params` are used as given (no tuning).
pub fn accumulate_with_params(
    dataset: &Dataset,
    config: &FilterConfig,
    params: &BoostParams,
    statistics: &[Statistic],
) -> Result<Vec<KnockoffStats>> {
    config.validate()?;
    params.validate()?;
    let sampler = KnockoffSampler::prepare(&dataset.x, &config.knockoff)?;
    let reps: Vec<Result<ReplicateImportance>> = (1..=config.q)
        .into_par_iter()
        .map(|m| {
            run_replicate(
                dataset,
                &sampler,
                params,
                statistics,
                config.swap_pairs,
                replicate_stream(config.master_seed, m),
            )
        })
        .collect();
    let p = dataset.x.p();
    let mut sum_orig = vec![vec![0.0; p]; statistics.len()];
    let mut sum_knock = vec![vec![0.0; p]; statistics.len()];
    let mut degenerate = 0;
    // Fixed-order reduction over replicates.
    for rep in reps {
        let rep = rep?;
        degenerate += usize::from(rep.degenerate);
        for s in 0..statistics.len() {
            for j in 0..p {
                sum_orig[s][j] += rep.orig[s][j];
                sum_knock[s][j] += rep.knock[s][j];
            }
        }
    }
    Ok(sum_orig
        .into_iter()
        .zip(sum_knock)
        .map(|(o, k)| KnockoffStats::finalize(dataset.x.column_names().to_vec(), o, k, config.q, degenerate))
        .collect())
}

/// Tunes the penalties on `X` alone when requested; the result is shared by
/// every replicate.
pub fn resolve_params(dataset: &Dataset, config: &FilterConfig) -> Result<(BoostParams, Option<TuneResult>)> {
    let params = fit_params(config, dataset.task);
    if !config.tune_penalties {
        return Ok((params, None));
    }
    let tuned = tune(
        dataset,
        &params,
        config.tune_init,
        config.tune_iter,
        config.cv_folds,
        tuning_stream(config.master_seed),
    )?;
    Ok((tuned.best.apply(&params), Some(tuned)))
}

/// Knockoff statistics for the configured importance measure.
pub fn accumulate_statistics(dataset: &Dataset, config: &FilterConfig) -> Result<KnockoffStats> {
    config.validate()?;
    let (params, _) = resolve_params(dataset, config)?;
    let mut all = accumulate_with_params(dataset, config, &params, &[config.statistic])?;
    Ok(all.remove(0))
}

/// `min(#{T_j <= -t} / max(#{T_j >= t}, 1), 1)`.
pub fn fdp_hat(t_values: &[f64], t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(KobtError::invalid("t", format!("must be > 0, got {t}")));
    }
    let (neg, pos) = tail_counts(t_values, t);
    Ok((neg as f64 / pos.max(1) as f64).min(1.0))
}

fn tail_counts(t_values: &[f64], t: f64) -> (usize, usize) {
    let neg = t_values.iter().filter(|&&v| v <= -t).count();
    let pos = t_values.iter().filter(|&&v| v >= t).count();
    (neg, pos)
}

/// Unique positive `|T_j|`, ascending.
pub fn threshold_candidates(t_values: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = t_values.iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Knockoff+ threshold: the smallest candidate `t` with
/// `(#{T_j <= -t} + 1) / max(#{T_j >= t}, 1) <= delta`, or infinity.
pub fn knockoff_threshold(t_values: &[f64], delta: f64) -> f64 {
    for t in threshold_candidates(t_values) {
        let (neg, pos) = tail_counts(t_values, t);
        if (neg as f64 + 1.0) / pos.max(1) as f64 <= delta {
            return t;
        }
    }
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdpPoint {
    pub t: f64,
    pub fdp_hat: f64,
    /// The knockoff+ estimate compared against `delta`.
    pub fdp_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    /// Replicate `m` uses stream `(master_seed, m)` for `m = 1..=q`.
    pub replicate_streams: Vec<u64>,
    pub residualized: bool,
    pub params: BoostParams,
    pub tuning: Option<TuneResult>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    #[serde(with = "inf_f64")]
    pub tau: f64,
    pub delta: f64,
    pub selected: Vec<usize>,
    pub selected_names: Vec<String>,
    pub fdp_path: Vec<FdpPoint>,
    pub stats: KnockoffStats,
    pub provenance: Option<Provenance>,
}

/// Applies the knockoff+ threshold to finalized statistics.
pub fn select(stats: &KnockoffStats, delta: f64) -> Result<SelectionResult> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(KobtError::invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    let tau = knockoff_threshold(&stats.t, delta);
    let selected: Vec<usize> = if tau.is_finite() {
        (0..stats.t.len()).filter(|&j| stats.t[j] >= tau).collect()
    } else {
        Vec::new()
    };
    let fdp_path = threshold_candidates(&stats.t)
        .into_iter()
        .map(|t| {
            let (neg, pos) = tail_counts(&stats.t, t);
            FdpPoint {
                t,
                fdp_hat: (neg as f64 / pos.max(1) as f64).min(1.0),
                fdp_plus: (neg as f64 + 1.0) / pos.max(1) as f64,
            }
        })
        .collect();
    Ok(SelectionResult {
        tau,
        delta,
        selected_names: selected.iter().map(|&j| stats.names[j].clone()).collect(),
        selected,
        fdp_path,
        stats: stats.clone(),
        provenance: None,
    })
}

/// The full pipeline: covariate residualization for regression tasks,
/// optional tuning, replicate accumulation and selection.
pub fn run_kobt(dataset: &Dataset, config: &FilterConfig) -> Result<SelectionResult> {
    config.validate()?;
    let mut data = dataset.clone();
    let mut residualized = false;
    if let Some(w) = &dataset.w {
        if dataset.task == Task::Regression {
            data.y = residualize_covariates(&dataset.y, w)?;
            residualized = true;
        }
    }
    data.w = None;
    let (params, tuning) = resolve_params(&data, config)?;
    let stats = accumulate_with_params(&data, config, &params, &[config.statistic])?.remove(0);
    let mut result = select(&stats, config.delta)?;
    result.provenance = Some(Provenance {
        config_hash: config.hash(),
        master_seed: config.master_seed,
        replicate_streams: (1..=config.q as u64).collect(),
        residualized,
        params,
        tuning,
        version: crate::VERSION.to_string(),
    });
    Ok(result)
}
