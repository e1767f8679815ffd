//! Simulation designs and experiment protocols: block-correlated Gaussian
//! or Poisson designs, four true-model structures, and drivers for
//! cross-validation error, ranking ratio, power/FDR and knockoff quality.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::boost::{cross_validate, fit_boosted, BoostParams, Booster};
use crate::data::{default_names, standardize_columns, DataMatrix, Dataset, Task};
use crate::error::{KobtError, Result};
use crate::importance::{feature_importance, Statistic};
use crate::knockoff::{kmmd_statistic, maac, KnockoffKind, KnockoffSampler};
use crate::knockoff_filter::{accumulate_with_params, resolve_params, select, FilterConfig};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Family {
    #[default]
    Normal,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Structure {
    #[default]
    Main,
    Interaction,
    Exponential,
    Quadratic,
}

impl Structure {
    pub const ALL: [Structure; 4] = [
        Structure::Main,
        Structure::Interaction,
        Structure::Exponential,
        Structure::Quadratic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Structure::Main => "main",
            Structure::Interaction => "interaction",
            Structure::Exponential => "exponential",
            Structure::Quadratic => "quadratic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub pi: f64,
    pub rho: f64,
    pub strength: f64,
    pub family: Family,
    pub poisson_mean: f64,
    pub structure: Structure,
    pub noise_sd: f64,
    /// Rescale transformed signal columns to mean 0 and unit variance before
    /// forming `y`, so every structure carries the signal variance of the
    /// main-effect model. Has no effect on `main`.
    pub standardize_transformed: bool,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            n: 200,
            p: 500,
            pi: 0.01,
            rho: 0.1,
            strength: 1.5,
            family: Family::Normal,
            poisson_mean: 5.0,
            structure: Structure::Main,
            noise_sd: 1.0,
            standardize_transformed: true,
        }
    }
}

fn integer_block(p: usize, pi: f64) -> Result<usize> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(KobtError::invalid("pi", format!("must lie in (0, 1), got {pi}")));
    }
    let raw = pi * p as f64;
    let s = raw.round();
    if (raw - s).abs() > 1e-9 || s < 1.0 {
        return Err(KobtError::invalid(
            "pi",
            format!("pi * p = {raw} must be a positive integer"),
        ));
    }
    let s = s as usize;
    if p % s != 0 {
        return Err(KobtError::invalid(
            "pi",
            format!("block size {s} does not divide p = {p}"),
        ));
    }
    Ok(s)
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(KobtError::invalid("n", "need at least 4 rows"));
        }
        let s = integer_block(self.p, self.pi)?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(KobtError::invalid("rho", format!("must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(KobtError::invalid("strength", "must be finite and >= 0"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(KobtError::invalid("noise_sd", "must be finite and >= 0"));
        }
        if self.family == Family::Poisson && !(self.poisson_mean > 0.0 && self.poisson_mean.is_finite()) {
            return Err(KobtError::invalid("poisson_mean", "must be positive"));
        }
        if self.structure == Structure::Interaction && s % 2 != 0 {
            return Err(KobtError::invalid(
                "pi",
                format!("interaction structure needs an even signal count, got {s}"),
            ));
        }
        Ok(())
    }

    /// Number of signal variables `pi * p`.
    pub fn signal_count(&self) -> Result<usize> {
        integer_block(self.p, self.pi)
    }

    pub fn signal_indices(&self) -> Result<BTreeSet<usize>> {
        Ok((0..self.signal_count()?).collect())
    }
}

/// Block-diagonal covariance with blocks of size `pi * p` and entries
/// `rho^|j-k|` inside each block.
pub fn gen_block_cov(p: usize, pi: f64, rho: f64) -> Result<DMatrix<f64>> {
    let b = integer_block(p, pi)?;
    Ok(DMatrix::from_fn(p, p, |j, k| {
        if j / b == k / b {
            rho.powi((j as i32 - k as i32).abs())
        } else {
            0.0
        }
    }))
}

fn block_factor(b: usize, rho: f64) -> Result<DMatrix<f64>> {
    let block = DMatrix::from_fn(b, b, |j, k| rho.powi((j as i32 - k as i32).abs()));
    block
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| KobtError::Numerical("block covariance is not positive definite".into()))
}

/// Poisson quantile table: smallest `k` with `cdf(k) >= u`.
struct PoissonQuantile {
    cdf: Vec<f64>,
}

impl PoissonQuantile {
    fn new(mean: f64) -> Result<Self> {
        let dist = Poisson::new(mean).map_err(|e| KobtError::invalid("poisson_mean", e.to_string()))?;
        let mut cdf = Vec::new();
        let mut k = 0u64;
        loop {
            let c = dist.cdf(k);
            cdf.push(c);
            if c >= 1.0 - 1e-15 || k > 10_000 {
                break;
            }
            k += 1;
        }
        Ok(Self { cdf })
    }

    fn quantile(&self, u: f64) -> f64 {
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1) as f64
    }
}

/// Draws `n` rows of the design. Standard normals are consumed row by row.
pub fn gen_design(design: &SimDesign, stream: RngStream) -> Result<DataMatrix> {
    design.validate()?;
    let (n, p) = (design.n, design.p);
    let b = design.signal_count()?;
    let l = block_factor(b, design.rho)?;
    let mut rng = stream.rng();
    let mut cols = vec![vec![0.0; n]; p];
    let mut z = vec![0.0; b];
    for i in 0..n {
        for start in (0..p).step_by(b) {
            z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            for r in 0..b {
                let mut acc = 0.0;
                for c in 0..=r {
                    acc += l[(r, c)] * z[c];
                }
                cols[start + r][i] = acc;
            }
        }
    }
    if design.family == Family::Poisson {
        let phi = Normal::standard();
        let q = PoissonQuantile::new(design.poisson_mean)?;
        for col in cols.iter_mut() {
            for v in col.iter_mut() {
                *v = q.quantile(phi.cdf(*v));
            }
        }
    }
    DataMatrix::from_columns(cols, default_names("x", p))
}

/// Maps `X0` to the columns the true model is built from. Only the first
/// `signal_count` columns change.
pub fn transform_design(x0: &DataMatrix, structure: Structure, signal_count: usize) -> Result<DataMatrix> {
    if signal_count > x0.p() {
        return Err(KobtError::invalid("signal_count", "exceeds the number of columns"));
    }
    let mut cols: Vec<Vec<f64>> = x0.columns().map(<[f64]>::to_vec).collect();
    match structure {
        Structure::Main => {}
        Structure::Interaction => {
            if signal_count % 2 != 0 {
                return Err(KobtError::invalid("signal_count", "interaction needs an even signal count"));
            }
            for i in 0..signal_count / 2 {
                let (a, b) = (x0.col(2 * i), x0.col(2 * i + 1));
                cols[i] = a.iter().zip(b).map(|(u, v)| u * v).collect();
            }
            for (j, col) in cols.iter_mut().enumerate().take(signal_count).skip(signal_count / 2) {
                col.copy_from_slice(x0.col(j));
            }
        }
        Structure::Exponential => {
            for col in cols.iter_mut().take(signal_count) {
                col.iter_mut().for_each(|v| *v = v.exp());
            }
        }
        Structure::Quadratic => {
            for col in cols.iter_mut().take(signal_count) {
                col.iter_mut().for_each(|v| *v = *v * *v);
            }
        }
    }
    DataMatrix::from_columns(cols, x0.column_names().to_vec())
}

/// Columns entering the response: the product columns for interaction,
/// otherwise every signal column.
pub fn response_columns(structure: Structure, signal_count: usize) -> usize {
    match structure {
        Structure::Interaction => signal_count / 2,
        _ => signal_count,
    }
}

/// `y = strength * sum of the first `signal_count` columns + noise_sd * e`.
pub fn gen_response(x: &DataMatrix, signal_count: usize, strength: f64, noise_sd: f64, stream: RngStream) -> Result<Vec<f64>> {
    if signal_count > x.p() {
        return Err(KobtError::invalid("signal_count", "exceeds the number of columns"));
    }
    let mut rng = stream.rng();
    Ok((0..x.n())
        .map(|i| {
            let signal: f64 = (0..signal_count).map(|j| x.get(i, j)).sum();
            let e: f64 = StandardNormal.sample(&mut rng);
            strength * signal + noise_sd * e
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub signal_indices: BTreeSet<usize>,
    pub x_raw: DataMatrix,
    pub y: Vec<f64>,
}

impl SimTruth {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(self.x_raw.clone(), self.y.clone(), None, Task::Regression)
    }
}

const DESIGN_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// Design, transformed response and truth for one replicate stream.
pub fn simulate(design: &SimDesign, stream: RngStream) -> Result<SimTruth> {
    let x0 = gen_design(design, stream.child(DESIGN_STREAM))?;
    let s = design.signal_count()?;
    let k = response_columns(design.structure, s);
    let mut xt = transform_design(&x0, design.structure, s)?;
    if design.standardize_transformed && design.structure != Structure::Main {
        let signal: Vec<usize> = (0..k).collect();
        let (scaled, _) = standardize_columns(&xt.select_columns(&signal)?)?;
        let mut cols: Vec<Vec<f64>> = scaled.columns().map(<[f64]>::to_vec).collect();
        cols.extend((k..xt.p()).map(|j| xt.col(j).to_vec()));
        xt = DataMatrix::from_columns(cols, xt.column_names().to_vec())?;
    }
    let y = gen_response(
        &xt,
        k,
        design.strength,
        design.noise_sd,
        stream.child(NOISE_STREAM),
    )?;
    Ok(SimTruth {
        signal_indices: (0..s).collect(),
        x_raw: x0,
        y,
    })
}

/// Fraction of used noise features ranked above the lowest-ranked used
/// signal. `None` when no signal or no noise feature has positive
/// importance.
pub fn ranking_ratio(importance: &[f64], signals: &BTreeSet<usize>) -> Option<f64> {
    let mut used: Vec<usize> = (0..importance.len()).filter(|&j| importance[j] > 0.0).collect();
    used.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let noise_total = used.iter().filter(|j| !signals.contains(j)).count();
    let last_signal = used.iter().rposition(|j| signals.contains(j))?;
    if noise_total == 0 {
        return None;
    }
    let above = used[..last_signal].iter().filter(|j| !signals.contains(j)).count();
    Some(above as f64 / noise_total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFdp {
    pub power: f64,
    pub fdp: f64,
}

pub fn evaluate_power_fdr(selected: &[usize], signals: &BTreeSet<usize>) -> PowerFdp {
    let chosen: BTreeSet<usize> = selected.iter().copied().collect();
    let hits = chosen.intersection(signals).count();
    let false_hits = chosen.len() - hits;
    PowerFdp {
        power: if signals.is_empty() { 0.0 } else { hits as f64 / signals.len() as f64 },
        fdp: false_hits as f64 / chosen.len().max(1) as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Protocol {
    CvError,
    Ranking,
    PowerFdr,
    KnockoffQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    pub design: SimDesign,
    /// Structures swept by the cross-validation and ranking protocols.
    pub structures: Vec<Structure>,
    pub boosters: Vec<Booster>,
    pub depths: Vec<usize>,
    pub boost: BoostParams,
    pub statistics: Vec<Statistic>,
    pub knockoffs: Vec<KnockoffKind>,
    pub reps: usize,
    pub cv_folds: usize,
    pub q: usize,
    pub delta: f64,
    pub tune_penalties: bool,
    pub tune_init: usize,
    pub tune_iter: usize,
    /// Knockoff draws per design in the quality protocol.
    pub num_knockoffs: usize,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            protocol: Protocol::CvError,
            design: SimDesign::default(),
            structures: Structure::ALL.to_vec(),
            boosters: vec![Booster::Gbrt],
            depths: vec![2],
            boost: BoostParams::default(),
            statistics: vec![Statistic::Shap],
            knockoffs: vec![
                KnockoffKind::ShrunkGaussian,
                KnockoffKind::sparse_default(),
                KnockoffKind::PcPermute { num_pcs: 10 },
                KnockoffKind::PcPermute { num_pcs: 30 },
            ],
            reps: 10,
            cv_folds: 10,
            q: 20,
            delta: 0.1,
            tune_penalties: false,
            tune_init: 10,
            tune_iter: 20,
            num_knockoffs: 50,
            seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.design.validate_shape()?;
        if self.reps < 1 {
            return Err(KobtError::invalid("reps", "need at least one replicate"));
        }
        self.boost.validate()?;
        for k in &self.knockoffs {
            k.validate()?;
        }
        let nonempty = |ok: bool, field: &str| {
            if ok {
                Ok(())
            } else {
                Err(KobtError::invalid(field, "must not be empty"))
            }
        };
        match self.protocol {
            Protocol::CvError => {
                nonempty(!self.structures.is_empty(), "structures")?;
                nonempty(!self.boosters.is_empty(), "boosters")?;
                nonempty(!self.depths.is_empty(), "depths")?;
                if self.depths.contains(&0) {
                    return Err(KobtError::invalid("depths", "depths must be >= 1"));
                }
                if self.cv_folds < 2 {
                    return Err(KobtError::invalid("cv_folds", "need at least 2 folds"));
                }
            }
            Protocol::Ranking => {
                nonempty(!self.structures.is_empty(), "structures")?;
                nonempty(!self.statistics.is_empty(), "statistics")?;
            }
            Protocol::PowerFdr => {
                nonempty(!self.knockoffs.is_empty(), "knockoffs")?;
                nonempty(!self.statistics.is_empty(), "statistics")?;
                self.filter_config(0, &self.knockoffs[0]).validate()?;
            }
            Protocol::KnockoffQuality => {
                nonempty(!self.knockoffs.is_empty(), "knockoffs")?;
                if self.num_knockoffs < 1 {
                    return Err(KobtError::invalid("num_knockoffs", "need at least one draw"));
                }
            }
        }
        for s in self.structures_used() {
            SimDesign { structure: s, ..self.design.clone() }.validate()?;
        }
        Ok(())
    }

    fn structures_used(&self) -> Vec<Structure> {
        match self.protocol {
            Protocol::CvError | Protocol::Ranking => self.structures.clone(),
            _ => vec![self.design.structure],
        }
    }

    fn filter_config(&self, master_seed: u64, kind: &KnockoffKind) -> FilterConfig {
        FilterConfig {
            q: self.q,
            delta: self.delta,
            statistic: self.statistics.first().copied().unwrap_or_default(),
            knockoff: kind.clone(),
            boost: self.boost.clone(),
            tune_penalties: self.tune_penalties,
            cv_folds: self.cv_folds,
            tune_init: self.tune_init,
            tune_iter: self.tune_iter,
            master_seed,
            swap_pairs: true,
        }
    }
}

impl SimDesign {
    fn validate_shape(&self) -> Result<()> {
        if self.n < 4 {
            return Err(KobtError::invalid("design.n", "need at least 4 rows"));
        }
        integer_block(self.p, self.pi).map(|_| ())
    }
}

/// One summary cell: mean and standard error over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub cell: String,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
    pub reps: usize,
}

/// Per-replicate value behind a summary cell, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub cell: String,
    pub metric: String,
    pub rep: usize,
    pub draw: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub rows: Vec<TableRow>,
    pub long: Vec<LongRow>,
}

impl ExperimentOutput {
    pub fn row(&self, cell: &str, metric: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.cell == cell && r.metric == metric)
    }
}

/// Mean and standard error `sd / sqrt(n)` with the `n - 1` sample sd.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Stream of replicate `rep` of an experiment.
pub fn rep_stream(seed: u64, rep: usize) -> RngStream {
    RngStream::new(seed, 0).child(rep as u64)
}

struct Collector {
    rows: Vec<TableRow>,
    long: Vec<LongRow>,
}

impl Collector {
    fn new() -> Self {
        Self { rows: Vec::new(), long: Vec::new() }
    }

    /// Adds a cell from per-replicate values; `None` entries are undefined
    /// and excluded from the mean.
    fn push(&mut self, cell: String, metric: &str, values: &[Option<f64>]) {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let (mean, se) = mean_se(&defined);
        for (rep, v) in values.iter().enumerate() {
            if let Some(v) = v {
                self.long.push(LongRow { cell: cell.clone(), metric: metric.into(), rep, draw: 0, value: *v });
            }
        }
        self.rows.push(TableRow { cell, metric: metric.into(), mean, se, reps: defined.len() });
    }

    fn finish(self) -> ExperimentOutput {
        ExperimentOutput { rows: self.rows, long: self.long }
    }
}

fn booster_name(b: Booster) -> &'static str {
    match b {
        Booster::Gbrt => "gbrt",
        Booster::Dart => "dart",
    }
}

fn run_cv_error(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    let mut cells = Vec::new();
    for &s in &spec.structures {
        for &b in &spec.boosters {
            for &d in &spec.depths {
                cells.push((s, b, d));
            }
        }
    }
    // reps x cells; each replicate shares its design draw across cells.
    let per_rep: Vec<Result<Vec<f64>>> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| {
            let stream = rep_stream(spec.seed, rep);
            let mut out = Vec::with_capacity(cells.len());
            for &(s, b, d) in &cells {
                let design = SimDesign { structure: s, ..spec.design.clone() };
                let truth = simulate(&design, stream)?;
                let params = BoostParams { booster: b, max_depth: d, ..spec.boost.clone() };
                let cv = cross_validate(&truth.dataset()?, &params, spec.cv_folds, stream.child(2))?;
                out.push(cv.cvte);
            }
            Ok(out)
        })
        .collect();
    let per_rep: Vec<Vec<f64>> = per_rep.into_iter().collect::<Result<_>>()?;
    let mut c = Collector::new();
    for (k, &(s, b, d)) in cells.iter().enumerate() {
        let values: Vec<Option<f64>> = per_rep.iter().map(|r| Some(r[k])).collect();
        c.push(
            format!("structure={},booster={},depth={d}", s.as_str(), booster_name(b)),
            "cvte",
            &values,
        );
    }
    Ok(c.finish())
}

fn run_ranking(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    let per_rep: Vec<Result<Vec<Vec<Option<f64>>>>> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| {
            let stream = rep_stream(spec.seed, rep);
            spec.structures
                .iter()
                .map(|&s| {
                    let design = SimDesign { structure: s, ..spec.design.clone() };
                    let truth = simulate(&design, stream)?;
                    let data = truth.dataset()?;
                    let model = fit_boosted(&data, &spec.boost, stream.child(2), None)?;
                    spec.statistics
                        .iter()
                        .map(|&stat| {
                            let imp = feature_importance(&model, &data.x, stat)?;
                            Ok(ranking_ratio(&imp.values, &truth.signal_indices))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let per_rep: Vec<Vec<Vec<Option<f64>>>> = per_rep.into_iter().collect::<Result<_>>()?;
    let mut c = Collector::new();
    for (si, s) in spec.structures.iter().enumerate() {
        for (ti, stat) in spec.statistics.iter().enumerate() {
            let values: Vec<Option<f64>> = per_rep.iter().map(|r| r[si][ti]).collect();
            c.push(format!("structure={},statistic={stat}", s.as_str()), "ranking_ratio", &values);
        }
    }
    Ok(c.finish())
}

/// Filter seed for replicate `rep`.
pub fn filter_seed(seed: u64, rep: usize) -> u64 {
    rep_stream(seed, rep).child(3).stream_id
}

fn run_power_fdr(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    let signals = spec.design.signal_indices()?;
    // reps x knockoffs x statistics of (power, fdp).
    let per_rep: Vec<Result<Vec<Vec<PowerFdp>>>> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| {
            let stream = rep_stream(spec.seed, rep);
            let truth = simulate(&spec.design, stream)?;
            let data = truth.dataset()?;
            let base = spec.filter_config(filter_seed(spec.seed, rep), &spec.knockoffs[0]);
            let (params, _) = resolve_params(&data, &base)?;
            spec.knockoffs
                .iter()
                .map(|kind| {
                    let config = FilterConfig { knockoff: kind.clone(), ..base.clone() };
                    let stats = accumulate_with_params(&data, &config, &params, &spec.statistics)?;
                    stats
                        .iter()
                        .map(|s| Ok(evaluate_power_fdr(&select(s, spec.delta)?.selected, &signals)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let per_rep: Vec<Vec<Vec<PowerFdp>>> = per_rep.into_iter().collect::<Result<_>>()?;
    let mut c = Collector::new();
    for (ki, kind) in spec.knockoffs.iter().enumerate() {
        for (ti, stat) in spec.statistics.iter().enumerate() {
            let cell = format!("knockoff={},statistic={stat}", kind.label());
            let power: Vec<Option<f64>> = per_rep.iter().map(|r| Some(r[ki][ti].power)).collect();
            let fdp: Vec<Option<f64>> = per_rep.iter().map(|r| Some(r[ki][ti].fdp)).collect();
            c.push(cell.clone(), "power", &power);
            c.push(cell, "fdr", &fdp);
        }
    }
    Ok(c.finish())
}

fn run_knockoff_quality(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    // reps x knockoffs x draws of (maac, kmmd).
    let per_rep: Vec<Result<Vec<Vec<(f64, f64)>>>> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| {
            let stream = rep_stream(spec.seed, rep);
            let x = gen_design(&spec.design, stream.child(DESIGN_STREAM))?;
            spec.knockoffs
                .iter()
                .enumerate()
                .map(|(ki, kind)| {
                    let sampler = KnockoffSampler::prepare(&x, kind)?;
                    (0..spec.num_knockoffs)
                        .map(|d| {
                            let z = sampler.sample(stream.child2(4 + ki as u64, d as u64))?.z;
                            Ok((maac(&x, &z)?, kmmd_statistic(&x, &z)?))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let per_rep: Vec<Vec<Vec<(f64, f64)>>> = per_rep.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut long = Vec::new();
    for (ki, kind) in spec.knockoffs.iter().enumerate() {
        let cell = format!("knockoff={}", kind.label());
        for (metric, pick) in [("maac", 0usize), ("kmmd", 1usize)] {
            // The standard error is taken across designs of per-design means.
            let design_means: Vec<f64> = per_rep
                .iter()
                .map(|draws| {
                    let v: Vec<f64> = draws[ki].iter().map(|d| if pick == 0 { d.0 } else { d.1 }).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            let (mean, se) = mean_se(&design_means);
            rows.push(TableRow { cell: cell.clone(), metric: metric.into(), mean, se, reps: design_means.len() });
            for (rep, draws) in per_rep.iter().enumerate() {
                for (draw, d) in draws[ki].iter().enumerate() {
                    long.push(LongRow {
                        cell: cell.clone(),
                        metric: metric.into(),
                        rep,
                        draw,
                        value: if pick == 0 { d.0 } else { d.1 },
                    });
                }
            }
        }
    }
    Ok(ExperimentOutput { rows, long })
}

/// Runs an experiment protocol. Results depend only on the spec.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    match spec.protocol {
        Protocol::CvError => run_cv_error(spec),
        Protocol::Ranking => run_ranking(spec),
        Protocol::PowerFdr => run_power_fdr(spec),
        Protocol::KnockoffQuality => run_knockoff_quality(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_covariance_examples() {
        assert_eq!(gen_block_cov(6, 0.5, 0.0).unwrap(), DMatrix::identity(6, 6));
        let c = gen_block_cov(4, 0.5, 0.1).unwrap();
        assert_eq!(c[(0, 1)], 0.1);
        assert_eq!(c[(1, 2)], 0.0);
        assert_eq!(c[(2, 3)], 0.1);
        let big = gen_block_cov(500, 0.01, 0.1).unwrap();
        assert!((big[(0, 4)] - 1e-4).abs() < 1e-18);
        assert_eq!(big[(4, 5)], 0.0);
        assert!(big.clone().cholesky().is_some());
        assert!(gen_block_cov(10, 0.15, 0.1).is_err());
    }

    #[test]
    fn transform_examples() {
        let x = DataMatrix::from_columns(vec![vec![-1.0, 2.0], vec![0.0, 0.0], vec![3.0, 1.0]], default_names("x", 3)).unwrap();
        assert_eq!(transform_design(&x, Structure::Main, 1).unwrap(), x);
        assert_eq!(transform_design(&x, Structure::Quadratic, 1).unwrap().col(0), &[1.0, 4.0]);
        let e = transform_design(&x, Structure::Exponential, 2).unwrap();
        assert_eq!(e.col(1), &[1.0, 1.0]);
        assert_eq!(e.col(2), x.col(2));
        let i = transform_design(&x, Structure::Interaction, 2).unwrap();
        assert_eq!(i.col(0), &[0.0, 0.0]);
        assert_eq!(i.col(1), x.col(1));
        assert!(transform_design(&x, Structure::Interaction, 1).is_err());
    }

    #[test]
    fn response_examples() {
        let x = DataMatrix::from_columns(vec![vec![1.0; 5], vec![7.0; 5]], default_names("x", 2)).unwrap();
        let y = gen_response(&x, 1, 2.0, 0.0, RngStream::new(0, 0)).unwrap();
        assert!(y.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn ranking_ratio_examples() {
        let signals: BTreeSet<usize> = [0, 2].into_iter().collect();
        assert_eq!(ranking_ratio(&[3.0, 2.0, 1.0, 0.5], &signals), Some(0.5));
        assert_eq!(ranking_ratio(&[3.0, 0.1, 2.0, 0.5], &signals), Some(0.0));
        assert_eq!(ranking_ratio(&[0.1, 2.0, 0.0, 0.5], &signals), Some(1.0));
        assert_eq!(ranking_ratio(&[1.0, 0.0, 1.0, 0.0], &signals), None);
        assert_eq!(ranking_ratio(&[0.0, 1.0, 0.0, 1.0], &signals), None);
    }

    #[test]
    fn power_fdr_examples() {
        let signals: BTreeSet<usize> = [1, 4].into_iter().collect();
        let r = evaluate_power_fdr(&[1, 2, 3], &signals);
        assert_eq!(r.power, 0.5);
        assert!((r.fdp - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(evaluate_power_fdr(&[], &signals), PowerFdp { power: 0.0, fdp: 0.0 });
        assert_eq!(evaluate_power_fdr(&[1, 4], &signals), PowerFdp { power: 1.0, fdp: 0.0 });
    }

    #[test]
    fn design_validation() {
        let ok = SimDesign { p: 100, pi: 0.04, structure: Structure::Interaction, ..SimDesign::default() };
        assert!(ok.validate().is_ok());
        let odd = SimDesign { p: 100, pi: 0.03, ..ok.clone() };
        assert!(odd.validate().is_err());
        let frac = SimDesign { p: 50, pi: 0.01, structure: Structure::Main, ..ok };
        assert!(frac.validate().is_err());
    }

    #[test]
    fn design_is_reproducible() {
        let d = SimDesign { n: 20, p: 10, pi: 0.2, ..SimDesign::default() };
        let a = gen_design(&d, RngStream::new(1, 1)).unwrap();
        assert_eq!(a, gen_design(&d, RngStream::new(1, 1)).unwrap());
        assert_ne!(a, gen_design(&d, RngStream::new(1, 2)).unwrap());
    }

    #[test]
    fn mean_se_matches_hand_values() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }
}
