//! Model-based simulation study: population generation, SRSWOR sampling,
//! replications and the evaluation metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::baselines::{fit_gaussian, gaussian_ebp, naive_plugin, EbpOptions, NaiveSource};
use crate::em::{select_g, Criterion, EmConfig};
use crate::error::{Error, Result};
use crate::inference::CovarianceKind;
use crate::model::{logistic, AreaSample, Dataset, PopulationCrossTab};
use crate::mse::{mse_report, MseOptions};
use crate::predict::predict_areas;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// `alpha_i ~ N(0, sigma1^2)`
    Gaussian,
    /// `alpha_i ~ nu N(mu1, sigma2^2) + (1 - nu) N(mu2, sigma2^2)`, `nu` drawn per area
    TwoPoint,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "gaussian" => Ok(Self::Gaussian),
            "2" | "mixture" | "two-point" => Ok(Self::TwoPoint),
            other => Err(Error::InvalidInput(format!("unknown scenario {other:?} (use 1 or 2)"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "1",
            Self::TwoPoint => "2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub m: usize,
    pub pop_size: usize,
    pub sample_size: usize,
    pub replications: usize,
    pub beta: f64,
    pub sigma1: f64,
    pub nu_prob: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// standard deviation of each mixture component in the two-point scenario
    pub sigma2: f64,
    pub g_min: usize,
    pub g_max: usize,
    pub criterion: Criterion,
    pub em: EmConfig,
    pub covariance: CovarianceKind,
    pub bias_correction: bool,
    pub ebp: EbpOptions,
    pub n_quad: usize,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Gaussian,
            m: 100,
            pop_size: 100,
            sample_size: 10,
            replications: 200,
            beta: 1.0,
            sigma1: 0.5,
            nu_prob: 0.7,
            mu1: 0.0,
            mu2: 3.0,
            sigma2: 0.05,
            g_min: 2,
            g_max: 5,
            criterion: Criterion::Aic,
            em: EmConfig::default(),
            covariance: CovarianceKind::Sandwich,
            bias_correction: true,
            ebp: EbpOptions::default(),
            n_quad: 15,
            rng_seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.pop_size == 0 {
            return Err(Error::InvalidInput("m and N_i must be positive".into()));
        }
        if self.sample_size > self.pop_size {
            return Err(Error::InvalidInput(format!("n_i = {} exceeds N_i = {}", self.sample_size, self.pop_size)));
        }
        if self.replications == 0 {
            return Err(Error::InvalidInput("need at least one replication".into()));
        }
        if !(0.0..=1.0).contains(&self.nu_prob) || self.sigma1 < 0.0 || self.sigma2 < 0.0 {
            return Err(Error::InvalidInput("invalid random-effect settings".into()));
        }
        if self.g_min == 0 || self.g_min > self.g_max {
            return Err(Error::InvalidInput(format!("invalid G range {}..={}", self.g_min, self.g_max)));
        }
        Ok(())
    }

    /// Upper end `b_i` of the covariate range of area `i` (1-based).
    pub fn covariate_upper(&self, i: usize) -> f64 {
        let div = match self.m {
            100 => 8.0,
            200 => 16.0,
            500 => 48.0,
            m => m as f64 / 12.5,
        };
        i as f64 / div
    }
}

/// One generated area: covariates, random effect and responses of all units.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationArea {
    pub area_id: String,
    pub alpha: f64,
    pub x: Vec<f64>,
    pub y: Vec<u8>,
}

impl PopulationArea {
    /// Realized target `N^{-1} sum_j p_ij`.
    pub fn target(&self, beta: f64) -> f64 {
        self.x.iter().map(|x| logistic(self.alpha + x * beta)).sum::<f64>() / self.x.len() as f64
    }

    pub fn crosstab(&self) -> PopulationCrossTab {
        PopulationCrossTab::from_units(self.area_id.clone(), 1, self.x.clone()).expect("p = 1")
    }
}

const STREAM_POPULATION: u64 = 0;
const STREAM_SAMPLE: u64 = 1;
const STREAM_EM: u64 = 2;
const STREAM_EBP: u64 = 3;

fn area_id(i: usize) -> String {
    format!("A{:04}", i + 1)
}

/// Draws the population of one replication; each area has its own substream.
pub fn generate_population(config: &ScenarioConfig, rep_seed: u64) -> Vec<PopulationArea> {
    (0..config.m)
        .map(|i| {
            let mut rng = seed::rng(seed::derive3(rep_seed, STREAM_POPULATION, i as u64));
            let alpha = match config.scenario {
                Scenario::Gaussian => config.sigma1 * rng.sample::<f64, _>(rand_distr::StandardNormal),
                Scenario::TwoPoint => {
                    let nu = rng.random::<f64>() < config.nu_prob;
                    let centre = if nu { config.mu1 } else { config.mu2 };
                    Normal::new(centre, config.sigma2).expect("finite sd").sample(&mut rng)
                }
            };
            let upper = config.covariate_upper(i + 1);
            let x: Vec<f64> = (0..config.pop_size).map(|_| rng.random_range(-1.0..=upper)).collect();
            let y = x
                .iter()
                .map(|xv| (rng.random::<f64>() < logistic(alpha + xv * config.beta)) as u8)
                .collect();
            PopulationArea { area_id: area_id(i), alpha, x, y }
        })
        .collect()
}

/// Simple random sample without replacement of `n` units from every area.
pub fn draw_srswor(population: &[PopulationArea], n: usize, rep_seed: u64) -> Result<Dataset> {
    let areas = population
        .iter()
        .map(|a| {
            if n > a.x.len() {
                return Err(Error::InvalidInput(format!("cannot sample {n} of {} units", a.x.len())));
            }
            let mut rng = seed::rng(seed::derive3(rep_seed, STREAM_SAMPLE, seed::derive_label(0, &a.area_id)));
            let mut idx = index_sample(&mut rng, a.x.len(), n).into_vec();
            idx.sort_unstable();
            AreaSample::new(a.area_id.clone(), 1, idx.iter().map(|&j| a.y[j]).collect(), idx.iter().map(|&j| a.x[j]).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(1, areas)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Predictor {
    SpEbp,
    GaussianEbp,
    Naive,
    /// Reports the realized target; checks the metric plumbing.
    Oracle,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Self::SpEbp => "sp-EBP",
            Self::GaussianEbp => "EBP",
            Self::Naive => "Naive",
            Self::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MseEstimator {
    /// `d + e/m` for the sp-EBP
    Plain,
    /// bias-corrected, for the sp-EBP
    Star,
}

impl MseEstimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "mse",
            Self::Star => "mse_star",
        }
    }
}

/// Raw output of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub selected_g: usize,
    pub truth: Vec<f64>,
    pub predictions: BTreeMap<Predictor, Vec<f64>>,
    pub mse: BTreeMap<MseEstimator, Vec<f64>>,
    pub seconds: f64,
}

/// Runs replication `index` of the study.
pub fn run_replication(
    config: &ScenarioConfig,
    index: usize,
    predictors: &[Predictor],
    estimators: &[MseEstimator],
) -> Result<Replication> {
    let start = Instant::now();
    let rep_seed = seed::derive(config.rng_seed, index as u64);
    let population = generate_population(config, rep_seed);
    let data = draw_srswor(&population, config.sample_size, rep_seed)?;
    let crosstabs: Vec<PopulationCrossTab> = population.iter().map(PopulationArea::crosstab).collect();
    let truth: Vec<f64> = population.iter().map(|a| a.target(config.beta)).collect();

    let needs_mixture = predictors.contains(&Predictor::SpEbp) || !estimators.is_empty();
    let mut predictions = BTreeMap::new();
    let mut mse = BTreeMap::new();
    let mut selected_g = 0;
    if needs_mixture {
        let em = EmConfig { rng_seed: seed::derive(rep_seed, STREAM_EM), ..config.em.clone() };
        let sel = select_g(&data, config.g_min, config.g_max, &em, config.criterion)?;
        let fit = sel.best;
        selected_g = fit.g();
        if predictors.contains(&Predictor::SpEbp) {
            let preds = predict_areas(&fit.params, &data, &crosstabs)?;
            predictions.insert(Predictor::SpEbp, preds.iter().map(|p| p.p_hat).collect());
        }
        if !estimators.is_empty() {
            let info = fit
                .information
                .as_ref()
                .ok_or_else(|| Error::Numerical(format!("no covariance for the selected G = {selected_g}")))?;
            let v = info.covariance(config.covariance);
            let want_star = estimators.contains(&MseEstimator::Star) && config.bias_correction;
            let report = mse_report(&fit.params, &data, &crosstabs, v, MseOptions { bias_correction: want_star })?;
            for &e in estimators {
                let vals = report
                    .iter()
                    .map(|r| match e {
                        MseEstimator::Plain => r.mse_plain,
                        MseEstimator::Star => r.mse_star,
                    })
                    .collect();
                mse.insert(e, vals);
            }
        }
    }
    if predictors.contains(&Predictor::GaussianEbp) || predictors.contains(&Predictor::Naive) {
        let gfit = fit_gaussian(&data, config.n_quad)?;
        let ebp_seed = seed::derive(rep_seed, STREAM_EBP);
        if predictors.contains(&Predictor::GaussianEbp) {
            let vals = data
                .areas
                .iter()
                .zip(&crosstabs)
                .map(|(a, c)| gaussian_ebp(&gfit, Some(a), c, config.ebp, ebp_seed))
                .collect::<Result<Vec<_>>>()?;
            predictions.insert(Predictor::GaussianEbp, vals);
        }
        if predictors.contains(&Predictor::Naive) {
            let vals = data
                .areas
                .iter()
                .zip(&crosstabs)
                .map(|(a, c)| naive_plugin(NaiveSource::Gaussian(&gfit), Some(a), c))
                .collect::<Result<Vec<_>>>()?;
            predictions.insert(Predictor::Naive, vals);
        }
    }
    if predictors.contains(&Predictor::Oracle) {
        predictions.insert(Predictor::Oracle, truth.clone());
    }
    Ok(Replication { index, selected_g, truth, predictions, mse, seconds: start.elapsed().as_secs_f64() })
}

/// Per-area accuracy of one predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorMetrics {
    pub predictor: Predictor,
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
}

/// Per-area quality of one MSE estimator (for the sp-EBP).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMetrics {
    pub estimator: MseEstimator,
    /// mean estimated RMSE over actual RMSE
    pub ratio: Vec<f64>,
    /// coverage of `p_hat +- 1.96 sqrt(mse)`
    pub coverage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub area_ids: Vec<String>,
    pub replications: usize,
    pub failed: Vec<(usize, String)>,
    pub g_counts: BTreeMap<usize, usize>,
    pub predictors: Vec<PredictorMetrics>,
    pub estimators: Vec<EstimatorMetrics>,
    pub mean_seconds: f64,
}

/// Mean and quartiles of a per-area metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| -> f64 {
        if v.is_empty() {
            return f64::NAN;
        }
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Summary { mean, q1: q(0.25), median: q(0.5), q3: q(0.75) }
}

impl MetricsReport {
    pub fn predictor(&self, p: Predictor) -> Option<&PredictorMetrics> {
        self.predictors.iter().find(|m| m.predictor == p)
    }

    pub fn estimator(&self, e: MseEstimator) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|m| m.estimator == e)
    }

    /// Share of successful replications selecting `g` components.
    pub fn g_frequency(&self, g: usize) -> f64 {
        let ok = self.replications as f64;
        *self.g_counts.get(&g).unwrap_or(&0) as f64 / ok
    }
}

#[derive(Debug, Clone)]
struct Sums {
    err: Vec<f64>,
    sq: Vec<f64>,
    abs: Vec<f64>,
}

impl Sums {
    fn new(m: usize) -> Self {
        Self { err: vec![0.0; m], sq: vec![0.0; m], abs: vec![0.0; m] }
    }
}

/// Streaming aggregation of replications, in push order.
#[derive(Debug, Clone)]
pub struct Accumulator {
    area_ids: Vec<String>,
    predictors: Vec<Predictor>,
    estimators: Vec<MseEstimator>,
    count: usize,
    failed: Vec<(usize, String)>,
    g_counts: BTreeMap<usize, usize>,
    pred: Vec<Sums>,
    root_mse: Vec<Vec<f64>>,
    covered: Vec<Vec<f64>>,
    seconds: f64,
}

impl Accumulator {
    pub fn new(area_ids: Vec<String>, predictors: &[Predictor], estimators: &[MseEstimator]) -> Self {
        let m = area_ids.len();
        Self {
            predictors: predictors.to_vec(),
            estimators: estimators.to_vec(),
            count: 0,
            failed: Vec::new(),
            g_counts: BTreeMap::new(),
            pred: predictors.iter().map(|_| Sums::new(m)).collect(),
            root_mse: estimators.iter().map(|_| vec![0.0; m]).collect(),
            covered: estimators.iter().map(|_| vec![0.0; m]).collect(),
            seconds: 0.0,
            area_ids,
        }
    }

    pub fn push_failure(&mut self, index: usize, msg: String) {
        self.failed.push((index, msg));
    }

    pub fn push(&mut self, rep: &Replication) {
        self.count += 1;
        self.seconds += rep.seconds;
        *self.g_counts.entry(rep.selected_g).or_insert(0) += 1;
        for (k, p) in self.predictors.iter().enumerate() {
            let vals = &rep.predictions[p];
            let s = &mut self.pred[k];
            for i in 0..vals.len() {
                let e = vals[i] - rep.truth[i];
                s.err[i] += e;
                s.sq[i] += e * e;
                s.abs[i] += e.abs();
            }
        }
        let sp = rep.predictions.get(&Predictor::SpEbp);
        for (k, e) in self.estimators.iter().enumerate() {
            let vals = &rep.mse[e];
            for i in 0..vals.len() {
                let r = vals[i].max(0.0).sqrt();
                self.root_mse[k][i] += r;
                if let Some(sp) = sp {
                    if (sp[i] - rep.truth[i]).abs() <= 1.96 * r {
                        self.covered[k][i] += 1.0;
                    }
                }
            }
        }
    }

    pub fn finish(self) -> MetricsReport {
        let t = self.count as f64;
        let predictors: Vec<PredictorMetrics> = self
            .predictors
            .iter()
            .zip(&self.pred)
            .map(|(&p, s)| PredictorMetrics {
                predictor: p,
                bias: s.err.iter().map(|v| v / t).collect(),
                rmse: s.sq.iter().map(|v| (v / t).sqrt()).collect(),
                mae: s.abs.iter().map(|v| v / t).collect(),
            })
            .collect();
        let sp_rmse = predictors.iter().find(|p| p.predictor == Predictor::SpEbp).map(|p| p.rmse.clone());
        let estimators = self
            .estimators
            .iter()
            .enumerate()
            .map(|(k, &e)| EstimatorMetrics {
                estimator: e,
                ratio: self.root_mse[k]
                    .iter()
                    .enumerate()
                    .map(|(i, r)| sp_rmse.as_ref().map_or(f64::NAN, |rm| r / t / rm[i]))
                    .collect(),
                coverage: self.covered[k].iter().map(|c| c / t).collect(),
            })
            .collect();
        MetricsReport {
            area_ids: self.area_ids,
            replications: self.count,
            failed: self.failed,
            g_counts: self.g_counts,
            predictors,
            estimators,
            mean_seconds: if self.count > 0 { self.seconds / t } else { f64::NAN },
        }
    }
}

/// Metrics computed directly from stored replications.
pub fn batch_metrics(
    area_ids: Vec<String>,
    reps: &[Replication],
    predictors: &[Predictor],
    estimators: &[MseEstimator],
) -> MetricsReport {
    let m = area_ids.len();
    let t = reps.len() as f64;
    let errors = |p: Predictor, i: usize| reps.iter().map(move |r| r.predictions[&p][i] - r.truth[i]);
    let predictor_metrics: Vec<PredictorMetrics> = predictors
        .iter()
        .map(|&p| PredictorMetrics {
            predictor: p,
            bias: (0..m).map(|i| errors(p, i).sum::<f64>() / t).collect(),
            rmse: (0..m).map(|i| (errors(p, i).map(|e| e * e).sum::<f64>() / t).sqrt()).collect(),
            mae: (0..m).map(|i| errors(p, i).map(f64::abs).sum::<f64>() / t).collect(),
        })
        .collect();
    let sp_rmse: Option<Vec<f64>> = predictors
        .contains(&Predictor::SpEbp)
        .then(|| (0..m).map(|i| (errors(Predictor::SpEbp, i).map(|e| e * e).sum::<f64>() / t).sqrt()).collect());
    let estimator_metrics = estimators
        .iter()
        .map(|&e| {
            let root = |r: &Replication, i: usize| r.mse[&e][i].max(0.0).sqrt();
            EstimatorMetrics {
                estimator: e,
                ratio: (0..m)
                    .map(|i| {
                        let mean_root = reps.iter().map(|r| root(r, i)).sum::<f64>() / t;
                        sp_rmse.as_ref().map_or(f64::NAN, |rm| mean_root / rm[i])
                    })
                    .collect(),
                coverage: (0..m)
                    .map(|i| {
                        reps.iter()
                            .filter(|r| match r.predictions.get(&Predictor::SpEbp) {
                                Some(sp) => (sp[i] - r.truth[i]).abs() <= 1.96 * root(r, i),
                                None => false,
                            })
                            .count() as f64
                            / t
                    })
                    .collect(),
            }
        })
        .collect();
    let mut g_counts = BTreeMap::new();
    for r in reps {
        *g_counts.entry(r.selected_g).or_insert(0) += 1;
    }
    MetricsReport {
        area_ids,
        replications: reps.len(),
        failed: Vec::new(),
        g_counts,
        predictors: predictor_metrics,
        estimators: estimator_metrics,
        mean_seconds: reps.iter().map(|r| r.seconds).sum::<f64>() / t,
    }
}

/// Outcome of [`run_study`]: the aggregated report and the raw replications.
#[derive(Debug, Clone)]
pub struct Study {
    pub report: MetricsReport,
    pub replications: Vec<Replication>,
}

/// Runs all replications (in parallel) and aggregates them in index order.
pub fn run_study(config: &ScenarioConfig, predictors: &[Predictor], estimators: &[MseEstimator]) -> Result<Study> {
    config.validate()?;
    if !estimators.is_empty() && !predictors.contains(&Predictor::SpEbp) {
        return Err(Error::InvalidInput("MSE estimators need the sp-EBP predictor".into()));
    }
    let results: Vec<Result<Replication>> = (0..config.replications)
        .into_par_iter()
        .map(|t| run_replication(config, t, predictors, estimators))
        .collect();
    let ids: Vec<String> = (0..config.m).map(area_id).collect();
    let mut acc = Accumulator::new(ids, predictors, estimators);
    let mut reps = Vec::with_capacity(results.len());
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => {
                debug!("replication {t}: G = {}, {:.2}s", rep.selected_g, rep.seconds);
                acc.push(&rep);
                reps.push(rep);
            }
            Err(e) => {
                warn!("replication {t} failed: {e}");
                acc.push_failure(t, e.to_string());
            }
        }
    }
    if reps.is_empty() {
        return Err(Error::Numerical("every replication failed".into()));
    }
    Ok(Study { report: acc.finish(), replications: reps })
}

/// Settings of the synthetic labour-force-style survey.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub m: usize,
    /// share of areas with no sampled units
    pub out_of_sample_share: f64,
    pub mean_sample_size: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { m: 200, out_of_sample_share: 0.1, mean_sample_size: 60.0, rng_seed: 7 }
    }
}

/// Categorical unit-level survey with population cross-tabulations.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSurvey {
    pub covariates: Vec<(&'static str, Vec<&'static str>)>,
    /// `(area_id, y, level index per covariate)`
    pub sample: Vec<(String, u8, Vec<usize>)>,
    /// `(area_id, level index per covariate, count)`
    pub crosstab: Vec<(String, Vec<usize>, u64)>,
}

/// Generates an unemployment-style survey: five categorical covariates
/// (9 indicator columns), two groups of areas with different baselines, and
/// area sample sizes that vary widely.
pub fn synthetic_survey(config: &SyntheticConfig) -> SyntheticSurvey {
    let covariates: Vec<(&'static str, Vec<&'static str>)> = vec![
        ("sex", vec!["F", "M"]),
        ("age", vec!["15-24", "25-34", "35-44", "45-54", "55-64"]),
        ("edu", vec!["high", "low", "mid"]),
        ("citizen", vec!["foreign", "native"]),
        ("household", vec!["couple", "single"]),
    ];
    let effects: [&[f64]; 5] = [&[0.0, -0.35], &[0.0, -0.6, -0.9, -1.0, -1.1], &[0.0, 0.9, 0.45], &[0.0, -0.4], &[0.0, 0.3]];
    let shares: [&[f64]; 5] = [&[0.48, 0.52], &[0.15, 0.2, 0.22, 0.23, 0.2], &[0.2, 0.35, 0.45], &[0.1, 0.9], &[0.7, 0.3]];
    let levels: Vec<usize> = covariates.iter().map(|c| c.1.len()).collect();
    let n_profiles: usize = levels.iter().product();
    let decode = |mut k: usize| -> Vec<usize> {
        levels
            .iter()
            .map(|&l| {
                let v = k % l;
                k /= l;
                v
            })
            .collect()
    };
    let mut sample = Vec::new();
    let mut crosstab = Vec::new();
    for i in 0..config.m {
        let mut rng = seed::rng(seed::derive(config.rng_seed, i as u64));
        let id = format!("L{:03}", i + 1);
        let south = rng.random::<f64>() < 0.4;
        let alpha = if south { -1.2 } else { -2.6 } + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let pop_scale = 0.5 + 2.0 * rng.random::<f64>();
        let mut probs = Vec::with_capacity(n_profiles);
        for k in 0..n_profiles {
            let lv = decode(k);
            let share: f64 = lv.iter().enumerate().map(|(c, &l)| shares[c][l]).product();
            let count = (share * 2000.0 * pop_scale * (0.6 + 0.8 * rng.random::<f64>())).round() as u64;
            let eta = alpha + lv.iter().enumerate().map(|(c, &l)| effects[c][l]).sum::<f64>();
            if count > 0 {
                crosstab.push((id.clone(), lv.clone(), count));
            }
            probs.push((share, logistic(eta), lv));
        }
        if rng.random::<f64>() < config.out_of_sample_share {
            continue;
        }
        let n = (config.mean_sample_size * (0.2 + 1.6 * rng.random::<f64>())).round().max(1.0) as usize;
        let total: f64 = probs.iter().map(|p| p.0).sum();
        for _ in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut pick = &probs[probs.len() - 1];
            for p in &probs {
                if u < p.0 {
                    pick = p;
                    break;
                }
                u -= p.0;
            }
            let y = (rng.random::<f64>() < pick.1) as u8;
            sample.push((id.clone(), y, pick.2.clone()));
        }
    }
    SyntheticSurvey { covariates, sample, crosstab }
}
