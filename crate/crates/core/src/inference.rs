//! Scores, observed information (Oakes) and the sandwich covariance of the
//! free parameters `(beta, xi, pi_1..pi_{G-1})`.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::em::{e_step_with_loglik, Tau};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, sym_inverse, symmetrize};
use crate::model::{logistic, AreaSample, Dataset, MixtureParams};

/// Gradient in the free chart, length `K = p + G + (G - 1)`.
pub type ScoreVector = DVector<f64>;

fn check_interior(params: &MixtureParams) -> Result<()> {
    if params.pi.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Boundary("a mixture mass is zero; the score is undefined".into()));
    }
    Ok(())
}

/// Residual sums `sum_j (y - p)` and `sum_j (y - p) x` for each component.
fn residual_sums(area: &AreaSample, beta: &[f64], xi: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = beta.len();
    let offsets = area.offsets(beta);
    let mut r = vec![0.0; xi.len()];
    let mut rx = vec![vec![0.0; p]; xi.len()];
    for (g, &x) in xi.iter().enumerate() {
        for (j, &o) in offsets.iter().enumerate() {
            let res = area.y[j] as f64 - logistic(o + x);
            r[g] += res;
            for (acc, &c) in rx[g].iter_mut().zip(area.x(j)) {
                *acc += res * c;
            }
        }
    }
    (r, rx)
}

/// Area `i`'s contribution to the gradient of `Q(params | tau)`.
fn area_q_score(area: &AreaSample, params: &MixtureParams, tau_i: &[f64], out: &mut [f64]) {
    let p = params.p();
    let g = params.g();
    out.iter_mut().for_each(|v| *v = 0.0);
    if !area.is_empty() {
        let (r, rx) = residual_sums(area, &params.beta, &params.xi);
        for c in 0..g {
            for a in 0..p {
                out[a] += tau_i[c] * rx[c][a];
            }
            out[p + c] = tau_i[c] * r[c];
        }
    }
    let last = tau_i[g - 1] / params.pi[g - 1];
    for c in 0..g - 1 {
        out[p + g + c] = tau_i[c] / params.pi[c] - last;
    }
}

/// Gradient of the expected complete-data log-likelihood `Q(params | tau)`.
pub fn q_score(params: &MixtureParams, tau: &Tau, data: &Dataset) -> ScoreVector {
    let k = params.n_free();
    let mut total = DVector::zeros(k);
    let mut row = vec![0.0; k];
    for (i, area) in data.areas.iter().enumerate() {
        let t: Vec<f64> = tau.row(i).iter().copied().collect();
        area_q_score(area, params, &t, &mut row);
        for (acc, v) in total.iter_mut().zip(&row) {
            *acc += v;
        }
    }
    total
}

/// Per-area observed scores, one row per area (`m x K`).
pub fn per_area_scores(params: &MixtureParams, data: &Dataset) -> Result<DMatrix<f64>> {
    params.check_against(data.p())?;
    check_interior(params)?;
    let (tau, _) = e_step_with_loglik(params, data);
    let k = params.n_free();
    let mut out = DMatrix::zeros(data.m(), k);
    let mut row = vec![0.0; k];
    for (i, area) in data.areas.iter().enumerate() {
        let t: Vec<f64> = tau.row(i).iter().copied().collect();
        area_q_score(area, params, &t, &mut row);
        for (c, v) in row.iter().enumerate() {
            out[(i, c)] = *v;
        }
    }
    Ok(out)
}

/// Gradient of the observed log-likelihood (Fisher's identity).
pub fn score(params: &MixtureParams, data: &Dataset) -> Result<ScoreVector> {
    let rows = per_area_scores(params, data)?;
    let mut total = DVector::zeros(rows.ncols());
    for i in 0..rows.nrows() {
        total += rows.row(i).transpose();
    }
    Ok(total)
}

/// Analytic Hessian of `Q(params | tau)` in the free chart.
pub fn complete_data_hessian(params: &MixtureParams, tau: &Tau, data: &Dataset) -> DMatrix<f64> {
    let p = params.p();
    let g = params.g();
    let k = params.n_free();
    let mut h = DMatrix::zeros(k, k);
    for (i, area) in data.areas.iter().enumerate() {
        if area.is_empty() {
            continue;
        }
        let offsets = area.offsets(&params.beta);
        for c in 0..g {
            let t = tau[(i, c)];
            if t == 0.0 {
                continue;
            }
            for (j, &o) in offsets.iter().enumerate() {
                let mu = logistic(o + params.xi[c]);
                let w = t * mu * (1.0 - mu);
                let x = area.x(j);
                for a in 0..p {
                    h[(a, p + c)] -= w * x[a];
                    for b in 0..=a {
                        h[(a, b)] -= w * x[a] * x[b];
                    }
                }
                h[(p + c, p + c)] -= w;
            }
        }
    }
    let last2 = params.pi[g - 1].powi(2);
    for i in 0..data.m() {
        let tg = tau[(i, g - 1)] / last2;
        for a in 0..g - 1 {
            h[(p + g + a, p + g + a)] -= tau[(i, a)] / params.pi[a].powi(2);
            for b in 0..=a {
                h[(p + g + a, p + g + b)] -= tg;
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            let v = h[(a, b)] + h[(b, a)];
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}

/// Finite-difference step for free coordinate `k` of `theta`.
fn oakes_step(theta: &[f64], k: usize, p: usize, g: usize, pi: &[f64]) -> f64 {
    let h = (1e-5 * theta[k].abs()).max(1e-5);
    if k >= p + g {
        let min_pi = pi.iter().copied().fold(f64::INFINITY, f64::min);
        h.min(0.5 * min_pi)
    } else {
        h
    }
}

/// Observed information by Oakes' identity.
///
/// The complete-data term is analytic; the cross term differentiates the
/// `Q`-score in the conditioning argument by central differences.
pub fn oakes_information(params: &MixtureParams, data: &Dataset) -> Result<DMatrix<f64>> {
    params.check_against(data.p())?;
    check_interior(params)?;
    let (p, g) = (params.p(), params.g());
    let k = params.n_free();
    let (tau, _) = e_step_with_loglik(params, data);
    let hq = complete_data_hessian(params, &tau, data);
    let theta = params.to_free();
    let mut cross = DMatrix::zeros(k, k);
    for b in 0..k {
        let h = oakes_step(&theta, b, p, g, &params.pi);
        let mut up = theta.clone();
        up[b] += h;
        let mut dn = theta.clone();
        dn[b] -= h;
        let (tau_up, _) = e_step_with_loglik(&MixtureParams::from_free(p, g, &up), data);
        let (tau_dn, _) = e_step_with_loglik(&MixtureParams::from_free(p, g, &dn), data);
        let diff = (q_score(params, &tau_up, data) - q_score(params, &tau_dn, data)) / (2.0 * h);
        cross.set_column(b, &diff);
    }
    let j = symmetrize(&(-(hq + cross)));
    let min_eig = min_eigenvalue(&j);
    if !(min_eig > 0.0) {
        warn!("observed information is not positive definite (min eigenvalue {min_eig:.3e})");
    }
    Ok(j)
}

/// `sum_i S_i S_i'` from per-area score rows.
pub fn outer_product_of_scores(scores: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(scores.transpose() * scores))
}

/// `J^{-1} (sum_i S_i S_i') J^{-1}`.
pub fn sandwich_covariance(j: &DMatrix<f64>, scores: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if j.nrows() != scores.ncols() {
        return Err(Error::Dimension(format!(
            "information is {}x{}, scores have {} columns",
            j.nrows(),
            j.ncols(),
            scores.ncols()
        )));
    }
    let inv = sym_inverse(j)?;
    let meat = outer_product_of_scores(scores);
    Ok(symmetrize(&(&inv * meat * &inv)))
}

/// Which covariance of the parameter estimates feeds downstream MSE terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceKind {
    #[default]
    Sandwich,
    InverseInformation,
}

impl std::str::FromStr for CovarianceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sandwich" => Ok(Self::Sandwich),
            "inverse-information" | "oakes" => Ok(Self::InverseInformation),
            other => Err(Error::InvalidInput(format!("unknown covariance kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for CovarianceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sandwich => "sandwich",
            Self::InverseInformation => "inverse-information",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InformationMatrices {
    pub j_oakes: DMatrix<f64>,
    pub v_star: DMatrix<f64>,
    pub v_sandwich: DMatrix<f64>,
    pub j_inverse: DMatrix<f64>,
}

impl InformationMatrices {
    pub fn covariance(&self, kind: CovarianceKind) -> &DMatrix<f64> {
        match kind {
            CovarianceKind::Sandwich => &self.v_sandwich,
            CovarianceKind::InverseInformation => &self.j_inverse,
        }
    }

    /// Rebuilds the derived matrices from `J` and `V*`.
    pub fn from_parts(j_oakes: DMatrix<f64>, v_star: DMatrix<f64>) -> Result<Self> {
        let j_inverse = sym_inverse(&j_oakes)?;
        let v_sandwich = symmetrize(&(&j_inverse * &v_star * &j_inverse));
        Ok(Self { j_oakes, v_star, v_sandwich, j_inverse })
    }
}

pub fn information_matrices(params: &MixtureParams, data: &Dataset) -> Result<InformationMatrices> {
    let j = oakes_information(params, data)?;
    let scores = per_area_scores(params, data)?;
    InformationMatrices::from_parts(j, outer_product_of_scores(&scores))
}
