//! Homogeneous (no random effect) logistic regression by damped Newton.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::model::{dot, log1pexp, logistic, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousFit {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
}

fn loglik(data: &Dataset, intercept: f64, beta: &[f64]) -> f64 {
    let mut l = 0.0;
    for a in &data.areas {
        for j in 0..a.n() {
            let eta = intercept + dot(a.x(j), beta);
            l += a.y[j] as f64 * eta - log1pexp(eta);
        }
    }
    l
}

/// Maximum-likelihood logistic fit with an intercept.
pub fn fit_logistic(data: &Dataset) -> Result<HomogeneousFit> {
    let p = data.p();
    let k = p + 1;
    if data.n_total() == 0 {
        return Err(Error::InvalidInput("no sampled units".into()));
    }
    let mut theta = vec![0.0; k];
    let mut ll = loglik(data, 0.0, &theta[1..]);
    for iter in 1..=200 {
        let mut grad = DVector::<f64>::zeros(k);
        let mut info = DMatrix::<f64>::zeros(k, k);
        let mut z = vec![1.0; k];
        for a in &data.areas {
            for j in 0..a.n() {
                z[1..].copy_from_slice(a.x(j));
                let mu = logistic(dot(&z, &theta));
                let r = a.y[j] as f64 - mu;
                let w = mu * (1.0 - mu);
                for r1 in 0..k {
                    grad[r1] += r * z[r1];
                    for c in 0..=r1 {
                        info[(r1, c)] += w * z[r1] * z[c];
                    }
                }
            }
        }
        for r1 in 0..k {
            for c in 0..r1 {
                info[(c, r1)] = info[(r1, c)];
            }
        }
        let step = solve_spd(&info, &grad)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let l_new = loglik(data, cand[0], &cand[1..]);
            if l_new >= ll {
                accepted = Some((cand, l_new));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, l_new)) = accepted else {
            return Ok(HomogeneousFit { intercept: theta[0], beta: theta[1..].to_vec(), loglik: ll, iterations: iter });
        };
        let converged = grad.amax() < 1e-10 || (l_new - ll).abs() < 1e-14 * (1.0 + ll.abs());
        theta = cand;
        ll = l_new;
        if converged {
            return Ok(HomogeneousFit { intercept: theta[0], beta: theta[1..].to_vec(), loglik: ll, iterations: iter });
        }
    }
    Ok(HomogeneousFit { intercept: theta[0], beta: theta[1..].to_vec(), loglik: ll, iterations: 200 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AreaSample;
    use approx::assert_relative_eq;

    #[test]
    fn intercept_only_is_logit_of_mean() {
        let a = AreaSample::new("a", 0, vec![1, 0, 0, 1, 1, 0, 0, 0], vec![]).unwrap();
        let d = Dataset::new(0, vec![a]).unwrap();
        let f = fit_logistic(&d).unwrap();
        assert_relative_eq!(f.intercept, (3.0f64 / 5.0).ln(), epsilon = 1e-10);
    }
}
