//! Gauss-Hermite rules for a standard normal weight.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of the `n`-point rule integrating against N(0, 1).
///
/// Built with Golub-Welsch on the Jacobi matrix of the probabilists' Hermite
/// polynomials; weights sum to one. Nodes are ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // enforce exact symmetry of the rule
    for k in 0..n / 2 {
        let node = 0.5 * (pairs[n - 1 - k].0 - pairs[k].0);
        let weight = 0.5 * (pairs[n - 1 - k].1 + pairs[k].1);
        pairs[k] = (-node, weight);
        pairs[n - 1 - k] = (node, weight);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}
