//! The first-order bias direction used by `b1` against the Monte Carlo bias of
//! the ML estimator on a correctly specified two-point mixture.

use npsae::em::{fit, EmConfig};
use npsae::model::{logistic, AreaSample, Dataset};
use npsae::mse::bias_globals;
use rand::Rng;

const TRUTH: [f64; 4] = [1.0, -1.0, 1.0, 0.4];

fn simulate(m: usize, seed: u64) -> Dataset {
    let mut rng = npsae::seed::rng(seed);
    let areas = (0..m)
        .map(|i| {
            let alpha = if rng.random::<f64>() < TRUTH[3] { TRUTH[1] } else { TRUTH[2] };
            let x: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let y = x.iter().map(|&v| u8::from(rng.random::<f64>() < logistic(TRUTH[0] * v + alpha))).collect();
            AreaSample::new(format!("a{i}"), 1, y, x).unwrap()
        })
        .collect();
    Dataset::new(1, areas).unwrap()
}

#[test]
fn bias_direction_matches_monte_carlo_bias() {
    let reps = 400;
    // paired differences (theta_hat - truth) - predicted bias
    let mut diffs: Vec<[f64; 4]> = Vec::new();
    let mut raw = [0.0; 4];
    for r in 0..reps {
        let data = simulate(40, 5000 + r);
        let f = fit(&data, 2, &EmConfig::default()).unwrap();
        if f.params.g() != 2 {
            continue;
        }
        let Ok(gl) = bias_globals(&f.params, &data) else { continue };
        let th = f.params.to_free();
        let mut d = [0.0; 4];
        for k in 0..4 {
            d[k] = th[k] - TRUTH[k] - gl.direction[k];
            raw[k] += th[k] - TRUTH[k];
        }
        diffs.push(d);
    }
    let n = diffs.len() as f64;
    assert!(n > 0.9 * reps as f64);
    for k in 0..4 {
        let mean = diffs.iter().map(|d| d[k]).sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        println!("coord {k}: mc bias {:.5} residual {mean:.5} se {se:.5}", raw[k] / n);
        assert!(mean.abs() < 3.5 * se, "coordinate {k}: residual bias {mean} exceeds 3.5 se {se}");
    }
}
