//! Exact (O(n²)) t-SNE for desk-scale point sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 5.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

const MIN_GAIN: f64 = 0.01;
const PERPLEXITY_TOL: f64 = 1e-5;

pub fn tsne_2d(rows: &[&[f64]], params: &TsneParams, seed: u64) -> Vec<[f64; 2]> {
    let n = rows.len();
    let p = joint_probabilities(rows, params.perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];

    for iter in 0..params.iterations {
        let exaggeration = if iter < params.exaggeration_iterations {
            params.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < params.exaggeration_iterations { 0.5 } else { 0.8 };

        // Student-t affinities in the embedding
        let mut sum_num = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                num[i * n + j] = v;
                sum_num += v;
            }
        }

        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / sum_num).max(1e-12);
                let mult = (exaggeration * p[i * n + j] - q) * num[i * n + j];
                g[0] += mult * (y[i][0] - y[j][0]);
                g[1] += mult * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }

        for i in 0..n {
            for c in 0..2 {
                let same_sign = (grad[i][c] > 0.0) == (velocity[i][c] > 0.0);
                gains[i][c] = if same_sign {
                    gains[i][c] * 0.8
                } else {
                    gains[i][c] + 0.2
                };
                gains[i][c] = gains[i][c].max(MIN_GAIN);
                velocity[i][c] =
                    momentum * velocity[i][c] - params.learning_rate * gains[i][c] * grad[i][c];
                y[i][c] += velocity[i][c];
            }
        }

        let mut mean = [0.0; 2];
        for point in &y {
            mean[0] += point[0];
            mean[1] += point[1];
        }
        for point in &mut y {
            point[0] -= mean[0] / n as f64;
            point[1] -= mean[1] / n as f64;
        }
    }
    y
}

/// Symmetrized input affinities; each row's Gaussian bandwidth is found by
/// bisection so that its entropy matches `ln(perplexity)`.
fn joint_probabilities(rows: &[&[f64]], perplexity: f64) -> Vec<f64> {
    let n = rows.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = rows[i]
                .iter()
                .zip(rows[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let mut row = vec![0.0; n];
        for _ in 0..200 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if i == j { 0.0 } else { (-dist[i * n + j] * beta).exp() };
                sum += row[j];
            }
            if sum == 0.0 {
                // bandwidth far too narrow
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
                continue;
            }
            let mut weighted = 0.0;
            for j in 0..n {
                weighted += dist[i * n + j] * row[j];
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for v in &mut row {
                *v /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < PERPLEXITY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        cond[i * n..(i + 1) * n].copy_from_slice(&row);
    }

    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / denom).max(1e-12);
        }
    }
    p
}
