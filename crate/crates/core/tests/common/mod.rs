//! Shared test oracles.

#![allow(dead_code, clippy::needless_range_loop)]

use gelvec::svm::{dual_objective, label_of, train_smo, Dataset, Kernel, SvmParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const STEPS: i64 = 50;

pub struct GridOptimum {
    pub objective: f64,
    pub alphas: [f64; 4],
}

fn gram(d: &Dataset) -> [[f64; 4]; 4] {
    let mut k = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            k[i][j] = Kernel::Linear.eval(&d.vectors()[i], &d.vectors()[j]);
        }
    }
    k
}

fn objective(alphas: &[f64; 4], y: &[f64; 4], k: &[[f64; 4]; 4]) -> f64 {
    let mut quad = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            quad += alphas[i] * alphas[j] * y[i] * y[j] * k[i][j];
        }
    }
    alphas.iter().sum::<f64>() - 0.5 * quad
}

/// Maximizes the dual over α ∈ {0, C/50, ..., C}⁴ with Σ αᵢyᵢ = 0 exactly
/// (checked in integer grid units).
pub fn grid_maximum(d: &Dataset, c: f64) -> GridOptimum {
    let k = gram(d);
    let yi: Vec<i64> = d.labels().iter().map(|&l| i64::from(l)).collect();
    let y = [yi[0] as f64, yi[1] as f64, yi[2] as f64, yi[3] as f64];
    let mut best = GridOptimum {
        objective: f64::NEG_INFINITY,
        alphas: [0.0; 4],
    };
    for m0 in 0..=STEPS {
        for m1 in 0..=STEPS {
            for m2 in 0..=STEPS {
                let m3 = -yi[3] * (yi[0] * m0 + yi[1] * m1 + yi[2] * m2);
                if !(0..=STEPS).contains(&m3) {
                    continue;
                }
                let alphas = [m0, m1, m2, m3].map(|m| c * m as f64 / STEPS as f64);
                let value = objective(&alphas, &y, &k);
                if value > best.objective {
                    best = GridOptimum {
                        objective: value,
                        alphas,
                    };
                }
            }
        }
    }
    best
}

/// Bias from the grid multipliers: mean over free points, otherwise the
/// midpoint of the interval allowed by the bounded points.
pub fn grid_bias(d: &Dataset, opt: &GridOptimum, c: f64) -> f64 {
    let k = gram(d);
    let y: Vec<f64> = d.labels().iter().map(|&l| f64::from(l)).collect();
    let margin = |i: usize| (0..4).map(|j| opt.alphas[j] * y[j] * k[j][i]).sum::<f64>();
    let free: Vec<usize> = (0..4)
        .filter(|&i| opt.alphas[i] > 0.0 && opt.alphas[i] < c)
        .collect();
    if !free.is_empty() {
        return free.iter().map(|&i| y[i] - margin(i)).sum::<f64>() / free.len() as f64;
    }
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..4 {
        let t = y[i] - margin(i);
        if (y[i] > 0.0) != (opt.alphas[i] >= c) {
            lo = lo.max(t);
        } else {
            hi = hi.min(t);
        }
    }
    0.5 * (lo + hi)
}

pub fn grid_predict(d: &Dataset, opt: &GridOptimum, bias: f64, x: &[f64]) -> i8 {
    let value: f64 = (0..4)
        .map(|j| opt.alphas[j] * f64::from(d.labels()[j]) * Kernel::Linear.eval(&d.vectors()[j], x))
        .sum::<f64>()
        + bias;
    label_of(value)
}

pub fn random_four_point(rng: &mut ChaCha8Rng) -> Dataset {
    let mut labels = vec![1i8, 1, -1, -1];
    // random order of the labels, two per class
    for i in (1..4).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let vectors = labels
        .iter()
        .map(|&l| {
            let centre = f64::from(l);
            vec![
                centre + rng.random_range(-1.0..1.0),
                centre + rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    Dataset::new(vectors, labels).unwrap()
}

/// Outcome of training on one four-point dataset against the grid optimum.
pub struct OracleCase {
    pub trained: f64,
    pub grid: f64,
    pub predictions_agree: bool,
}

pub fn four_point_case(d: &Dataset, params: &SvmParams) -> OracleCase {
    let model = train_smo(d, params).unwrap();
    let trained = dual_objective(&model, d).unwrap();
    let grid = grid_maximum(d, params.c);
    let bias = grid_bias(d, &grid, params.c);
    let predictions_agree = d
        .vectors()
        .iter()
        .all(|x| model.predict(x).unwrap() == grid_predict(d, &grid, bias, x));
    OracleCase {
        trained,
        grid: grid.objective,
        predictions_agree,
    }
}
