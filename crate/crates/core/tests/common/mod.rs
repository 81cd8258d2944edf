#![allow(dead_code)]

use aesprobe::rng::{StreamRng, stream_rng};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> StreamRng {
    stream_rng(seed, 0xfeed)
}

pub fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(f64::MIN_POSITIVE)
}

/// Matrix times vector in plain loops.
pub fn matvec(x: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| (0..x.ncols()).map(|j| x[(i, j)] * w[j]).sum())
        .collect()
}
