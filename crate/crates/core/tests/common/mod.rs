#![allow(dead_code)]

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surrogate_uq::propagate::InputPosterior;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Largest entrywise deviation relative to the largest reference entry.
pub fn mat_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

/// Well-conditioned random invertible matrix.
pub fn random_transform(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    loop {
        let t = DMatrix::from_fn(n, n, |i, j| {
            let d = if i == j { 1.0 } else { 0.0 };
            d + 0.4 * rng.random_range(-1.0..1.0)
        });
        let sv = t.singular_values();
        if sv.min() > 0.2 && sv.max() / sv.min() < 50.0 {
            return t;
        }
    }
}

pub fn uniform_input(n: usize, n_a: usize, lo: f64, hi: f64, seed: u64) -> InputPosterior {
    let mut r = rng(seed);
    let samples = DMatrix::from_fn(n, n_a, |_, _| r.random_range(lo..hi));
    InputPosterior::new(samples, None).unwrap()
}

pub fn write_matrix_csv(path: &Path, header: &[&str], m: &DMatrix<f64>) {
    let mut s = header.join(",");
    s.push('\n');
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}
