#![allow(dead_code)]

use meshdeform::autodiff::Tensor;
use meshdeform::mesh::Point3;
use meshdeform::nn::init_uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries drawn from `U(-1, 1)`.
pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    init_uniform(rng, &[rows, cols], 1)
}

pub fn points(rng: &mut ChaCha8Rng, n: usize, half_width: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-half_width..half_width)))
        .collect()
}

/// A random permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

/// Rows of `t` in the order `perm` (row `i` of the result is row `perm[i]`).
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.cols();
    let data = perm.iter().flat_map(|&r| t.row(r).to_vec()).collect();
    Tensor::matrix(perm.len(), c, data).unwrap()
}

pub fn scaled(t: &Tensor, c: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}
