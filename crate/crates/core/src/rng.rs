//! Seeded randomness helpers.
//!
//! Every stochastic choice in the crate (data synthesis, adapter init, batch
//! shuffling, dead-column refresh) draws from a ChaCha8 stream keyed by an
//! explicit u64, so a run is a pure function of its config and seed. Distinct
//! purposes get distinct sub-seeds via [`splitmix64`] to keep the streams
//! independent of each other.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::linalg::{qr_thin, Matrix};

/// SplitMix64 mixing step; used to derive independent sub-seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for a named stream: mixes the base seed with a stream tag.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix with iid N(0, std^2) entries, filled in row-major order.
pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let z: f64 = StandardNormal.sample(rng);
        data.push(z * std);
    }
    Matrix::from_vec(rows, cols, data).expect("gaussian entries are finite")
}

/// Unit vector drawn uniformly from the sphere in `dim` dimensions.
pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for x in &mut v {
                *x /= norm;
            }
            return v;
        }
    }
}

/// Random d x k matrix with orthonormal columns (QR of a Gaussian draw).
pub fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Result<Matrix> {
    let g = gaussian_matrix(rng, d, k, 1.0);
    let (q, _r) = qr_thin(&g)?;
    Ok(q)
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle(rng: &mut ChaCha8Rng, idx: &mut [usize]) {
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
}
