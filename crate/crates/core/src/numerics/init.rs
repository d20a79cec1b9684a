use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Half-width of the Xavier (Glorot) uniform interval for a `rows x cols` weight.
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Xavier-uniform tensor drawn from a dedicated generator seeded with `seed`.
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_init_with(rows, cols, &mut rng)
}

/// Xavier-uniform tensor drawn from a caller-owned generator.
pub fn xavier_init_with<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!(
            "xavier_init of a {rows}x{cols} tensor"
        )));
    }
    let bound = xavier_bound(rows, cols);
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Ok(Tensor::from_raw(rows, cols, data))
}
