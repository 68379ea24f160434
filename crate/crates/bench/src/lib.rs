//! Seeded inputs shared by the criterion benches.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vvt_core::attention::PositionGrid;
use vvt_core::block::{BlockConfig, BlockParams};
use vvt_core::{AttentionMode, Result};

/// Query, key and value matrices for one head on a `side x side` grid.
pub struct HeadInputs {
    pub grid: PositionGrid,
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn head_inputs(side: usize, dim: usize, seed: u64) -> Result<HeadInputs> {
    let grid = PositionGrid::square(side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.len();
    Ok(HeadInputs {
        grid,
        q: uniform(&mut rng, n, dim),
        k: uniform(&mut rng, n, dim),
        v: uniform(&mut rng, n, dim),
    })
}

/// A first-stage tiny block and one `(N, C)` input for it.
pub fn block_inputs(side: usize, mode: AttentionMode, seed: u64) -> Result<(BlockConfig, BlockParams<f32>, PositionGrid, Array2<f32>)> {
    let config = BlockConfig::new(96, 1, 2, 8, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = BlockParams::init(&config, &mut rng)?;
    let grid = PositionGrid::square(side)?;
    let x = uniform(&mut rng, grid.len(), config.dim);
    Ok((config, params, grid, x))
}
