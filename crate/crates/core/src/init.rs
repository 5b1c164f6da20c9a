use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;

pub type ModelRng = ChaCha8Rng;

pub fn rng(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries drawn from `U(-scale, scale)`.
pub fn uniform(rng: &mut ModelRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Fan-in uniform init, `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in(rng: &mut ModelRng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
