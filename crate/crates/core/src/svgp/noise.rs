//! Counter-based standard-normal draws.
//!
//! Every example's noise block is a pure function of
//! `(seed, stream, example index)`, so Monte-Carlo terms do not depend on
//! how examples are batched or ordered.

use ndarray::{Array3, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream used for prediction draws (training uses the epoch index).
pub const PREDICT_STREAM: u64 = u64::MAX;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn key(seed: u64, stream: u64, example: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ example)
}

/// Fills a `classes × samples` block for one example.
pub fn fill_example(mut out: ArrayViewMut2<f64>, seed: u64, stream: u64, example: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(key(seed, stream, example));
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

/// Noise tensor of shape `(examples.len(), classes, samples)`.
pub fn draw(seed: u64, stream: u64, examples: &[usize], classes: usize, samples: usize) -> Array3<f64> {
    let mut out = Array3::zeros((examples.len(), classes, samples));
    for (row, &ex) in examples.iter().enumerate() {
        fill_example(out.index_axis_mut(ndarray::Axis(0), row), seed, stream, ex as u64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_do_not_depend_on_batch_order() {
        let a = draw(7, 1, &[3, 9, 4], 3, 5);
        let b = draw(7, 1, &[4, 3], 3, 5);
        assert_eq!(a.index_axis(ndarray::Axis(0), 0), b.index_axis(ndarray::Axis(0), 1));
        assert_eq!(a.index_axis(ndarray::Axis(0), 2), b.index_axis(ndarray::Axis(0), 0));
        let c = draw(7, 2, &[3], 3, 5);
        assert_ne!(a.index_axis(ndarray::Axis(0), 0), c.index_axis(ndarray::Axis(0), 0));
    }

    #[test]
    fn roughly_standard_normal() {
        let ids: Vec<usize> = (0..2000).collect();
        let z = draw(1, 0, &ids, 3, 8);
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let var = z.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
