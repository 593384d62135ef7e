//! The conditional U-Net generator and the pair-order discriminator.

mod discriminator;
mod generator;

use ndarray::Array2;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::LatentTensor;

/// Anything that maps `(z_t, t, z_low)` to a clean-latent estimate.
pub trait Denoiser<S: Scalar> {
    fn predict_clean(&self, z_t: &LatentTensor<S>, t: &[usize], z_low: &LatentTensor<S>) -> Result<LatentTensor<S>>;
}

/// Sinusoidal timestep embedding with interleaved `[sin, cos]` pairs.
///
/// Pair `i` uses frequency `10000^(-i / (dim/2))`, so `t = 0` yields
/// `[0, 1, 0, 1, ...]`.
pub fn time_embedding<S: Scalar>(t: &[usize], dim: usize) -> Result<Array2<S>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::arg(format!("time embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (row, &step) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let angle = step as f64 * freq;
            out[[row, 2 * i]] = S::lit(angle.sin());
            out[[row, 2 * i + 1]] = S::lit(angle.cos());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_timestep_alternates_zero_one() {
        let e = time_embedding::<f64>(&[0], 8).unwrap();
        assert_eq!(e.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn odd_dimension_is_rejected() {
        assert!(matches!(time_embedding::<f32>(&[1], 7), Err(Error::Argument(_))));
    }

    #[test]
    fn entries_lie_in_unit_interval() {
        let t: Vec<usize> = (0..1000).step_by(7).collect();
        let e = time_embedding::<f32>(&t, 32).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rows_are_pairwise_distinct_over_the_training_range() {
        let t: Vec<usize> = (1..=1000).collect();
        let e = time_embedding::<f64>(&t, 32).unwrap();
        for i in 0..t.len() {
            for j in (i + 1)..t.len() {
                let differs = e.row(i).iter().zip(e.row(j).iter()).any(|(a, b)| a != b);
                assert!(differs, "rows {} and {} coincide", t[i], t[j]);
            }
        }
    }
}
