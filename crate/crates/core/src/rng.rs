//! Seeded random streams. Every stochastic operation takes one of these
//! explicitly; there is no global generator.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream, e.g. one per training step.
pub fn derive(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> S {
    S::lit(rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_array<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> ArrayD<S> {
    let n = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| normal(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}
