//! Rank-4 `[batch, channels, height, width]` tensors for latent and pixel
//! space.

use ndarray::{Array4, ArrayD, Ix4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal_array;
use crate::scalar::Scalar;

macro_rules! rank4_tensor {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<S>(pub Array4<S>);

        impl<S: Scalar> $name<S> {
            pub fn new(data: Array4<S>) -> Self {
                Self(data)
            }

            pub fn zeros(shape: [usize; 4]) -> Self {
                Self(Array4::zeros(shape))
            }

            pub fn from_elem(shape: [usize; 4], value: S) -> Self {
                Self(Array4::from_elem(shape, value))
            }

            pub fn from_shape_vec(shape: [usize; 4], data: Vec<S>) -> Result<Self> {
                let len = data.len();
                Array4::from_shape_vec(shape, data)
                    .map(Self)
                    .map_err(|_| Error::arg(format!("{len} values cannot fill shape {shape:?}")))
            }

            /// Standard-normal entries.
            pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Self {
                Self::from_dyn(normal_array(rng, &shape)).expect("rank 4")
            }

            pub fn from_dyn(a: ArrayD<S>) -> Result<Self> {
                let shape = a.shape().to_vec();
                a.into_dimensionality::<Ix4>()
                    .map(|a| Self(a.as_standard_layout().into_owned()))
                    .map_err(|_| Error::arg(format!("expected a rank-4 tensor, got shape {shape:?}")))
            }

            pub fn into_dyn(self) -> ArrayD<S> {
                self.0.into_dyn()
            }

            pub fn to_dyn(&self) -> ArrayD<S> {
                self.0.clone().into_dyn()
            }

            pub fn shape(&self) -> [usize; 4] {
                let s = self.0.shape();
                [s[0], s[1], s[2], s[3]]
            }

            pub fn batch(&self) -> usize {
                self.0.shape()[0]
            }

            pub fn as_slice(&self) -> &[S] {
                self.0.as_slice().expect("standard layout")
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn check_same_shape(&self, other: &Self) -> Result<()> {
                if self.shape() == other.shape() {
                    Ok(())
                } else {
                    Err(Error::shape(&self.shape(), &other.shape()))
                }
            }

            /// Rows `start..end` of the batch axis.
            pub fn slice_batch(&self, start: usize, end: usize) -> Self {
                Self(self.0.slice(ndarray::s![start..end, .., .., ..]).to_owned())
            }

            pub fn concat_batch(parts: &[Self]) -> Result<Self> {
                let views: Vec<_> = parts.iter().map(|p| p.0.view()).collect();
                ndarray::concatenate(ndarray::Axis(0), &views)
                    .map(Self)
                    .map_err(|e| Error::arg(format!("cannot stack tensors: {e}")))
            }

            pub fn cast<T: Scalar>(&self) -> $name<T> {
                $name(self.0.mapv(|v| T::lit(v.as_f64())))
            }
        }
    };
}

rank4_tensor!(
    /// A latent-space tensor.
    LatentTensor
);
rank4_tensor!(
    /// A pixel-space image batch with values in `[-1, 1]`.
    ImageTensor
);

impl<S: Scalar> ImageTensor<S> {
    pub fn clamp_unit(&self) -> Self {
        let lo = -S::one();
        Self(self.0.mapv(|v| v.max(lo).min(S::one())))
    }

    pub fn in_range(&self) -> bool {
        self.0.iter().all(|&v| v >= -S::one() && v <= S::one())
    }
}
