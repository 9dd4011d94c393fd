//! Dense row-major tensors and the convolution geometry descriptor.
//!
//! The canonical activation layout is `[C, T, H, W]`; per-frame 2D operations
//! treat the time axis as a leading batch axis. Rank-3 tensors `[C, H, W]` are
//! single frames.

pub mod io;
pub mod ops;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "data",
                format!(
                    "shape {:?} implies {} elements but {} were provided",
                    shape,
                    n,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Scalar tensor (shape `[1]`).
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(shape_err(
                "all",
                format!("expected a scalar tensor, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Reinterprets the data under a new shape of identical volume.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "all",
                format!(
                    "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                    self.shape,
                    self.data.len(),
                    shape,
                    n
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts element-by-element into another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Kernel geometry for convolutions and pooling over `(t, h, w)`.
///
/// Axes not present in the input behave as extent-1 with kernel 1. The output
/// extent along each axis is `floor((in + 2*pad - k) / stride) + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        let spec = ConvSpec {
            kernel,
            stride,
            pad,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spatial-only kernel (time axis untouched).
    pub fn spatial(kh: usize, kw: usize) -> Self {
        ConvSpec {
            kernel: [1, kh, kw],
            stride: [1, 1, 1],
            pad: [0, 0, 0],
        }
    }

    pub fn cube(kt: usize, kh: usize, kw: usize) -> Self {
        ConvSpec {
            kernel: [kt, kh, kw],
            stride: [1, 1, 1],
            pad: [0, 0, 0],
        }
    }

    pub fn with_stride(mut self, st: usize, sh: usize, sw: usize) -> Self {
        self.stride = [st, sh, sw];
        self
    }

    pub fn with_pad(mut self, pt: usize, ph: usize, pw: usize) -> Self {
        self.pad = [pt, ph, pw];
        self
    }

    /// Pads every axis by `floor(k/2)` so odd kernels at stride 1 preserve extents.
    pub fn same_padded(mut self) -> Self {
        self.pad = [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2];
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (i, name) in ["t", "h", "w"].iter().enumerate() {
            if self.kernel[i] < 1 {
                return Err(shape_err(name, format!("kernel extent must be >= 1 on {name}")));
            }
            if self.stride[i] < 1 {
                return Err(shape_err(name, format!("stride must be >= 1 on {name}")));
            }
        }
        Ok(())
    }

    /// Output extent along `axis` (0=t, 1=h, 2=w) for input extent `n`.
    pub fn out_extent(&self, axis: usize, n: usize) -> Result<usize> {
        let k = self.kernel[axis];
        let s = self.stride[axis];
        let p = self.pad[axis];
        let padded = n + 2 * p;
        if padded < k {
            let name = ["t", "h", "w"][axis];
            return Err(shape_err(
                name,
                format!("kernel {k} larger than padded input {padded} on {name}"),
            ));
        }
        Ok((padded - k) / s + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let r = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn reshape_preserves_volume() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn out_extent_formula() {
        // out = floor((in + 2*pad - k)/stride) + 1
        let spec = ConvSpec::spatial(3, 3).with_stride(1, 2, 2).with_pad(0, 1, 1);
        assert_eq!(spec.out_extent(1, 44).unwrap(), 22);
        assert_eq!(spec.out_extent(2, 88).unwrap(), 44);
        assert!(spec.out_extent(1, 0).is_err());
    }
}
