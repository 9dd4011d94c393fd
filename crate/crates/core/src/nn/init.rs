//! Deterministic parameter initialization.
//!
//! Every parameter draws from its own ChaCha8 stream seeded by
//! `(global seed, parameter name)`, so identical seeds yield bit-identical
//! parameters and two configurations that share a parameter name initialize
//! it identically regardless of which other parameters exist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// RNG stream derived from a global seed and a parameter name.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name.as_bytes())))
}

/// Standard normal draw via Box-Muller. All draws happen in `f64` so the same
/// seed produces the same values (up to storage rounding) at any precision.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He/Kaiming-normal tensor: std = sqrt(2/fan_in).
pub fn he_normal<S: Scalar>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let mut rng = param_rng(seed, name);
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(normal(&mut rng) * std))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Convolution kernel with each spatial slice orthogonalized: for every
/// kernel offset, the `[out, in]` matrix has orthonormal rows (or columns,
/// whichever fits), scaled by `1/sqrt(#offsets)`.
pub fn orthogonal_kernel<S: Scalar>(seed: u64, name: &str, shape: &[usize]) -> Tensor<S> {
    let (out_ch, in_ch) = (shape[0], shape[1]);
    let slices: usize = shape[2..].iter().product();
    let mut rng = param_rng(seed, name);
    let gain = 1.0 / (slices as f64).sqrt();

    // one [out, in] matrix per kernel offset
    let mut mats: Vec<Vec<f64>> = Vec::with_capacity(slices);
    for _ in 0..slices {
        let mut m: Vec<f64> = (0..out_ch * in_ch).map(|_| normal(&mut rng)).collect();
        orthonormalize_rows(&mut m, out_ch, in_ch);
        mats.push(m);
    }

    let mut data = vec![S::ZERO; shape.iter().product()];
    for o in 0..out_ch {
        for i in 0..in_ch {
            for s in 0..slices {
                data[(o * in_ch + i) * slices + s] = S::from_f64(mats[s][o * in_ch + i] * gain);
            }
        }
    }
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Modified Gram-Schmidt on the rows of an `r x c` matrix. When `r > c` only
/// the leading `c` rows can be mutually orthogonal; later rows are just
/// normalized after projection, which is adequate for initialization.
fn orthonormalize_rows(m: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..i.min(c) {
            let mut dot = 0f64;
            for k in 0..c {
                dot += m[i * c + k] * m[j * c + k];
            }
            for k in 0..c {
                m[i * c + k] -= dot * m[j * c + k];
            }
        }
        let mut norm = 0f64;
        for k in 0..c {
            norm += m[i * c + k] * m[i * c + k];
        }
        let norm = norm.sqrt().max(1e-12);
        for k in 0..c {
            m[i * c + k] /= norm;
        }
    }
}

pub fn zeros<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::zeros(shape)
}

pub fn constant<S: Scalar>(shape: &[usize], v: f64) -> Tensor<S> {
    Tensor::filled(shape, S::from_f64(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a: Tensor<f32> = he_normal(7, "layer.w", &[4, 3], 3);
        let b: Tensor<f32> = he_normal(7, "layer.w", &[4, 3], 3);
        assert_eq!(a.data(), b.data());
        let c: Tensor<f32> = he_normal(8, "layer.w", &[4, 3], 3);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn name_isolation() {
        let a: Tensor<f32> = he_normal(7, "a", &[8], 8);
        let b: Tensor<f32> = he_normal(7, "b", &[8], 8);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let t: Tensor<f64> = orthogonal_kernel(3, "k", &[4, 8, 1, 1]);
        // single slice, gain 1: rows of the 4x8 matrix are orthonormal
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0f64;
                for k in 0..8 {
                    dot += t.data()[i * 8 + k] * t.data()[j * 8 + k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-9, "({i},{j}) -> {dot}");
            }
        }
    }
}
