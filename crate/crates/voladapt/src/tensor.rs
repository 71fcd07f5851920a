//! Dense row-major f64 tensors.
//!
//! Volumes are rank-3 `[d0, d1, d2]`, feature maps rank-4 `[c, d0, d1, d2]`,
//! scalars rank-0. The last axis is contiguous; hot loops in the network code
//! operate on raw slices obtained via [`Tensor::data`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Build a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index of `[i, j, k]` in a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx3(i, j, k)]
    }

    #[inline]
    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.idx3(i, j, k);
        self.data[idx] = v;
    }

    /// Contiguous spatial slice of channel `c` in a rank-4 tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 4);
        let plane: usize = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 4);
        let plane: usize = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Reinterpret a rank-3 volume as a single-channel rank-4 map.
    pub fn insert_channel_axis(mut self) -> Tensor {
        debug_assert_eq!(self.rank(), 3);
        self.shape.insert(0, 1);
        self
    }

    /// Drop a leading channel axis of size 1.
    pub fn squeeze_channel_axis(mut self) -> Tensor {
        debug_assert_eq!(self.rank(), 4);
        debug_assert_eq!(self.shape[0], 1);
        self.shape.remove(0);
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.data.iter_mut() {
            *v *= alpha;
        }
    }

    /// Exact byte equality, distinguishing -0.0 from 0.0 and NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn idx3_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 3), 3.0);
        assert_eq!(t.at3(0, 1, 0), 4.0);
        assert_eq!(t.at3(1, 0, 0), 12.0);
        assert_eq!(t.at3(1, 2, 3), 23.0);
    }

    #[test]
    fn channel_slices_are_disjoint() {
        let t = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64);
        assert_eq!(t.channel(0), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        assert_eq!(t.channel(1), &[8., 9., 10., 11., 12., 13., 14., 15.]);
    }

    #[test]
    fn bit_eq_distinguishes_negative_zero() {
        let a = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![-0.0]).unwrap();
        assert!(!a.bit_eq(&b));
        assert_eq!(a, b); // PartialEq on f64 treats them equal
    }
}
