use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use super::{InnError, Result};

/// Floating-point element type of network tensors (`f32` or `f64`).
pub trait Real: Float + NumAssign + Sum + Send + Sync + Debug + Default + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Multi-channel field over a 3D box, channel-major then C order in space.
/// 2D fields use `dims[1] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField<T> {
    channels: usize,
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Real> TensorField<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        TensorField { channels, dims, data: vec![T::zero(); channels * dims.iter().product::<usize>()] }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        if channels == 0 || data.len() != n {
            return Err(InnError::Shape(format!(
                "{} values do not fill {channels} channels of {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(InnError::NonFinite);
        }
        Ok(TensorField { channels, dims, data })
    }

    pub fn from_f64(channels: usize, dims: [usize; 3], data: &[f64]) -> Result<Self> {
        Self::from_vec(channels, dims, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let s = self.spatial_len();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let s = self.spatial_len();
        &mut self.data[c * s..(c + 1) * s]
    }

    /// Contiguous block of channels `[start, start + count)`.
    pub fn channel_block(&self, start: usize, count: usize) -> TensorField<T> {
        let s = self.spatial_len();
        TensorField {
            channels: count,
            dims: self.dims,
            data: self.data[start * s..(start + count) * s].to_vec(),
        }
    }

    pub fn set_channel_block(&mut self, start: usize, block: &TensorField<T>) {
        let s = self.spatial_len();
        self.data[start * s..(start + block.channels) * s].copy_from_slice(&block.data);
    }

    /// Channel concatenation; all parts share spatial dims.
    pub fn concat(parts: &[&TensorField<T>]) -> Result<TensorField<T>> {
        let dims = parts.first().map(|p| p.dims).ok_or_else(|| InnError::Shape("empty concat".into()))?;
        if parts.iter().any(|p| p.dims != dims) {
            return Err(InnError::Shape("concat of fields with different spatial dims".into()));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * dims.iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(TensorField { channels, dims, data })
    }

    pub fn cast<U: Real>(&self) -> TensorField<U> {
        TensorField { channels: self.channels, dims: self.dims, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn scaled(&self, a: T) -> TensorField<T> {
        TensorField { channels: self.channels, dims: self.dims, data: self.data.iter().map(|&v| v * a).collect() }
    }

    pub fn add_assign(&mut self, other: &TensorField<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sub_assign(&mut self, other: &TensorField<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= *b;
        }
    }

    pub fn dot(&self, other: &TensorField<T>) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &TensorField<T>) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0f64, |m, (a, b)| m.max((*a - *b).abs().as_f64()))
    }

    pub fn same_shape(&self, other: &TensorField<T>) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }
}
