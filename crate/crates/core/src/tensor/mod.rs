//! Dense rank-5 volumes, reverse-mode differentiation and the 3-D kernels
//! the networks are assembled from.
//!
//! Every tensor is laid out row-major as `(batch, channel, depth, height, width)`.
//! Values are generic over [`Element`] so the same graph can be evaluated in
//! `f32` for training and in `f64` for finite-difference verification.

mod element;
pub mod gradcheck;
pub(crate) mod kernels;
mod param;
mod tape;

pub use element::Element;
pub use param::{he_normal, ParamId, ParamStore, Parameter};
pub use tape::{attention_weights as attention_weights_for, fault, Bound, Gradients, Padding, Tape, Var};

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a rank-5 volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    /// Builds a shape, rejecting any zero extent.
    pub fn new(batch: usize, channels: usize, depth: usize, height: usize, width: usize) -> Result<Self> {
        let shape = Shape { batch, channels, depth, height, width };
        if shape.dims().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in {shape}")));
        }
        Ok(shape)
    }

    /// Shape with a cubic spatial extent.
    pub fn cube(batch: usize, channels: usize, edge: usize) -> Result<Self> {
        Self::new(batch, channels, edge, edge, edge)
    }

    pub const fn scalar() -> Self {
        Shape { batch: 1, channels: 1, depth: 1, height: 1, width: 1 }
    }

    pub fn from_dims(dims: [usize; 5]) -> Result<Self> {
        Self::new(dims[0], dims[1], dims[2], dims[3], dims[4])
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.batch, self.channels, self.depth, self.height, self.width]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.channels * self.voxels()
    }

    pub fn numel(&self) -> usize {
        self.batch * self.item_len()
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Shape { channels, ..*self }
    }

    pub fn with_spatial(&self, [depth, height, width]: [usize; 3]) -> Self {
        Shape { depth, height, width, ..*self }
    }

    pub fn with_batch(&self, batch: usize) -> Self {
        Shape { batch, ..*self }
    }

    /// Flat offset of `(b, c, d, h, w)`.
    #[inline]
    pub fn offset(&self, b: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((b * self.channels + c) * self.depth + d) * self.height + h) * self.width + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}x{}",
            self.batch, self.channels, self.depth, self.height, self.width
        )
    }
}

/// A dense rank-5 array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Volume<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(Volume { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Volume { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Builds a volume by evaluating `f(b, c, d, h, w)` at every voxel.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for d in 0..shape.depth {
                    for h in 0..shape.height {
                        for w in 0..shape.width {
                            data.push(f(b, c, d, h, w));
                        }
                    }
                }
            }
        }
        Volume { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(b, c, d, h, w)]
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Element>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = self.data[0];
        let mut hi = self.data[0];
        for &v in &self.data[1..] {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Copies one batch item out as a batch-1 volume.
    pub fn item(&self, b: usize) -> Volume<T> {
        let len = self.shape.item_len();
        Volume {
            shape: self.shape.with_batch(1),
            data: self.data[b * len..(b + 1) * len].to_vec(),
        }
    }

    /// Stacks batch-compatible volumes along the batch axis.
    pub fn stack(items: &[&Volume<T>]) -> Result<Volume<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let mut batch = 0;
        let mut data = Vec::new();
        for v in items {
            if v.shape.with_batch(1) != first.shape.with_batch(1) {
                return Err(Error::Shape(format!(
                    "cannot stack {} with {}",
                    v.shape, first.shape
                )));
            }
            batch += v.shape.batch;
            data.extend_from_slice(&v.data);
        }
        Ok(Volume { shape: first.shape.with_batch(batch), data })
    }

    /// Largest absolute elementwise difference, in f64.
    pub fn max_abs_diff(&self, other: &Volume<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(1, 0, 2, 2, 2).is_err());
        assert_eq!(Shape::cube(2, 3, 4).unwrap().numel(), 2 * 3 * 64);
    }

    #[test]
    fn buffer_length_must_match() {
        let s = Shape::cube(1, 1, 2).unwrap();
        assert!(Volume::<f32>::from_vec(s, vec![0.0; 7]).is_err());
        assert!(Volume::<f32>::from_vec(s, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn offset_is_row_major() {
        let s = Shape::new(2, 3, 4, 5, 6).unwrap();
        let v = Volume::<f64>::from_fn(s, |b, c, d, h, w| {
            (b * 10000 + c * 1000 + d * 100 + h * 10 + w) as f64
        });
        assert_eq!(v.at(1, 2, 3, 4, 5), 12345.0);
        assert_eq!(v.data()[s.offset(1, 2, 3, 4, 5)], 12345.0);
        assert_eq!(v.data()[1], 1.0);
    }

    #[test]
    fn stack_and_item_round_trip() {
        let s = Shape::cube(1, 2, 2).unwrap();
        let a = Volume::<f32>::full(s, 1.0);
        let b = Volume::<f32>::full(s, 2.0);
        let st = Volume::stack(&[&a, &b]).unwrap();
        assert_eq!(st.shape().batch, 2);
        assert_eq!(st.item(1), b);
    }
}
