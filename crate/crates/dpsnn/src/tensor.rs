//! Minimal channel-major feature-map container.
//!
//! Everything in the engine is either a `(C, H, W)` feature map for one
//! sample at one time step, or a flat `Vec` of scalars. Row-major layout:
//! index `(c, y, x)` lives at `c*h*w + y*w + x`.

use crate::real::Real;

/// Spatial shape of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn spatial(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Dense `(C, H, W)` tensor of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Shape,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![R::zero(); shape.len()],
        }
    }

    /// Wraps an existing buffer; `data.len()` must equal `shape.len()`.
    pub fn from_vec(shape: Shape, data: Vec<R>) -> Self {
        assert_eq!(
            data.len(),
            shape.len(),
            "tensor buffer length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, c: usize, y: usize, x: usize) -> R {
        self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut R {
        &mut self.data[(c * self.shape.h + y) * self.shape.w + x]
    }

    /// Channel plane as a contiguous slice of `h*w` scalars.
    pub fn channel(&self, c: usize) -> &[R] {
        let sp = self.shape.spatial();
        &self.data[c * sp..(c + 1) * sp]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [R] {
        let sp = self.shape.spatial();
        &mut self.data[c * sp..(c + 1) * sp]
    }

    pub fn fill(&mut self, v: R) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts elementwise into another scalar width.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| S::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}
