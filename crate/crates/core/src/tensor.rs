//! Dense rank-4 feature maps in NCHW layout and grouped views over them.
//!
//! Layout is row-major with the batch index outermost and the column index
//! innermost, so the `C / G` channels of one group are contiguous for each
//! sample and a grouped view is a pure index transform.

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the training path, `f64` the
/// verification path. Reductions widen to `f64` regardless.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape { n, c, h, w };
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(shape.dims()));
        }
        Ok(shape)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn volume(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Spatial positions per channel plane.
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A dense `N x C x H x W` array.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    /// Validates length, positive dimensions and finiteness.
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(shape.n, shape.c, shape.h, shape.w)?;
        if data.len() != shape.volume() {
            return Err(Error::LengthMismatch {
                expected: shape.volume(),
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn from_dims(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        Self::new(shape, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        FeatureMap {
            shape,
            data: vec![T::zero(); shape.volume()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.volume());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        FeatureMap { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.offset(n, c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Contiguous `C x H x W` block of one sample.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.positions();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.volume() != self.data.len() {
            return Err(Error::LengthMismatch {
                expected: shape.volume(),
                found: self.data.len(),
            });
        }
        Ok(FeatureMap {
            shape,
            data: self.data,
        })
    }

    /// Gathers the given samples into a new batch.
    pub fn select(&self, samples: &[usize]) -> Self {
        let shape = Shape {
            n: samples.len(),
            ..self.shape
        };
        let mut data = Vec::with_capacity(shape.volume());
        for &n in samples {
            data.extend_from_slice(self.sample(n));
        }
        FeatureMap { shape, data }
    }

    /// Splits the channel dimension into `groups` contiguous groups.
    pub fn group_split(&self, groups: usize) -> Result<GroupedView<'_, T>> {
        group_split(self, groups)
    }

    pub fn group_split_mut(&mut self, groups: usize) -> Result<GroupedViewMut<'_, T>> {
        let layout = GroupLayout::new(self.shape, groups)?;
        Ok(GroupedViewMut {
            source: self,
            layout,
        })
    }
}

/// Index arithmetic shared by the shared and mutable grouped views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub shape: Shape,
    pub groups: usize,
    pub per_group_channels: usize,
    pub positions: usize,
}

impl GroupLayout {
    pub fn new(shape: Shape, groups: usize) -> Result<Self> {
        if groups == 0 || shape.c % groups != 0 {
            return Err(Error::IndivisibleChannels {
                channels: shape.c,
                groups,
            });
        }
        Ok(GroupLayout {
            shape,
            groups,
            per_group_channels: shape.c / groups,
            positions: shape.positions(),
        })
    }

    /// Flat offset of element `(n, g, d, i)`; it aliases source element
    /// `(n, g * C/G + d, i / W, i % W)`.
    #[inline]
    pub fn offset(&self, n: usize, g: usize, d: usize, i: usize) -> usize {
        let c = g * self.per_group_channels + d;
        self.shape.offset(n, c, i / self.shape.w, i % self.shape.w)
    }

    /// Range of the contiguous `(C/G) x m` block for `(n, g)`.
    #[inline]
    pub fn cell_range(&self, n: usize, g: usize) -> std::ops::Range<usize> {
        let len = self.per_group_channels * self.positions;
        let start = (n * self.groups + g) * len;
        start..start + len
    }

    /// Number of `(sample, group)` cells.
    pub fn cells(&self) -> usize {
        self.shape.n * self.groups
    }

    fn check(&self, n: usize, g: usize) -> Result<()> {
        if n >= self.shape.n {
            return Err(Error::IndexOutOfRange {
                what: "batch",
                index: n,
                bound: self.shape.n,
            });
        }
        if g >= self.groups {
            return Err(Error::IndexOutOfRange {
                what: "group",
                index: g,
                bound: self.groups,
            });
        }
        Ok(())
    }
}

/// Read-only `(batch, groups, C/G, positions)` view of a feature map.
#[derive(Debug, Clone, Copy)]
pub struct GroupedView<'a, T> {
    source: &'a FeatureMap<T>,
    layout: GroupLayout,
}

impl<'a, T: Real> GroupedView<'a, T> {
    pub fn layout(&self) -> GroupLayout {
        self.layout
    }

    pub fn groups(&self) -> usize {
        self.layout.groups
    }

    pub fn per_group_channels(&self) -> usize {
        self.layout.per_group_channels
    }

    pub fn positions(&self) -> usize {
        self.layout.positions
    }

    pub fn source(&self) -> &'a FeatureMap<T> {
        self.source
    }

    #[inline]
    pub fn get(&self, n: usize, g: usize, d: usize, i: usize) -> T {
        self.source.data[self.layout.offset(n, g, d, i)]
    }

    /// Channel-major block for one `(n, g)`: entry `d * m + i` is `x_i[d]`.
    pub fn cell(&self, n: usize, g: usize) -> Result<&'a [T]> {
        self.layout.check(n, g)?;
        Ok(&self.source.data[self.layout.cell_range(n, g)])
    }

    /// Sub-feature vector `x_i` at position `i`.
    pub fn sub_feature(&self, n: usize, g: usize, i: usize) -> Result<Vec<T>> {
        self.layout.check(n, g)?;
        if i >= self.layout.positions {
            return Err(Error::IndexOutOfRange {
                what: "position",
                index: i,
                bound: self.layout.positions,
            });
        }
        Ok((0..self.layout.per_group_channels)
            .map(|d| self.get(n, g, d, i))
            .collect())
    }
}

/// Mutable grouped view; writes land in the aliased source element.
#[derive(Debug)]
pub struct GroupedViewMut<'a, T> {
    source: &'a mut FeatureMap<T>,
    layout: GroupLayout,
}

impl<T: Real> GroupedViewMut<'_, T> {
    pub fn layout(&self) -> GroupLayout {
        self.layout
    }

    #[inline]
    pub fn get(&self, n: usize, g: usize, d: usize, i: usize) -> T {
        self.source.data[self.layout.offset(n, g, d, i)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, g: usize, d: usize, i: usize, v: T) {
        let k = self.layout.offset(n, g, d, i);
        self.source.data[k] = v;
    }

    pub fn cell_mut(&mut self, n: usize, g: usize) -> Result<&mut [T]> {
        self.layout.check(n, g)?;
        let range = self.layout.cell_range(n, g);
        Ok(&mut self.source.data[range])
    }

    pub fn as_view(&self) -> GroupedView<'_, T> {
        GroupedView {
            source: self.source,
            layout: self.layout,
        }
    }
}

/// Groups the channels of `fm` into `groups` contiguous slices without copying.
pub fn group_split<T: Real>(fm: &FeatureMap<T>, groups: usize) -> Result<GroupedView<'_, T>> {
    let layout = GroupLayout::new(fm.shape, groups)?;
    Ok(GroupedView { source: fm, layout })
}

/// Flattens a grouped view back into an `N x C x H x W` map.
pub fn group_merge<T: Real>(view: GroupedView<'_, T>) -> FeatureMap<T> {
    view.source.clone()
}

/// Spatial average `(1/m) sum_i x_i` of one group, accumulated in `f64`.
pub fn spatial_mean<T: Real>(view: &GroupedView<'_, T>, n: usize, g: usize) -> Result<Vec<f64>> {
    let cell = view.cell(n, g)?;
    let m = view.positions();
    Ok(cell
        .chunks_exact(m)
        .map(|plane| plane.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64)
        .collect())
}
