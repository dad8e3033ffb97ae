//! Layout-aware batched feature maps and the elementwise / pooling primitives.
//!
//! A [`FeatureMap`] stores a batch of multi-channel 2D images in one dense
//! buffer. Each `(batch, channel)` spatial plane is contiguous; the [`Layout`]
//! flag states which spatial axis runs fastest inside the plane. All logical
//! accessors hide the flag, so only kernels ever look at raw strides.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Layout {
    /// Rows are contiguous: `x` is the fastest index.
    WidthFastest,
    /// Columns are contiguous: `y` is the fastest index.
    HeightFastest,
}

impl Layout {
    pub fn flipped(self) -> Layout {
        match self {
            Layout::WidthFastest => Layout::HeightFastest,
            Layout::HeightFastest => Layout::WidthFastest,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layout mismatch")]
    LayoutMismatch,
    #[error("avg_pool2 requires even spatial dims, got {height}x{width}")]
    OddSpatialDim { height: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureMap<S> {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    layout: Layout,
    data: Vec<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self::zeros_with_layout(batch, channels, height, width, Layout::WidthFastest)
    }

    pub fn zeros_with_layout(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        layout: Layout,
    ) -> Self {
        FeatureMap {
            batch,
            channels,
            height,
            width,
            layout,
            data: vec![S::zero(); batch * channels * height * width],
        }
    }

    /// Build from a closure over logical indices `(b, c, y, x)`.
    pub fn from_fn(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        layout: Layout,
        mut f: impl FnMut(usize, usize, usize, usize) -> S,
    ) -> Self {
        let mut out = Self::zeros_with_layout(batch, channels, height, width, layout);
        for b in 0..batch {
            for c in 0..channels {
                for y in 0..height {
                    for x in 0..width {
                        let v = f(b, c, y, x);
                        out.set(b, c, y, x, v);
                    }
                }
            }
        }
        out
    }

    /// Wrap an existing buffer. Length must equal `batch*channels*height*width`.
    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        layout: Layout,
        data: Vec<S>,
    ) -> Result<Self, TensorError> {
        if data.len() != batch * channels * height * width {
            return Err(TensorError::ShapeMismatch(format!(
                "buffer length {} != {}x{}x{}x{}",
                data.len(),
                batch,
                channels,
                height,
                width
            )));
        }
        Ok(FeatureMap { batch, channels, height, width, layout, data })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn layout(&self) -> Layout {
        self.layout
    }
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch
            && self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    #[inline]
    pub(crate) fn plane_offset(&self, b: usize, c: usize) -> usize {
        (b * self.channels + c) * self.plane_len()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(b < self.batch && c < self.channels && y < self.height && x < self.width);
        let within = match self.layout {
            Layout::WidthFastest => y * self.width + x,
            Layout::HeightFastest => x * self.height + y,
        };
        self.plane_offset(b, c) + within
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous spatial plane of one `(batch, channel)` pair.
    pub fn plane(&self, b: usize, c: usize) -> &[S] {
        let off = self.plane_offset(b, c);
        &self.data[off..off + self.plane_len()]
    }

    pub(crate) fn plane_mut(&mut self, b: usize, c: usize) -> &mut [S] {
        let off = self.plane_offset(b, c);
        let len = self.plane_len();
        &mut self.data[off..off + len]
    }

    /// Spatial extents in storage order: `(slow, fast)` axis lengths.
    pub fn storage_dims(&self) -> (usize, usize) {
        match self.layout {
            Layout::WidthFastest => (self.height, self.width),
            Layout::HeightFastest => (self.width, self.height),
        }
    }

    /// Map a logical spatial offset `(dy, dx)` to storage order `(dslow, dfast)`.
    pub fn storage_offset(&self, dy: isize, dx: isize) -> (isize, isize) {
        match self.layout {
            Layout::WidthFastest => (dy, dx),
            Layout::HeightFastest => (dx, dy),
        }
    }

    /// Same logical content re-stored with the other spatial axis fastest.
    pub fn transpose_spatial(&self) -> Self {
        let mut out = Self::zeros_with_layout(
            self.batch,
            self.channels,
            self.height,
            self.width,
            self.layout.flipped(),
        );
        let (s1, s0) = self.storage_dims();
        for b in 0..self.batch {
            for c in 0..self.channels {
                let src = self.plane(b, c);
                let dst = out.plane_mut(b, c);
                // storage (i, j) in src becomes (j, i) in dst
                for i in 0..s1 {
                    for j in 0..s0 {
                        dst[j * s1 + i] = src[i * s0 + j];
                    }
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = f(*v);
        }
        out
    }
}

pub fn relu<S: Scalar>(x: &FeatureMap<S>) -> FeatureMap<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn residual_add<S: Scalar>(
    x: &FeatureMap<S>,
    f: &FeatureMap<S>,
) -> Result<FeatureMap<S>, TensorError> {
    if !x.same_shape(f) {
        return Err(TensorError::ShapeMismatch(
            "residual_add operands differ in shape".into(),
        ));
    }
    if x.layout() != f.layout() {
        return Err(TensorError::LayoutMismatch);
    }
    let mut out = x.clone();
    for (o, v) in out.data.iter_mut().zip(f.data.iter()) {
        *o += *v;
    }
    Ok(out)
}

/// Non-overlapping 2x2 mean pooling. Spatial dims must be even.
pub fn avg_pool2<S: Scalar>(x: &FeatureMap<S>) -> Result<FeatureMap<S>, TensorError> {
    if x.height() % 2 != 0 || x.width() % 2 != 0 {
        return Err(TensorError::OddSpatialDim { height: x.height(), width: x.width() });
    }
    let (h, w) = (x.height() / 2, x.width() / 2);
    let quarter = S::from_f64(0.25);
    let mut out =
        FeatureMap::zeros_with_layout(x.batch(), x.channels(), h, w, x.layout());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            for y in 0..h {
                for xx in 0..w {
                    let s = x.get(b, c, 2 * y, 2 * xx)
                        + x.get(b, c, 2 * y, 2 * xx + 1)
                        + x.get(b, c, 2 * y + 1, 2 * xx)
                        + x.get(b, c, 2 * y + 1, 2 * xx + 1);
                    out.set(b, c, y, xx, s * quarter);
                }
            }
        }
    }
    Ok(out)
}

/// Mean over all spatial positions per `(batch, channel)`.
/// Returned buffer is batch-major: `out[b * channels + c]`.
pub fn global_avg_pool<S: Scalar>(x: &FeatureMap<S>) -> Vec<S> {
    let inv = S::from_f64(1.0 / (x.plane_len() as f64));
    let mut out = Vec::with_capacity(x.batch() * x.channels());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let mut s = S::zero();
            for v in x.plane(b, c) {
                s += *v;
            }
            out.push(s * inv);
        }
    }
    out
}

pub fn concat_channels<S: Scalar>(
    a: &FeatureMap<S>,
    b: &FeatureMap<S>,
) -> Result<FeatureMap<S>, TensorError> {
    if a.batch() != b.batch() || a.height() != b.height() || a.width() != b.width() {
        return Err(TensorError::ShapeMismatch(
            "concat_channels operands differ in batch or spatial dims".into(),
        ));
    }
    if a.layout() != b.layout() {
        return Err(TensorError::LayoutMismatch);
    }
    let channels = a.channels() + b.channels();
    let plane = a.plane_len();
    let mut data = Vec::with_capacity(a.batch() * channels * plane);
    for bi in 0..a.batch() {
        for c in 0..a.channels() {
            data.extend_from_slice(a.plane(bi, c));
        }
        for c in 0..b.channels() {
            data.extend_from_slice(b.plane(bi, c));
        }
    }
    FeatureMap::from_vec(a.batch(), channels, a.height(), a.width(), a.layout(), data)
}
