//! Execution paths for applying a [`LeanConvSpec`] and their gradients.
//!
//! Three value-equivalent paths exist: a direct reference loop (the
//! correctness oracle entry point), a shiftIm2col+GEMM path, and a fused
//! cache-tiled path that reuses each fetched input tile for both the
//! pointwise multiply and the spatial stencil.

mod backward;
mod fused;
mod reference;
mod shift_im2col;

pub use backward::{backward, transpose_spec, GradBundle};
pub use fused::{apply_fused_tiled, TileConfig};
pub use reference::apply_reference;
pub use shift_im2col::apply_shift_im2col;

use crate::ops::{LeanConvSpec, SpecError, StencilKind};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Layout};
use crate::ops::Direction;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("input has {got} channels, spec expects {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("1D stencil direction does not match the input's fastest axis")]
    DirectionLayoutMismatch,
    #[error("gradient shapes are incompatible: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPath {
    Reference,
    ShiftIm2col,
    FusedTiled,
    /// Heuristic choice mirroring the measured crossover: direct/fused for
    /// small group blocks, shiftIm2col for large ones.
    Auto,
}

pub(crate) fn check_input<S: Scalar>(
    spec: &LeanConvSpec<S>,
    x: &FeatureMap<S>,
) -> Result<(), KernelError> {
    spec.validate()?;
    if x.channels() != spec.c_in {
        return Err(KernelError::ChannelMismatch { got: x.channels(), expected: spec.c_in });
    }
    Ok(())
}

/// Group-block width below which the direct/fused path beats shiftIm2col.
/// Measured once on the reference dev machine; the auto path treats it as a
/// crossover on `c_in / groups`.
const AUTO_FUSED_MAX_GROUP_BLOCK: usize = 8;

fn auto_path<S: Scalar>(spec: &LeanConvSpec<S>, x: &FeatureMap<S>) -> KernelPath {
    // The fused path flips the layout for 1D stencils; auto mode keeps the
    // layout-preserving contract and only uses it for 2D/pointwise stencils.
    if matches!(spec.stencil, StencilKind::Three1D(_)) {
        return KernelPath::ShiftIm2col;
    }
    let _ = x;
    if spec.c_in / spec.groups <= AUTO_FUSED_MAX_GROUP_BLOCK {
        KernelPath::FusedTiled
    } else {
        KernelPath::ShiftIm2col
    }
}

/// Apply a spec along the chosen path.
pub fn apply<S: Scalar>(
    spec: &LeanConvSpec<S>,
    x: &FeatureMap<S>,
    path: KernelPath,
    cfg: &TileConfig,
) -> Result<FeatureMap<S>, KernelError> {
    match path {
        KernelPath::Reference => apply_reference(spec, x),
        KernelPath::ShiftIm2col => apply_shift_im2col(spec, x),
        KernelPath::FusedTiled => apply_fused_tiled(spec, x, cfg),
        KernelPath::Auto => apply(spec, x, auto_path(spec, x), cfg),
    }
}

/// The 1D stencil direction a feature map's fastest axis supports.
pub fn fast_axis_direction(layout: Layout) -> Direction {
    match layout {
        Layout::WidthFastest => Direction::Horizontal,
        Layout::HeightFastest => Direction::Vertical,
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BenchResult {
    pub median_secs: f64,
    pub mults: u64,
    /// Multiplications per second at the median latency.
    pub throughput: f64,
}

/// Median wall-clock latency of one path over `repeats` timed runs after one
/// warm-up, on freshly randomized data.
pub fn benchmark_kernel<S: Scalar>(
    spec: &LeanConvSpec<S>,
    batch: usize,
    height: usize,
    width: usize,
    path: KernelPath,
    repeats: usize,
    seed: u64,
    cfg: &TileConfig,
) -> Result<BenchResult, KernelError> {
    assert!(repeats >= 3, "benchmark_kernel needs at least 3 repeats");
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let layout = match spec.stencil {
        StencilKind::Three1D(Direction::Vertical) => Layout::HeightFastest,
        _ => Layout::WidthFastest,
    };
    let mut data = vec![S::zero(); batch * spec.c_in * height * width];
    for v in data.iter_mut() {
        *v = S::from_f64(rng.gen_range(-1.0..1.0));
    }
    let x = FeatureMap::from_vec(batch, spec.c_in, height, width, layout, data)
        .expect("benchmark input shape");

    let _warmup = apply(spec, &x, path, cfg)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let out = apply(spec, &x, path, cfg)?;
        times.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out.data().first().copied());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let mults = spec.mult_count(batch, height, width);
    Ok(BenchResult { median_secs: median, mults, throughput: mults as f64 / median })
}
