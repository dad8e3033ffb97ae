//! Operator specifications, exact cost accounting and the dense-matrix oracle.
//!
//! A [`LeanConvSpec`] describes one convolution operator: a fully-coupled
//! pointwise part (dense `c_out x c_in` matrix of scaled-identity blocks) plus
//! a grouped spatial part whose stencil centers are owned by the pointwise
//! matrix. Setting `pointwise` to `None` yields a plain grouped convolution
//! whose spatial store carries the center weight as well; with one group that
//! is the classic fully-coupled operator.
//!
//! All convolutions are zero-padded and same-size.

use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilKind {
    /// Full 3x3 neighborhood: 8 off-center weights per filter.
    Full9,
    /// Axis-aligned cross: 4 off-center weights.
    Five,
    /// 1D triple along one axis: 2 off-center weights.
    Three1D(Direction),
    /// Pure 1x1 coupling, no spatial weights.
    PointwiseOnly,
}

const FULL9_ALL: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];
const FULL9_OFF: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];
// Cross order: up, left, center, right, down.
const FIVE_ALL: [(isize, isize); 5] = [(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)];
const FIVE_OFF: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const THREE_H_ALL: [(isize, isize); 3] = [(0, -1), (0, 0), (0, 1)];
const THREE_H_OFF: [(isize, isize); 2] = [(0, -1), (0, 1)];
const THREE_V_ALL: [(isize, isize); 3] = [(-1, 0), (0, 0), (1, 0)];
const THREE_V_OFF: [(isize, isize); 2] = [(-1, 0), (1, 0)];
const CENTER_ONLY: [(isize, isize); 1] = [(0, 0)];

impl StencilKind {
    /// All stencil offsets `(dy, dx)` including the center.
    pub fn offsets_full(&self) -> &'static [(isize, isize)] {
        match self {
            StencilKind::Full9 => &FULL9_ALL,
            StencilKind::Five => &FIVE_ALL,
            StencilKind::Three1D(Direction::Horizontal) => &THREE_H_ALL,
            StencilKind::Three1D(Direction::Vertical) => &THREE_V_ALL,
            StencilKind::PointwiseOnly => &CENTER_ONLY,
        }
    }

    /// Off-center offsets only; the center is owned by the pointwise matrix.
    pub fn offsets_off_center(&self) -> &'static [(isize, isize)] {
        match self {
            StencilKind::Full9 => &FULL9_OFF,
            StencilKind::Five => &FIVE_OFF,
            StencilKind::Three1D(Direction::Horizontal) => &THREE_H_OFF,
            StencilKind::Three1D(Direction::Vertical) => &THREE_V_OFF,
            StencilKind::PointwiseOnly => &[],
        }
    }

    /// Full stencil size r (9, 5, 3 or 1).
    pub fn size(&self) -> usize {
        self.offsets_full().len()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("groups {groups} must divide c_in {c_in} and c_out {c_out}")]
    GroupsDontDivide { groups: usize, c_in: usize, c_out: usize },
    #[error("pointwise matrix has {got} entries, expected {expected}")]
    PointwiseShape { got: usize, expected: usize },
    #[error("spatial store has {got} entries, expected {expected}")]
    SpatialShape { got: usize, expected: usize },
    #[error("dense operator would have {entries} entries, above the oracle guard {guard}")]
    DenseTooLarge { entries: u64, guard: u64 },
    #[error("channels must be positive")]
    ZeroChannels,
}

/// Exact parameter count and multiplication count for one forward application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub mults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeanConvSpec<S> {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub stencil: StencilKind,
    /// Dense `c_out x c_in` row-major matrix of the 1x1 part, or `None` for a
    /// plain grouped convolution whose spatial store includes the center.
    pub pointwise: Option<Vec<S>>,
    /// Per in-group `(o, i)` pair, `weights_per_pair()` stencil weights, in
    /// offset order. Pair index is `o * (c_in/groups) + (i % (c_in/groups))`.
    pub spatial: Vec<S>,
}

impl<S: Scalar> LeanConvSpec<S> {
    pub fn zeros(
        c_in: usize,
        c_out: usize,
        groups: usize,
        stencil: StencilKind,
        with_pointwise: bool,
    ) -> Result<Self, SpecError> {
        let spec = LeanConvSpec {
            c_in,
            c_out,
            groups,
            stencil,
            pointwise: with_pointwise.then(|| vec![S::zero(); c_out * c_in]),
            spatial: Vec::new(),
        };
        spec.validate_dims()?;
        let mut spec = spec;
        spec.spatial = vec![S::zero(); spec.spatial_len()];
        Ok(spec)
    }

    /// Pure 1x1 operator with an identity pointwise matrix.
    pub fn identity(channels: usize) -> Self {
        let mut spec =
            Self::zeros(channels, channels, 1, StencilKind::PointwiseOnly, true).unwrap();
        let pw = spec.pointwise.as_mut().unwrap();
        for c in 0..channels {
            pw[c * channels + c] = S::one();
        }
        spec
    }

    /// Randomized weights, mostly for tests and the verification suites.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        groups: usize,
        stencil: StencilKind,
        with_pointwise: bool,
    ) -> Result<Self, SpecError> {
        let mut spec = Self::zeros(c_in, c_out, groups, stencil, with_pointwise)?;
        if let Some(pw) = spec.pointwise.as_mut() {
            for v in pw.iter_mut() {
                *v = S::sample_standard_normal(rng);
            }
        }
        for v in spec.spatial.iter_mut() {
            *v = S::sample_standard_normal(rng);
        }
        Ok(spec)
    }

    fn validate_dims(&self) -> Result<(), SpecError> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(SpecError::ZeroChannels);
        }
        if self.groups == 0
            || self.c_in % self.groups != 0
            || self.c_out % self.groups != 0
        {
            return Err(SpecError::GroupsDontDivide {
                groups: self.groups,
                c_in: self.c_in,
                c_out: self.c_out,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        self.validate_dims()?;
        if let Some(pw) = &self.pointwise {
            if pw.len() != self.c_out * self.c_in {
                return Err(SpecError::PointwiseShape {
                    got: pw.len(),
                    expected: self.c_out * self.c_in,
                });
            }
        }
        if self.spatial.len() != self.spatial_len() {
            return Err(SpecError::SpatialShape {
                got: self.spatial.len(),
                expected: self.spatial_len(),
            });
        }
        Ok(())
    }

    /// Offsets carried by the spatial store (with center iff no pointwise part).
    pub fn spatial_offsets(&self) -> &'static [(isize, isize)] {
        if self.pointwise.is_some() {
            self.stencil.offsets_off_center()
        } else {
            self.stencil.offsets_full()
        }
    }

    pub fn weights_per_pair(&self) -> usize {
        self.spatial_offsets().len()
    }

    pub fn in_group_pairs(&self) -> usize {
        self.c_out * self.c_in / self.groups
    }

    fn spatial_len(&self) -> usize {
        self.in_group_pairs() * self.weights_per_pair()
    }

    #[inline]
    pub fn c_in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    #[inline]
    pub fn c_out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Index of the weight row for pair `(o, i)` when it is in-group.
    #[inline]
    pub fn pair_index(&self, o: usize, i: usize) -> Option<usize> {
        let og = o / self.c_out_per_group();
        let ig = i / self.c_in_per_group();
        (og == ig).then(|| o * self.c_in_per_group() + (i % self.c_in_per_group()))
    }

    /// Stencil weights of one in-group pair.
    #[inline]
    pub fn pair_weights(&self, pair: usize) -> &[S] {
        let w = self.weights_per_pair();
        &self.spatial[pair * w..(pair + 1) * w]
    }

    pub fn pointwise_at(&self, o: usize, i: usize) -> S {
        match &self.pointwise {
            Some(pw) => pw[o * self.c_in + i],
            None => S::zero(),
        }
    }

    /// Exact weight count.
    pub fn param_count(&self) -> u64 {
        let pairs = self.in_group_pairs() as u64;
        let spatial = pairs * self.weights_per_pair() as u64;
        match &self.pointwise {
            Some(_) => (self.c_in * self.c_out) as u64 + spatial,
            None => spatial,
        }
    }

    /// Multiplications for one zero-padded same-size forward application.
    /// Boundary multiplications by padded zeros are counted.
    pub fn mult_count(&self, batch: usize, height: usize, width: usize) -> u64 {
        (batch * height * width) as u64 * self.param_count()
    }

    pub fn cost(&self, batch: usize, height: usize, width: usize) -> CostReport {
        CostReport { params: self.param_count(), mults: self.mult_count(batch, height, width) }
    }

    /// Structural nonzeros of the materialized operator, without assembling it.
    pub fn nnz_count(&self, height: usize, width: usize) -> u64 {
        let inbounds = |(dy, dx): (isize, isize)| -> u64 {
            let h = height as isize - dy.abs();
            let w = width as isize - dx.abs();
            (h.max(0) * w.max(0)) as u64
        };
        let pairs = self.in_group_pairs() as u64;
        let spatial: u64 = self.spatial_offsets().iter().map(|&q| inbounds(q) * pairs).sum();
        match &self.pointwise {
            Some(_) => (self.c_in * self.c_out * height * width) as u64 + spatial,
            None => spatial,
        }
    }

    /// Assemble the exact linear operator under zero padding as a dense
    /// row-major matrix of shape `(c_out*H*W) x (c_in*H*W)`. Rows and columns
    /// index logical positions `p = y*W + x`. Oracle use only.
    pub fn materialize_dense(&self, height: usize, width: usize) -> Result<Vec<S>, SpecError> {
        self.validate()?;
        const GUARD: u64 = 1 << 26;
        let hw = height * width;
        let rows = (self.c_out * hw) as u64;
        let cols = (self.c_in * hw) as u64;
        if rows * cols > GUARD {
            return Err(SpecError::DenseTooLarge { entries: rows * cols, guard: GUARD });
        }
        let cols = cols as usize;
        let mut m = vec![S::zero(); rows as usize * cols];
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                if let Some(pw) = &self.pointwise {
                    let a = pw[o * self.c_in + i];
                    for p in 0..hw {
                        m[(o * hw + p) * cols + i * hw + p] += a;
                    }
                }
                if let Some(pair) = self.pair_index(o, i) {
                    let weights = self.pair_weights(pair);
                    for (q, &(dy, dx)) in self.spatial_offsets().iter().enumerate() {
                        let w = weights[q];
                        for y in 0..height as isize {
                            let sy = y + dy;
                            if sy < 0 || sy >= height as isize {
                                continue;
                            }
                            for x in 0..width as isize {
                                let sx = x + dx;
                                if sx < 0 || sx >= width as isize {
                                    continue;
                                }
                                let row = o * hw + (y as usize) * width + x as usize;
                                let col = i * hw + (sy as usize) * width + sx as usize;
                                m[row * cols + col] += w;
                            }
                        }
                    }
                }
            }
        }
        Ok(m)
    }
}

/// Group-ratio rule: target `g* = (r-1)/ratio`, returned as the largest
/// divisor of `channels` not exceeding `max(g*, 1)`.
pub fn choose_groups(channels: usize, stencil_size: usize, ratio: f64) -> usize {
    assert!(channels >= 1, "choose_groups needs at least one channel");
    assert!(ratio > 0.0 && ratio <= 1.0, "ratio must be in (0, 1]");
    let target = ((stencil_size - 1) as f64 / ratio).floor() as usize;
    let limit = target.max(1);
    let mut best = 1;
    for d in 1..=channels {
        if channels % d == 0 && d <= limit {
            best = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn validate_examples() {
        let ok = LeanConvSpec::<f64>::zeros(4, 4, 2, StencilKind::Five, true).unwrap();
        assert!(ok.validate().is_ok());

        let bad = LeanConvSpec::<f64> {
            c_in: 4,
            c_out: 6,
            groups: 4,
            stencil: StencilKind::Five,
            pointwise: Some(vec![0.0; 24]),
            spatial: vec![],
        };
        assert!(matches!(bad.validate(), Err(SpecError::GroupsDontDivide { .. })));

        let dw = LeanConvSpec::<f64>::zeros(
            8,
            8,
            8,
            StencilKind::Three1D(Direction::Horizontal),
            true,
        )
        .unwrap();
        assert!(dw.validate().is_ok());
    }

    #[test]
    fn validate_catches_shape_mismatch() {
        let mut s = LeanConvSpec::<f64>::zeros(4, 4, 2, StencilKind::Five, true).unwrap();
        s.spatial.push(0.0);
        assert!(matches!(s.validate(), Err(SpecError::SpatialShape { .. })));
        let mut s = LeanConvSpec::<f64>::zeros(4, 4, 2, StencilKind::Five, true).unwrap();
        s.pointwise.as_mut().unwrap().pop();
        assert!(matches!(s.validate(), Err(SpecError::PointwiseShape { .. })));
    }

    #[test]
    fn param_count_formulas() {
        // (1 + 4/g) * c_in * c_out for the 5-point lean operator
        let s = LeanConvSpec::<f64>::zeros(4, 4, 4, StencilKind::Five, true).unwrap();
        assert_eq!(s.param_count(), 32);

        // g=1 full lean operator matches the fully-coupled 3x3 count
        let s = LeanConvSpec::<f64>::zeros(4, 4, 1, StencilKind::Full9, true).unwrap();
        assert_eq!(s.param_count(), 144);
        let plain = LeanConvSpec::<f64>::zeros(4, 4, 1, StencilKind::Full9, false).unwrap();
        assert_eq!(plain.param_count(), 9 * 16);

        // depth-wise 3-point: (1 + 2/8) * 64
        let s = LeanConvSpec::<f64>::zeros(
            8,
            8,
            8,
            StencilKind::Three1D(Direction::Vertical),
            true,
        )
        .unwrap();
        assert_eq!(s.param_count(), 80);
    }

    #[test]
    fn param_count_matches_dense_nonzeros_on_large_maps() {
        // On a map large enough that every offset stays in bounds somewhere,
        // params = nonzero pattern entries per pixel; check via nnz on 1x?.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s =
            LeanConvSpec::<f64>::random(&mut rng, 8, 8, 8, StencilKind::Three1D(Direction::Horizontal), true)
                .unwrap();
        // Count structural entries of the assembled matrix on a small map and
        // compare against nnz_count's closed form.
        let m = s.materialize_dense(3, 5).unwrap();
        let assembled = m.iter().filter(|v| **v != 0.0).count() as u64;
        assert_eq!(assembled, s.nnz_count(3, 5));
    }

    #[test]
    fn param_count_monotone_in_groups() {
        let mut prev = u64::MAX;
        for g in [1, 2, 4, 8] {
            let s = LeanConvSpec::<f64>::zeros(8, 8, g, StencilKind::Five, true).unwrap();
            assert!(s.param_count() <= prev);
            prev = s.param_count();
        }
    }

    #[test]
    fn mult_count_examples() {
        let s = LeanConvSpec::<f64>::zeros(4, 4, 4, StencilKind::Five, true).unwrap();
        assert_eq!(s.mult_count(1, 8, 8), 2048);
        assert_eq!(s.mult_count(1, 1, 1), s.param_count());
        assert_eq!(s.mult_count(2, 8, 8), 2 * s.mult_count(1, 8, 8));
    }

    #[test]
    fn mult_count_matches_instrumented_reference() {
        // Oracle: a literal loop that performs one multiplication per stored
        // weight per output position, including multiplications by padded
        // zeros at the boundary.
        let s = LeanConvSpec::<f64>::zeros(4, 4, 4, StencilKind::Five, true).unwrap();
        let (b, h, w) = (1usize, 8usize, 8usize);
        let mut mults = 0u64;
        for _ in 0..b {
            for _y in 0..h {
                for _x in 0..w {
                    for o in 0..s.c_out {
                        for i in 0..s.c_in {
                            mults += 1; // pointwise multiply
                            if s.pair_index(o, i).is_some() {
                                mults += s.weights_per_pair() as u64;
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(mults, s.mult_count(b, h, w));
    }

    #[test]
    fn choose_groups_examples() {
        assert_eq!(choose_groups(64, 9, 1.0 / 8.0), 64);
        assert_eq!(choose_groups(48, 9, 1.0 / 8.0), 48);
        assert_eq!(choose_groups(1, 9, 0.5), 1);
        // oracle: enumerate divisors
        for channels in [6usize, 12, 16, 30, 48] {
            for (r, ratio) in [(9usize, 0.125), (5, 0.25), (3, 0.5)] {
                let limit = (((r - 1) as f64) / ratio).floor() as usize;
                let expected = (1..=channels)
                    .filter(|d| channels % d == 0 && *d <= limit.max(1))
                    .max()
                    .unwrap();
                assert_eq!(choose_groups(channels, r, ratio), expected);
            }
        }
    }

    #[test]
    fn nnz_examples() {
        let s = LeanConvSpec::<f64>::zeros(4, 4, 1, StencilKind::PointwiseOnly, true).unwrap();
        assert_eq!(s.nnz_count(6, 6), 16 * 36);

        // full 3x3 on a 1x1 image truncates to the center
        let s = LeanConvSpec::<f64>::zeros(4, 4, 1, StencilKind::Full9, false).unwrap();
        assert_eq!(s.nnz_count(1, 1), 16);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = LeanConvSpec::<f64>::random(&mut rng, 4, 4, 2, StencilKind::Five, true).unwrap();
        let m = s.materialize_dense(6, 6).unwrap();
        let assembled = m.iter().filter(|v| **v != 0.0).count() as u64;
        assert_eq!(assembled, s.nnz_count(6, 6));
    }

    #[test]
    fn dense_pattern_off_group_blocks_are_diagonal() {
        // 6x6 image, 4 channels, g=2, full stencil plus pointwise: the
        // off-group channel blocks must be pure scaled identities.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = LeanConvSpec::<f64>::random(&mut rng, 4, 4, 2, StencilKind::Full9, true).unwrap();
        let hw = 36;
        let cols = 4 * hw;
        let m = s.materialize_dense(6, 6).unwrap();
        for o in 0..4usize {
            for i in 0..4usize {
                let in_group = s.pair_index(o, i).is_some();
                for p in 0..hw {
                    for q in 0..hw {
                        let v = m[(o * hw + p) * cols + i * hw + q];
                        if !in_group && p != q {
                            assert_eq!(v, 0.0, "off-group block must be diagonal");
                        }
                        if !in_group && p == q {
                            assert_eq!(v, s.pointwise_at(o, i));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dense_size_guard() {
        let s = LeanConvSpec::<f64>::zeros(64, 64, 1, StencilKind::Full9, true).unwrap();
        assert!(matches!(
            s.materialize_dense(64, 64),
            Err(SpecError::DenseTooLarge { .. })
        ));
    }

    #[test]
    fn serde_round_trip_uses_spec_field_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = LeanConvSpec::<f32>::random(
            &mut rng,
            4,
            4,
            2,
            StencilKind::Three1D(Direction::Horizontal),
            true,
        )
        .unwrap();
        let json = serde_json::to_string(&s).unwrap();
        for field in ["c_in", "c_out", "groups", "stencil", "pointwise", "spatial"] {
            assert!(json.contains(field), "missing field {field} in {json}");
        }
        let back: LeanConvSpec<f32> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
