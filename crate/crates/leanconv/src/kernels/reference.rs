//! Direct-loop reference kernel. Semantics authority for all other paths.

use super::{check_input, KernelError};
use crate::ops::LeanConvSpec;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// y(b,o,p) = sum_i alpha[o,i] x(b,i,p)
///         + sum_{(o,i) in-group} sum_q w[o,i,q] x(b,i,p+q), zero padded.
/// Output layout equals input layout.
pub fn apply_reference<S: Scalar>(
    spec: &LeanConvSpec<S>,
    x: &FeatureMap<S>,
) -> Result<FeatureMap<S>, KernelError> {
    check_input(spec, x)?;
    let (b_n, h, w) = (x.batch(), x.height(), x.width());
    let mut out = FeatureMap::zeros_with_layout(b_n, spec.c_out, h, w, x.layout());
    let offsets = spec.spatial_offsets();
    for b in 0..b_n {
        for o in 0..spec.c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = S::zero();
                    for i in 0..spec.c_in {
                        if spec.pointwise.is_some() {
                            acc += spec.pointwise_at(o, i) * x.get(b, i, y, xx);
                        }
                        if let Some(pair) = spec.pair_index(o, i) {
                            let weights = spec.pair_weights(pair);
                            for (q, &(dy, dx)) in offsets.iter().enumerate() {
                                let sy = y as isize + dy;
                                let sx = xx as isize + dx;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += weights[q] * x.get(b, i, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.set(b, o, y, xx, acc);
                }
            }
        }
    }
    Ok(out)
}
