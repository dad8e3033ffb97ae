//! Reverse-mode gradients of the lean convolution.
//!
//! The input gradient is the transposed operator applied to the output
//! cotangent and reuses the shiftIm2col forward path. The pointwise weight
//! gradient is one GEMM per batch element; the stencil weight gradients are
//! shifted-plane dot products.

use super::{apply_shift_im2col, check_input, KernelError};
use crate::kernels::shift_im2col::shift_plane;
use crate::ops::LeanConvSpec;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use rayon::prelude::*;

/// Gradients of a scalar loss with respect to the input and the weights,
/// given the loss gradient with respect to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<S> {
    pub d_input: FeatureMap<S>,
    pub d_pointwise: Option<Vec<S>>,
    pub d_spatial: Vec<S>,
}

/// The adjoint operator: pointwise matrix transposed, each stencil weight
/// moved to the negated offset on the swapped channel pair.
pub fn transpose_spec<S: Scalar>(spec: &LeanConvSpec<S>) -> LeanConvSpec<S> {
    let mut t = LeanConvSpec::zeros(
        spec.c_out,
        spec.c_in,
        spec.groups,
        spec.stencil,
        spec.pointwise.is_some(),
    )
    .expect("transposed dimensions stay valid");
    if let (Some(pw), Some(tpw)) = (&spec.pointwise, t.pointwise.as_mut()) {
        for o in 0..spec.c_out {
            for i in 0..spec.c_in {
                tpw[i * spec.c_out + o] = pw[o * spec.c_in + i];
            }
        }
    }
    let offsets = spec.spatial_offsets();
    let negated: Vec<usize> = offsets
        .iter()
        .map(|&(dy, dx)| {
            offsets
                .iter()
                .position(|&(ey, ex)| ey == -dy && ex == -dx)
                .expect("stencil offset sets are symmetric")
        })
        .collect();
    let wpp = spec.weights_per_pair();
    let (ci_g, co_g) = (spec.c_in_per_group(), spec.c_out_per_group());
    for grp in 0..spec.groups {
        for oo in 0..co_g {
            for ii in 0..ci_g {
                let o = grp * co_g + oo;
                let i = grp * ci_g + ii;
                let pair = spec.pair_index(o, i).unwrap();
                let tpair = t.pair_index(i, o).unwrap();
                for q in 0..wpp {
                    t.spatial[tpair * wpp + negated[q]] = spec.spatial[pair * wpp + q];
                }
            }
        }
    }
    t
}

pub fn backward<S: Scalar>(
    spec: &LeanConvSpec<S>,
    x: &FeatureMap<S>,
    d_out: &FeatureMap<S>,
) -> Result<GradBundle<S>, KernelError> {
    check_input(spec, x)?;
    if d_out.channels() != spec.c_out
        || d_out.batch() != x.batch()
        || d_out.height() != x.height()
        || d_out.width() != x.width()
    {
        return Err(KernelError::ShapeMismatch(format!(
            "output cotangent is {}x{}x{}x{}, expected {}x{}x{}x{}",
            d_out.batch(),
            d_out.channels(),
            d_out.height(),
            d_out.width(),
            x.batch(),
            spec.c_out,
            x.height(),
            x.width()
        )));
    }
    // Cotangents coming out of the fused 1D path arrive in the flipped
    // layout; normalize to the input's layout once.
    let d_out_owned;
    let d_out = if d_out.layout() == x.layout() {
        d_out
    } else {
        d_out_owned = d_out.transpose_spatial();
        &d_out_owned
    };

    let d_input = apply_shift_im2col(&transpose_spec(spec), d_out)?;

    let (s1, s0) = x.storage_dims();
    let n = s1 * s0;
    let (c_in, c_out, g) = (spec.c_in, spec.c_out, spec.groups);
    let (ci_g, co_g) = (spec.c_in_per_group(), spec.c_out_per_group());
    let wpp = spec.weights_per_pair();
    let offsets: Vec<(usize, isize, isize)> = spec
        .spatial_offsets()
        .iter()
        .enumerate()
        .map(|(qi, &(dy, dx))| {
            let (ds, df) = x.storage_offset(dy, dx);
            (qi, ds, df)
        })
        .collect();
    let pw_len = if spec.pointwise.is_some() { c_out * c_in } else { 0 };
    let sp_len = spec.spatial.len();

    let (d_pw, d_spatial) = x
        .data()
        .par_chunks(c_in * n)
        .zip(d_out.data().par_chunks(c_out * n))
        .map(|(x_b, g_b)| {
            let mut d_pw = vec![S::zero(); pw_len];
            let mut d_sp = vec![S::zero(); sp_len];
            if pw_len > 0 {
                // d_alpha[o,i] += sum_p g(o,p) x(i,p): one GEMM with x^T
                unsafe {
                    S::gemm(
                        c_out,
                        n,
                        c_in,
                        S::one(),
                        g_b.as_ptr(),
                        n as isize,
                        1,
                        x_b.as_ptr(),
                        1,
                        n as isize,
                        S::one(),
                        d_pw.as_mut_ptr(),
                        c_in as isize,
                        1,
                    );
                }
            }
            if wpp > 0 {
                let mut shifted = vec![S::zero(); n];
                for &(qi, ds, df) in &offsets {
                    for grp in 0..g {
                        for ii in 0..ci_g {
                            let i = grp * ci_g + ii;
                            shift_plane(&x_b[i * n..(i + 1) * n], &mut shifted, s1, s0, ds, df);
                            for oo in 0..co_g {
                                let o = grp * co_g + oo;
                                let pair = o * ci_g + ii;
                                let dot = g_b[o * n..(o + 1) * n]
                                    .iter()
                                    .zip(shifted.iter())
                                    .fold(S::zero(), |acc, (&gv, &sv)| acc + gv * sv);
                                d_sp[pair * wpp + qi] += dot;
                            }
                        }
                    }
                }
            }
            (d_pw, d_sp)
        })
        .reduce(
            || (vec![S::zero(); pw_len], vec![S::zero(); sp_len]),
            |(mut ap, mut asp), (bp, bsp)| {
                for (a, b) in ap.iter_mut().zip(bp) {
                    *a += b;
                }
                for (a, b) in asp.iter_mut().zip(bsp) {
                    *a += b;
                }
                (ap, asp)
            },
        );

    Ok(GradBundle {
        d_input,
        d_pointwise: spec.pointwise.is_some().then_some(d_pw),
        d_spatial,
    })
}
