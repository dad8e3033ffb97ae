//! shiftIm2col path: one dense GEMM for the pointwise part plus one
//! shifted-view GEMM per stencil offset, restricted to group blocks.

use super::{check_input, KernelError};
use crate::ops::LeanConvSpec;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use rayon::prelude::*;

/// Shift one spatial plane by `(dslow, dfast)` in storage coordinates with
/// zero fill: `dst[p] = src[p + offset]` where valid.
pub(crate) fn shift_plane<S: Scalar>(
    src: &[S],
    dst: &mut [S],
    s1: usize,
    s0: usize,
    dslow: isize,
    dfast: isize,
) {
    dst.fill(S::zero());
    let lo = (-dfast).max(0) as usize;
    let hi = (s0 as isize).min(s0 as isize - dfast) as usize;
    if lo >= hi {
        return;
    }
    for i1 in 0..s1 as isize {
        let src_row = i1 + dslow;
        if src_row < 0 || src_row >= s1 as isize {
            continue;
        }
        let d = &mut dst[i1 as usize * s0 + lo..i1 as usize * s0 + hi];
        let srow = src_row as usize * s0;
        let s = &src[(srow as isize + lo as isize + dfast) as usize
            ..(srow as isize + hi as isize + dfast) as usize];
        d.copy_from_slice(s);
    }
}

pub fn apply_shift_im2col<S: Scalar>(
    spec: &LeanConvSpec<S>,
    x: &FeatureMap<S>,
) -> Result<FeatureMap<S>, KernelError> {
    check_input(spec, x)?;
    let (s1, s0) = x.storage_dims();
    let n = s1 * s0;
    let (c_in, c_out, g) = (spec.c_in, spec.c_out, spec.groups);
    let (ci_g, co_g) = (spec.c_in_per_group(), spec.c_out_per_group());
    let offsets: Vec<(usize, isize, isize)> = spec
        .spatial_offsets()
        .iter()
        .enumerate()
        .map(|(qi, &(dy, dx))| {
            let (ds, df) = x.storage_offset(dy, dx);
            (qi, ds, df)
        })
        .collect();
    let wpp = spec.weights_per_pair();

    let mut out =
        FeatureMap::zeros_with_layout(x.batch(), c_out, x.height(), x.width(), x.layout());
    let in_data = x.data();
    out.data_mut()
        .par_chunks_mut(c_out * n)
        .zip(in_data.par_chunks(c_in * n))
        .for_each(|(out_b, x_b)| {
            if let Some(pw) = &spec.pointwise {
                unsafe {
                    S::gemm(
                        c_out,
                        c_in,
                        n,
                        S::one(),
                        pw.as_ptr(),
                        c_in as isize,
                        1,
                        x_b.as_ptr(),
                        n as isize,
                        1,
                        S::zero(),
                        out_b.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            if wpp == 0 {
                return;
            }
            let mut shifted = vec![S::zero(); ci_g * n];
            let mut wmat = vec![S::zero(); co_g * ci_g];
            for &(qi, ds, df) in &offsets {
                for grp in 0..g {
                    for ii in 0..ci_g {
                        let ch = grp * ci_g + ii;
                        shift_plane(
                            &x_b[ch * n..(ch + 1) * n],
                            &mut shifted[ii * n..(ii + 1) * n],
                            s1,
                            s0,
                            ds,
                            df,
                        );
                    }
                    for oo in 0..co_g {
                        let o = grp * co_g + oo;
                        for ii in 0..ci_g {
                            let pair = o * ci_g + ii;
                            wmat[oo * ci_g + ii] = spec.spatial[pair * wpp + qi];
                        }
                    }
                    unsafe {
                        S::gemm(
                            co_g,
                            ci_g,
                            n,
                            S::one(),
                            wmat.as_ptr(),
                            ci_g as isize,
                            1,
                            shifted.as_ptr(),
                            n as isize,
                            1,
                            S::one(),
                            out_b[grp * co_g * n..].as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
            }
        });
    Ok(out)
}
