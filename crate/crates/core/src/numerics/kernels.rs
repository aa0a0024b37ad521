// Copyright 2026 The OSKT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//! Plain tensor kernels shared by the tape and by computation-free code paths.

use super::Scalar;
use crate::parallel::*;

/// Below this many multiply-adds a product runs on the calling thread.
const PAR_WORK: usize = 1 << 16;

/// `c[m×n] = a[m×k] · b[k×n]`, row-major.
///
/// Each output row is accumulated in a fixed order by a single thread, so the
/// result does not depend on how rows are distributed.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let row = |(i, ci): (usize, &mut [T])| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_WORK && current_threads() > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Unfolds `[B, C, H, W]` into `[B·OH·OW, C·K·K]` patches.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.batch * oh * ow * plen];
    let k = g.kernel;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * plen;
                for c in 0..g.in_ch {
                    let plane = (b * g.in_ch + c) * g.height * g.width;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            cols[row + (c * k + ky) * k + kx] = x[plane + iy as usize * g.width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let plen = g.patch_len();
    let mut x = vec![T::zero(); g.batch * g.in_ch * g.height * g.width];
    let k = g.kernel;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * plen;
                for c in 0..g.in_ch {
                    let plane = (b * g.in_ch + c) * g.height * g.width;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            x[plane + iy as usize * g.width + ix as usize] += cols[row + (c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Stacks and merges rows: output row `i` is source row `src[i]` of a
/// `[M, N_in, ops]` block with its input columns summed per `groups`,
/// giving `[src.len(), groups.len(), ops]`.
pub fn column_sum<T: Scalar>(rows: &[T], n_in: usize, ops: usize, src: &[usize], groups: &[Vec<usize>]) -> Vec<T> {
    let c_in = groups.len();
    let mut out = vec![T::zero(); src.len() * c_in * ops];
    for (i, &j) in src.iter().enumerate() {
        let row = &rows[j * n_in * ops..(j + 1) * n_in * ops];
        for (gi, group) in groups.iter().enumerate() {
            let dst = &mut out[(i * c_in + gi) * ops..(i * c_in + gi + 1) * ops];
            for &d in group {
                for (o, v) in dst.iter_mut().enumerate() {
                    *v += row[d * ops + o];
                }
            }
        }
    }
    out
}

/// Mean of `x` over each index group.
pub fn segment_mean<T: Scalar>(x: &[T], groups: &[Vec<usize>]) -> Vec<T> {
    groups
        .iter()
        .map(|g| {
            let s: T = g.iter().map(|&d| x[d]).sum();
            s / T::lit(g.len() as f64)
        })
        .collect()
}

/// Selects rows of width `width`.
pub fn gather_rows<T: Scalar>(x: &[T], width: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&x[i * width..(i + 1) * width]);
    }
    out
}
