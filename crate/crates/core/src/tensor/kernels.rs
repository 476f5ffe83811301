//! Raw loops behind the tape operations. Everything here works on flat
//! slices; shape checking happens in `tape.rs`.

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1, stride 1, unpadded convolution reads its input as the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with optional transposes.
///
/// `a` is m×k and `b` is k×n after transposition; all buffers are row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted by the callers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Range of output columns `oj` whose input column `oj*stride + v - pad` lies in `0..width`.
fn valid_cols(g: &ConvGeom, v: usize) -> (usize, usize) {
    let lo = if v >= g.pad {
        0
    } else {
        (g.pad - v).div_ceil(g.stride)
    };
    let limit = g.pad + g.width;
    let hi = if v >= limit {
        0
    } else {
        (limit - v).div_ceil(g.stride)
    };
    let hi = hi.min(g.out_w);
    (lo.min(hi), hi)
}

/// Gathers the receptive-field patches of one sample into a
/// `patch_len × out_len` matrix. Out-of-bounds taps are zero.
pub(crate) fn im2col(g: &ConvGeom, input: &[f32], cols: &mut [f32]) {
    let out_len = g.out_len();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let src = &input[c * plane..(c + 1) * plane];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                let (lo, hi) = valid_cols(g, v);
                for oi in 0..g.out_h {
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    let ii = (oi * g.stride + u) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[ii as usize * g.width..(ii as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = lo + v - g.pad;
                        line[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for oj in lo..hi {
                            line[oj] = src_row[oj * g.stride + v - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f32], dinput: &mut [f32]) {
    let out_len = g.out_len();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let dst = &mut dinput[c * plane..(c + 1) * plane];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (c * g.kh + u) * g.kw + v;
                let src = &cols[row * out_len..(row + 1) * out_len];
                let (lo, hi) = valid_cols(g, v);
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + u) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let line = &src[oi * g.out_w..(oi + 1) * g.out_w];
                    let dst_row = &mut dst[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in lo..hi {
                        dst_row[oj * g.stride + v - g.pad] += line[oj];
                    }
                }
            }
        }
    }
}

/// Convolution of a batch. `out` is N×K×out_h×out_w.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    kernels: usize,
    out: &mut [f32],
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = g.out_len();
    let patch = g.patch_len();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * out_len]
    };
    for n in 0..batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let y = &mut out[n * kernels * out_len..(n + 1) * kernels * out_len];
        let b_mat: &[f32] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        gemm(kernels, patch, out_len, weight, false, b_mat, false, y, false);
        if let Some(bias) = bias {
            for (k, &b) in bias.iter().enumerate() {
                for v in &mut y[k * out_len..(k + 1) * out_len] {
                    *v += b;
                }
            }
        }
    }
}

/// Gradients of a batched convolution. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f32],
    weight: &[f32],
    kernels: usize,
    dout: &[f32],
    mut dinput: Option<&mut [f32]>,
    mut dweight: Option<&mut [f32]>,
    mut dbias: Option<&mut [f32]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = g.out_len();
    let patch = g.patch_len();
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise || dweight.is_none() {
        Vec::new()
    } else {
        vec![0.0; patch * out_len]
    };
    let mut dcols = if pointwise || dinput.is_none() {
        Vec::new()
    } else {
        vec![0.0; patch * out_len]
    };
    for n in 0..batch {
        let x = &input[n * in_len..(n + 1) * in_len];
        let dy = &dout[n * kernels * out_len..(n + 1) * kernels * out_len];
        if let Some(db) = dbias.as_deref_mut() {
            for (k, acc) in db.iter_mut().enumerate() {
                *acc += dy[k * out_len..(k + 1) * out_len].iter().sum::<f32>();
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            let b_mat: &[f32] = if pointwise {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            gemm(kernels, out_len, patch, dy, false, b_mat, true, dw, true);
        }
        if let Some(dx_all) = dinput.as_deref_mut() {
            let dx = &mut dx_all[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(patch, kernels, out_len, weight, true, dy, false, dx, true);
            } else {
                gemm(patch, kernels, out_len, weight, true, dy, false, &mut dcols, false);
                col2im_add(g, &dcols, dx);
            }
        }
    }
}

/// Max pooling over `planes` independent H×W planes. Returns the flat input
/// index of each window's first maximum in row-major scan order.
pub(crate) fn maxpool_forward(
    input: &[f32],
    planes: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
    out: &mut [f32],
) -> Vec<u32> {
    let out_h = (height - window) / stride + 1;
    let out_w = (width - window) / stride + 1;
    let mut argmax = vec![0u32; planes * out_h * out_w];
    for p in 0..planes {
        let base = p * height * width;
        for oi in 0..out_h {
            for oj in 0..out_w {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = base + oi * stride * width + oj * stride;
                for u in 0..window {
                    let row = base + (oi * stride + u) * width + oj * stride;
                    for v in 0..window {
                        let val = input[row + v];
                        if val > best {
                            best = val;
                            best_idx = row + v;
                        }
                    }
                }
                let o = (p * out_h + oi) * out_w + oj;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    argmax
}

