//! Low-level numeric kernels shared by the autodiff graph and the
//! inference-only forward path.
//!
//! Convolutions are lowered to im2col + GEMM. Activations are stored
//! channel-major as `[C, S, H, W]` where `S` is the number of images
//! (axial slices) processed together, so one GEMM covers the whole batch.

use super::Scalar;

/// Output extent of a "same"-padded convolution: `ceil(input / stride)`.
#[inline]
pub fn conv_out_extent(input: usize, stride: usize) -> usize {
    (input + stride - 1) / stride
}

/// Zero-padding split for a k-wide kernel so that the output extent is
/// exactly `ceil(input / stride)`. Returns `(pad_begin, pad_end)`.
#[inline]
pub(crate) fn same_padding(input: usize, stride: usize, k: usize) -> (usize, usize) {
    let out = conv_out_extent(input, stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    let begin = total / 2;
    (begin, total - begin)
}

/// Column-panel width kept resident in cache while rows of A sweep it; the
/// k loop is unrolled four-wide so each C element is loaded and stored once
/// per four rank-1 updates.
const GEMM_PANEL: usize = 512;

/// C += A * B with A `[m x k]`, B `[k x n]`, C `[m x n]`, all row-major.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let jw = GEMM_PANEL.min(n - j0);
        for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            let c_tile = &mut c_row[j0..j0 + jw];
            let mut p = 0;
            while p + 4 <= k {
                let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
                let b0 = &b[p * n + j0..p * n + j0 + jw];
                let b1 = &b[(p + 1) * n + j0..(p + 1) * n + j0 + jw];
                let b2 = &b[(p + 2) * n + j0..(p + 2) * n + j0 + jw];
                let b3 = &b[(p + 3) * n + j0..(p + 3) * n + j0 + jw];
                for i in 0..jw {
                    let t = a0.mul_add(b0[i], c_tile[i]);
                    let t = a1.mul_add(b1[i], t);
                    let t = a2.mul_add(b2[i], t);
                    c_tile[i] = a3.mul_add(b3[i], t);
                }
                p += 4;
            }
            while p < k {
                let av = a_row[p];
                let b_tile = &b[p * n + j0..p * n + j0 + jw];
                for (cv, &bv) in c_tile.iter_mut().zip(b_tile) {
                    *cv = av.mul_add(bv, *cv);
                }
                p += 1;
            }
        }
        j0 += jw;
    }
}

/// C += A * B^T with A `[m x k]`, B `[n x k]`, C `[m x n]`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            *cv = cv.add(dot(a_row, b_row));
        }
    }
}

/// C += A^T * B with A `[k x m]`, B `[k x n]`, C `[m x n]`.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let jw = GEMM_PANEL.min(n - j0);
        for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
            let c_tile = &mut c_row[j0..j0 + jw];
            let mut p = 0;
            while p + 4 <= k {
                let (a0, a1, a2, a3) = (
                    a[p * m + i],
                    a[(p + 1) * m + i],
                    a[(p + 2) * m + i],
                    a[(p + 3) * m + i],
                );
                let b0 = &b[p * n + j0..p * n + j0 + jw];
                let b1 = &b[(p + 1) * n + j0..(p + 1) * n + j0 + jw];
                let b2 = &b[(p + 2) * n + j0..(p + 2) * n + j0 + jw];
                let b3 = &b[(p + 3) * n + j0..(p + 3) * n + j0 + jw];
                for idx in 0..jw {
                    let t = a0.mul_add(b0[idx], c_tile[idx]);
                    let t = a1.mul_add(b1[idx], t);
                    let t = a2.mul_add(b2[idx], t);
                    c_tile[idx] = a3.mul_add(b3[idx], t);
                }
                p += 4;
            }
            while p < k {
                let av = a[p * m + i];
                let b_tile = &b[p * n + j0..p * n + j0 + jw];
                for (cv, &bv) in c_tile.iter_mut().zip(b_tile) {
                    *cv = av.mul_add(bv, *cv);
                }
                p += 1;
            }
        }
        j0 += jw;
    }
}

/// Dot product with eight-way accumulation so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const W: usize = 8;
    let mut acc = [T::ZERO; W];
    let chunks = a.len() / W;
    let (a_main, a_tail) = a.split_at(chunks * W);
    let (b_main, b_tail) = b.split_at(chunks * W);
    for (av, bv) in a_main.chunks_exact(W).zip(b_main.chunks_exact(W)) {
        for l in 0..W {
            acc[l] = av[l].mul_add(bv[l], acc[l]);
        }
    }
    let mut s = acc.iter().copied().sum();
    for (&av, &bv) in a_tail.iter().zip(b_tail) {
        s = av.mul_add(bv, s);
    }
    s
}

/// y += W * x with W `[rows x cols]`, x `[cols]`, y `[rows]`.
pub(crate) fn matvec_acc<T: Scalar>(rows: usize, cols: usize, w: &[T], x: &[T], y: &mut [T]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for (yv, w_row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        *yv = yv.add(dot(w_row, x));
    }
}

/// x_grad += W^T * y_grad.
pub(crate) fn matvec_transpose_acc<T: Scalar>(
    rows: usize,
    cols: usize,
    w: &[T],
    y_grad: &[T],
    x_grad: &mut [T],
) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(y_grad.len(), rows);
    debug_assert_eq!(x_grad.len(), cols);
    for (&gv, w_row) in y_grad.iter().zip(w.chunks_exact(cols)) {
        if gv.to_f64() == 0.0 {
            continue;
        }
        for (xg, &wv) in x_grad.iter_mut().zip(w_row) {
            *xg = gv.mul_add(wv, *xg);
        }
    }
}

/// Geometry of one same-padded 3x3 convolution over a slice batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) const KERNEL: usize = 3;

impl ConvGeom {
    pub fn new(batch: usize, c_in: usize, h: usize, w: usize, c_out: usize, stride: usize) -> Self {
        let oh = conv_out_extent(h, stride);
        let ow = conv_out_extent(w, stride);
        let (pad_top, _) = same_padding(h, stride, KERNEL);
        let (pad_left, _) = same_padding(w, stride, KERNEL);
        ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        }
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.batch * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.batch * self.oh * self.ow
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * KERNEL * KERNEL
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Unrolls `input` `[C_in, S, H, W]` into `col` `[C_in*9, S*OH*OW]`.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], col: &mut [T]) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let n = g.col_cols();
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let col_row = &mut col[row * n..(row + 1) * n];
                for s in 0..g.batch {
                    let img = &input[(c * g.batch + s) * plane..(c * g.batch + s + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        let dst = &mut col_row[(s * g.oh + oy) * g.ow..(s * g.oh + oy + 1) * g.ow];
                        if iy < 0 || iy as usize >= g.h {
                            dst.fill(T::ZERO);
                            continue;
                        }
                        let src_row = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        fill_patch_row(g, kx, src_row, dst);
                    }
                }
            }
        }
    }
}

/// In-bounds output span `[lo, hi)` for a kernel column offset: positions
/// where `ox*stride + kx - pad_left` lands inside `[0, w)`.
#[inline]
fn patch_span(g: &ConvGeom, kx: usize) -> (usize, usize, isize) {
    let off = kx as isize - g.pad_left as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize + g.stride - 1) / g.stride
    };
    let hi_num = g.w as isize - 1 - off;
    let hi = if hi_num < 0 {
        0
    } else {
        (hi_num as usize / g.stride + 1).min(g.ow)
    };
    (lo.min(hi), hi, off)
}

/// One output row of im2col: gathers `src_row[ox*stride + kx - pad_left]`,
/// with zero fill outside the in-bounds span.
#[inline]
fn fill_patch_row<T: Scalar>(g: &ConvGeom, kx: usize, src_row: &[T], dst: &mut [T]) {
    let (lo, hi, off) = patch_span(g, kx);
    dst[..lo].fill(T::ZERO);
    dst[hi..].fill(T::ZERO);
    if g.stride == 1 {
        let start = (lo as isize + off) as usize;
        dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
    } else {
        for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
            let ix = ((lo + ox) * g.stride) as isize + off;
            *d = src_row[ix as usize];
        }
    }
}

/// Scatter-adds `col` `[C_in*9, S*OH*OW]` back into `grad_input`.
pub(crate) fn col2im_acc<T: Scalar>(g: &ConvGeom, col: &[T], grad_input: &mut [T]) {
    debug_assert_eq!(grad_input.len(), g.input_len());
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let n = g.col_cols();
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let col_row = &col[row * n..(row + 1) * n];
                for s in 0..g.batch {
                    let img = &mut grad_input
                        [(c * g.batch + s) * plane..(c * g.batch + s + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let src = &col_row[(s * g.oh + oy) * g.ow..(s * g.oh + oy + 1) * g.ow];
                        let img_row =
                            &mut img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let (lo, hi, off) = patch_span(g, kx);
                        if g.stride == 1 {
                            let start = (lo as isize + off) as usize;
                            for (iv, &v) in img_row[start..start + (hi - lo)]
                                .iter_mut()
                                .zip(&src[lo..hi])
                            {
                                *iv = iv.add(v);
                            }
                        } else {
                            for (ox, &v) in src[lo..hi].iter().enumerate() {
                                let ix = ((lo + ox) * g.stride) as isize + off;
                                img_row[ix as usize] = img_row[ix as usize].add(v);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 3x3 convolution forward over a slice batch.
///
/// `weight` is `[C_out, C_in, 3, 3]`, `bias` is `[C_out]`; `output` is
/// `[C_out, S, OH, OW]`. `col` is scratch and is resized as needed.
pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
    output: &mut [T],
    col: &mut Vec<T>,
) {
    let n = g.col_cols();
    col.clear();
    col.resize(g.col_rows() * n, T::ZERO);
    im2col(g, input, col);
    for (o, out_plane) in output.chunks_exact_mut(n).enumerate() {
        out_plane.fill(bias[o]);
    }
    gemm_nn(g.c_out, g.col_rows(), n, weight, col, output);
}

/// Backward pass of [`conv2d_forward`].
///
/// Accumulates into `grad_input`, `grad_weight`, `grad_bias`; any of them may
/// be `None` when that gradient is not required. The im2col buffer is
/// recomputed from `input` rather than kept alive from the forward pass.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_output: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
    col: &mut Vec<T>,
) {
    let n = g.col_cols();
    if let Some(gb) = grad_bias {
        for (o, out_plane) in grad_output.chunks_exact(n).enumerate() {
            gb[o] = gb[o].add(out_plane.iter().copied().sum());
        }
    }
    if let Some(gw) = grad_weight {
        col.clear();
        col.resize(g.col_rows() * n, T::ZERO);
        im2col(g, input, col);
        gemm_nt(g.c_out, n, g.col_rows(), grad_output, col, gw);
    }
    if let Some(gi) = grad_input {
        col.clear();
        col.resize(g.col_rows() * n, T::ZERO);
        gemm_tn(g.col_rows(), g.c_out, n, weight, grad_output, col);
        col2im_acc(g, col, gi);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE.div(T::ONE.add(x.neg().exp()))
}
