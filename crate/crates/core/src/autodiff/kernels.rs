//! Numeric kernels shared by the forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

/// Dot product with four independent accumulators.
///
/// The fixed lane split keeps the summation order identical on every call,
/// so results stay bit-reproducible while the loop still vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// Register-blocked `out += op(a) · b` with `b` row-major `k×n`.
///
/// Each `MR×NR` output tile accumulates over the full inner dimension in
/// order before being added to `out`, so the summation order is fixed.
#[inline(always)]
fn gemm_blocked<const TA: bool>(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let a_at = |i: usize, p: usize| if TA { a[p * m + i] } else { a[i * k + p] };
    let n_main = n - n % NR;
    let m_main = m - m % MR;
    for j0 in (0..n_main).step_by(NR) {
        for i0 in (0..m_main).step_by(MR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a_at(i0 + r, p);
                    for c in 0..NR {
                        row[c] += av * brow[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let dst = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for c in 0..NR {
                    dst[c] += row[c];
                }
            }
        }
        for i in m_main..m {
            let mut acc = [0.0f64; NR];
            for p in 0..k {
                let av = a_at(i, p);
                for c in 0..NR {
                    acc[c] += av * b[p * n + j0 + c];
                }
            }
            for c in 0..NR {
                out[i * n + j0 + c] += acc[c];
            }
        }
    }
    if n_main < n {
        for i in 0..m {
            for j in n_main..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a_at(i, p) * b[p * n + j];
                }
                out[i * n + j] += s;
            }
        }
    }
}

/// `out += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `ta` the buffer `a` holds a `k×m` matrix; with `tb` the buffer `b`
/// holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => gemm_blocked::<false>(a, b, out, m, k, n),
        (true, false) => gemm_blocked::<true>(a, b, out, m, k, n),
        (false, true) => {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] += s;
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution over one batch item.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1×1, stride-1, unpadded convolution needs no patch unrolling.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unrolls one image `(c_in, h, w)` into a `(patch_len, out_pixels)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut cols[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `(patch_len, out_pixels)` matrix back onto an image.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += cols[row + oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a whole batch. `x` is `(batch, c_in, h, w)`,
/// `weight` is `(c_out, c_in, kh, kw)`.
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    batch: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_exact_mut(p).enumerate() {
                row.fill(bias[co]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm_acc(weight, src, ob, g.c_out, k, p, false, false);
    }
    out
}

/// Gradients of a batched convolution. Returns `(d_input, d_weight, d_bias)`,
/// each only when requested.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    batch: usize,
    g: &ConvGeom,
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut dx = want[0].then(|| vec![0.0; batch * in_len]);
    let mut dw = want[1].then(|| vec![0.0; g.c_out * k]);
    let mut db = want[2].then(|| vec![0.0; g.c_out]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let mut cols_t = if dw.is_some() { vec![0.0; k * p] } else { Vec::new() };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..batch {
        let gb = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, row) in gb.chunks_exact(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let src: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW = dOut · colsᵀ, with the patch matrix transposed up front so
            // the product runs through the blocked kernel.
            transpose_into(src, k, p, &mut cols_t);
            gemm_acc(gb, &cols_t, dw, g.c_out, p, k, false, false);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm_acc(weight, gb, dxb, k, g.c_out, p, true, false);
            } else {
                dcols.fill(0.0);
                gemm_acc(weight, gb, &mut dcols, k, g.c_out, p, true, false);
                col2im(&dcols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Writes the transpose of a row-major `rows×cols` matrix into `out`.
pub fn transpose_into(src: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading `shape` as if it had been broadcast to `out`
/// (zero stride along broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every index of `out` together with the matching flat offsets into
/// two broadcast operands.
pub fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total: usize = out.iter().product();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut ia, mut ib) = (oa, ob);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            oa -= sa[axis] * out[axis];
            ob -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target`, undoing a broadcast.
pub fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![0.0; n];
    let st = broadcast_strides(target, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &st, &zero, |o, it, _| acc[it] += grad[o]);
    acc
}
