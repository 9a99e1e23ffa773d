//! Raw numeric kernels over flat row-major buffers.
//!
//! Everything here is free of graph bookkeeping so it can be shared between
//! the differentiable ops and plain inference helpers.

use crate::scalar::Scalar;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Transposes axes: output axis `d` is input axis `perm[d]`.
pub fn permute<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    assert_eq!(shape.len(), perm.len(), "permute rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total: usize = shape.iter().product();
    if total == 0 || shape.len() <= 1 {
        return (data.to_vec(), out_shape);
    }
    let in_strides = strides(shape);
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = shape.len();
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_stride = src[last];
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            let mut off = base;
            for _ in 0..inner {
                out.push(data[off]);
                off += inner_stride;
            }
        }
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            base += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Layout of one matrix operand inside a batched buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    /// Offset between consecutive batch entries (0 = shared).
    pub batch_stride: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatLayout {
    /// Row-major `rows×cols` storage, optionally read transposed.
    pub fn dense(rows: usize, cols: usize, transposed: bool, shared: bool) -> Self {
        let batch_stride = if shared { 0 } else { rows * cols };
        if transposed {
            Self {
                batch_stride,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            Self {
                batch_stride,
                rs: cols as isize,
                cs: 1,
            }
        }
    }
}

/// `c[i] = a[i]·b[i] + beta·c[i]` for every batch entry; a shared `c`
/// (batch_stride 0) accumulates across the batch.
#[allow(clippy::too_many_arguments)]
pub fn batched_gemm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    al: MatLayout,
    b: &[T],
    bl: MatLayout,
    c: &mut [T],
    cl: MatLayout,
    beta: T,
) {
    for i in 0..batch {
        let beta = if cl.batch_stride == 0 && i > 0 { T::one() } else { beta };
        let a_off = i * al.batch_stride;
        let b_off = i * bl.batch_stride;
        let c_off = i * cl.batch_stride;
        T::gemm(
            m,
            k,
            n,
            &a[a_off..],
            (al.rs, al.cs),
            &b[b_off..],
            (bl.rs, bl.cs),
            beta,
            &mut c[c_off..],
            (cl.rs, cl.cs),
        );
    }
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kh) / self.stride + 1,
            (self.width + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds one `[C,H,W]` sample into `[C·kh·kw, Ho·Wo]` columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Two-tap linear interpolation table for half-pixel-centred resizing
/// (the `align_corners = false` convention).
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `[h,w]` planes to `[oh,ow]`.
pub fn resize_planes<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let tw = linear_taps(w, ow);
    let th = linear_taps(h, oh);
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (ox, &(i0, i1, f)) in tw.iter().enumerate() {
                let f = T::of(f);
                tmp[y * ow + ox] = row[i0] * (T::one() - f) + row[i1] * f;
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(i0, i1, f)) in th.iter().enumerate() {
            let f = T::of(f);
            let g = T::one() - f;
            for ox in 0..ow {
                dst[oy * ow + ox] = tmp[i0 * ow + ox] * g + tmp[i1 * ow + ox] * f;
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`].
pub fn resize_planes_backward<T: Scalar>(
    grad: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let tw = linear_taps(w, ow);
    let th = linear_taps(h, oh);
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        tmp.fill(T::zero());
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(i0, i1, f)) in th.iter().enumerate() {
            let f = T::of(f);
            let c = T::one() - f;
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                tmp[i0 * ow + ox] += v * c;
                tmp[i1 * ow + ox] += v * f;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, f)) in tw.iter().enumerate() {
                let f = T::of(f);
                let v = tmp[y * ow + ox];
                dst[y * w + i0] += v * (T::one() - f);
                dst[y * w + i1] += v * f;
            }
        }
    }
    out
}

/// Row-wise softmax over rows of length `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let inv = T::one() / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// Per-channel mean and biased variance of an `[N,C,plane]` buffer.
pub fn channel_mean_var<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / (n * plane) as f64;
        let mut sq = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            sq += x[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::of(mu);
        var[ch] = T::of(sq) / count;
    }
    (mean, var)
}
