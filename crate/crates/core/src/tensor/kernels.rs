//! Slice-level forward/backward kernels. Shapes are validated by the tape
//! before any of these run.

use std::ops::Range;

use rayon::prelude::*;

use super::Element;

/// Upper bound on im2col scratch elements per batch item.
const COLUMN_BUDGET: usize = 1 << 21;

/// Geometry of a strided, zero-padded cubic convolution mapping `input`
/// spatial extents to `output` spatial extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output extents `floor((n + 2p - k) / s) + 1`; `None` if the padded
    /// input is smaller than the kernel.
    pub fn conv(input: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let mut output = [0; 3];
        for (o, &n) in output.iter_mut().zip(&input) {
            if n + 2 * pad < kernel {
                return None;
            }
            *o = (n + 2 * pad - kernel) / stride + 1;
        }
        Some(ConvGeometry { input, output, kernel, stride, pad })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output-depth ranges whose column matrices fit the scratch budget.
    fn depth_chunks(&self, rows: usize) -> Vec<Range<usize>> {
        let plane = self.output[1] * self.output[2];
        let per_chunk = (COLUMN_BUDGET / (rows * plane).max(1)).max(1);
        (0..self.output[0])
            .step_by(per_chunk)
            .map(|s| s..(s + per_chunk).min(self.output[0]))
            .collect()
    }

    /// Input coordinate hit by output `o` and tap `t` along one axis.
    #[inline]
    fn source(&self, o: usize, t: usize, axis: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }
}

/// Unfolds `x` (`channels x in_voxels`) into `cols` (`channels*k^3 x n`) for
/// the output depth slices in `depths`.
fn im2col<T: Element>(g: &ConvGeometry, channels: usize, x: &[T], depths: Range<usize>, cols: &mut [T]) {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let ncols = depths.len() * oh * ow;
    let k = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * g.in_voxels()..(c + 1) * g.in_voxels()];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let mut col = 0;
                    for od in depths.clone() {
                        let Some(id) = g.source(od, kd, 0) else {
                            dst[col..col + oh * ow].fill(T::ZERO);
                            col += oh * ow;
                            continue;
                        };
                        for y in 0..oh {
                            match g.source(y, kh, 1) {
                                Some(iy) => {
                                    let src = &xc[(id * ih + iy) * iw..(id * ih + iy + 1) * iw];
                                    for xo in 0..ow {
                                        dst[col] = match g.source(xo, kw, 2) {
                                            Some(ix) => src[ix],
                                            None => T::ZERO,
                                        };
                                        col += 1;
                                    }
                                }
                                None => {
                                    dst[col..col + ow].fill(T::ZERO);
                                    col += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
fn col2im<T: Element>(g: &ConvGeometry, channels: usize, cols: &[T], depths: Range<usize>, dx: &mut [T]) {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let ncols = depths.len() * oh * ow;
    let k = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut dx[c * g.in_voxels()..(c + 1) * g.in_voxels()];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let mut col = 0;
                    for od in depths.clone() {
                        let Some(id) = g.source(od, kd, 0) else {
                            col += oh * ow;
                            continue;
                        };
                        for y in 0..oh {
                            match g.source(y, kh, 1) {
                                Some(iy) => {
                                    let dst = &mut xc[(id * ih + iy) * iw..(id * ih + iy + 1) * iw];
                                    for xo in 0..ow {
                                        if let Some(ix) = g.source(xo, kw, 2) {
                                            dst[ix] += src[col];
                                        }
                                        col += 1;
                                    }
                                }
                                None => col += ow,
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Copies columns `start..start+n` of a `rows x stride` matrix.
fn gather_cols<T: Element>(m: &[T], rows: usize, stride: usize, start: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        out.extend_from_slice(&m[r * stride + start..r * stride + start + n]);
    }
    out
}

fn scatter_cols<T: Element>(m: &mut [T], rows: usize, stride: usize, start: usize, n: usize, src: &[T]) {
    for r in 0..rows {
        m[r * stride + start..r * stride + start + n].copy_from_slice(&src[r * n..(r + 1) * n]);
    }
}

fn add_cols<T: Element>(m: &mut [T], rows: usize, stride: usize, start: usize, n: usize, src: &[T]) {
    for r in 0..rows {
        for (d, &s) in m[r * stride + start..r * stride + start + n].iter_mut().zip(&src[r * n..(r + 1) * n]) {
            *d += s;
        }
    }
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], voxels: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * voxels..(c + 1) * voxels] {
            *v += b;
        }
    }
}

fn channel_sums<T: Element>(dy: &[T], batch: usize, channels: usize, voxels: usize) -> Vec<T> {
    let mut db = vec![T::ZERO; channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (b * channels + c) * voxels;
            *acc += dy[start..start + voxels].iter().copied().sum::<T>();
        }
    }
    db
}

fn sum_in_order<T: Element>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for p in iter {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Convolution forward. `x`: `batch x cin x in_voxels`, `w`: `cout x cin x k^3`.
pub(crate) fn conv_forward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    batch: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (in_len, out_vox) = (cin * g.in_voxels(), g.out_voxels());
    let rows = cin * g.taps();
    let mut out = vec![T::ZERO; batch * cout * out_vox];
    out.par_chunks_mut(cout * out_vox)
        .zip(x.par_chunks(in_len))
        .with_max_len(1)
        .for_each(|(y, xi)| {
            if g.is_pointwise() {
                T::gemm(false, false, cout, out_vox, cin, T::ONE, w, xi, T::ZERO, y);
            } else {
                let plane = g.output[1] * g.output[2];
                for depths in g.depth_chunks(rows) {
                    let n = depths.len() * plane;
                    let mut cols = vec![T::ZERO; rows * n];
                    im2col(g, cin, xi, depths.clone(), &mut cols);
                    let mut tmp = vec![T::ZERO; cout * n];
                    T::gemm(false, false, cout, n, rows, T::ONE, w, &cols, T::ZERO, &mut tmp);
                    scatter_cols(y, cout, out_vox, depths.start * plane, n, &tmp);
                }
            }
            if let Some(bias) = bias {
                add_channel_bias(y, bias, out_vox);
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Convolution backward for the requested operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    batch: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let (in_len, out_vox) = (cin * g.in_voxels(), g.out_voxels());
    let rows = cin * g.taps();
    let [want_x, want_w, want_b] = want;
    let per_item: Vec<(Vec<T>, Vec<T>)> = x
        .par_chunks(in_len)
        .zip(dy.par_chunks(cout * out_vox))
        .with_max_len(1)
        .map(|(xi, dyi)| {
            let mut dx = if want_x { vec![T::ZERO; in_len] } else { Vec::new() };
            let mut dw = if want_w { vec![T::ZERO; cout * rows] } else { Vec::new() };
            if g.is_pointwise() {
                if want_w {
                    T::gemm(false, true, cout, cin, out_vox, T::ONE, dyi, xi, T::ZERO, &mut dw);
                }
                if want_x {
                    T::gemm(true, false, cin, out_vox, cout, T::ONE, w, dyi, T::ZERO, &mut dx);
                }
                return (dx, dw);
            }
            let plane = g.output[1] * g.output[2];
            for depths in g.depth_chunks(rows) {
                let n = depths.len() * plane;
                let dyc = gather_cols(dyi, cout, out_vox, depths.start * plane, n);
                if want_w {
                    let mut cols = vec![T::ZERO; rows * n];
                    im2col(g, cin, xi, depths.clone(), &mut cols);
                    T::gemm(false, true, cout, rows, n, T::ONE, &dyc, &cols, T::ONE, &mut dw);
                }
                if want_x {
                    let mut dcols = vec![T::ZERO; rows * n];
                    T::gemm(true, false, rows, n, cout, T::ONE, w, &dyc, T::ZERO, &mut dcols);
                    col2im(g, cin, &dcols, depths, &mut dx);
                }
            }
            (dx, dw)
        })
        .collect();
    let (dxs, dws): (Vec<_>, Vec<_>) = per_item.into_iter().unzip();
    ConvGrads {
        input: want_x.then(|| dxs.concat()),
        weight: want_w.then(|| sum_in_order(dws)),
        bias: want_b.then(|| channel_sums(dy, batch, cout, out_vox)),
    }
}

/// Transposed convolution forward: the adjoint of the convolution described
/// by `g`, mapping `g.output` extents back up to `g.input` extents.
/// `x`: `batch x cin x out_voxels(g)`, `w`: `cin x cout x k^3`.
pub(crate) fn conv_transpose_forward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    batch: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (small, big) = (g.out_voxels(), g.in_voxels());
    let rows = cout * g.taps();
    let mut out = vec![T::ZERO; batch * cout * big];
    out.par_chunks_mut(cout * big)
        .zip(x.par_chunks(cin * small))
        .with_max_len(1)
        .for_each(|(y, xi)| {
            let plane = g.output[1] * g.output[2];
            for depths in g.depth_chunks(rows) {
                let n = depths.len() * plane;
                let xc = gather_cols(xi, cin, small, depths.start * plane, n);
                let mut cols = vec![T::ZERO; rows * n];
                T::gemm(true, false, rows, n, cin, T::ONE, w, &xc, T::ZERO, &mut cols);
                col2im(g, cout, &cols, depths, y);
            }
            if let Some(bias) = bias {
                add_channel_bias(y, bias, big);
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    batch: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let (small, big) = (g.out_voxels(), g.in_voxels());
    let rows = cout * g.taps();
    let [want_x, want_w, want_b] = want;
    let per_item: Vec<(Vec<T>, Vec<T>)> = x
        .par_chunks(cin * small)
        .zip(dy.par_chunks(cout * big))
        .with_max_len(1)
        .map(|(xi, dyi)| {
            let mut dx = if want_x { vec![T::ZERO; cin * small] } else { Vec::new() };
            let mut dw = if want_w { vec![T::ZERO; cin * rows] } else { Vec::new() };
            let plane = g.output[1] * g.output[2];
            for depths in g.depth_chunks(rows) {
                let n = depths.len() * plane;
                let mut cols = vec![T::ZERO; rows * n];
                im2col(g, cout, dyi, depths.clone(), &mut cols);
                if want_x {
                    let mut dxc = vec![T::ZERO; cin * n];
                    T::gemm(false, false, cin, n, rows, T::ONE, w, &cols, T::ZERO, &mut dxc);
                    add_cols(&mut dx, cin, small, depths.start * plane, n, &dxc);
                }
                if want_w {
                    let xc = gather_cols(xi, cin, small, depths.start * plane, n);
                    T::gemm(false, true, cin, rows, n, T::ONE, &xc, &cols, T::ONE, &mut dw);
                }
            }
            (dx, dw)
        })
        .collect();
    let (dxs, dws): (Vec<_>, Vec<_>) = per_item.into_iter().unzip();
    ConvGrads {
        input: want_x.then(|| dxs.concat()),
        weight: want_w.then(|| sum_in_order(dws)),
        bias: want_b.then(|| channel_sums(dy, batch, cout, big)),
    }
}

/// 2x max pooling over `planes` independent `[d, h, w]` blocks. Returns the
/// pooled values and, per output, the flat input index of the winning voxel
/// (first in scan order on ties).
pub(crate) fn max_pool2<T: Element>(x: &[T], planes: usize, [d, h, w]: [usize; 3]) -> (Vec<T>, Vec<usize>) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xo;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// Mean over non-overlapping `e^3` patches; trailing voxels that do not
/// fill a patch are dropped.
pub(crate) fn avg_pool<T: Element>(x: &[T], planes: usize, [d, h, w]: [usize; 3], e: usize) -> Vec<T> {
    let (od, oh, ow) = (d / e, h / e, w / e);
    let scale = T::from_f64(1.0 / (e * e * e) as f64);
    let mut out = vec![T::ZERO; planes * od * oh * ow];
    let mut i = 0;
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = T::ZERO;
                    for dz in 0..e {
                        for dy in 0..e {
                            let row = base + ((z * e + dz) * h + y * e + dy) * w + xo * e;
                            for &v in &x[row..row + e] {
                                acc += v;
                            }
                        }
                    }
                    out[i] = acc * scale;
                    i += 1;
                }
            }
        }
    }
    out
}

/// Replicates each voxel over an `e^3` patch of a `[d, h, w]` output,
/// scaled by `scale`; the adjoint of [`avg_pool`] when `scale = 1/e^3`.
/// Output voxels outside whole patches stay zero.
pub(crate) fn patch_spread<T: Element>(
    src: &[T],
    planes: usize,
    [d, h, w]: [usize; 3],
    e: usize,
    scale: T,
) -> Vec<T> {
    let (od, oh, ow) = (d / e, h / e, w / e);
    let mut out = vec![T::ZERO; planes * d * h * w];
    let mut i = 0;
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let v = src[i] * scale;
                    i += 1;
                    for dz in 0..e {
                        for dy in 0..e {
                            let row = base + ((z * e + dz) * h + y * e + dy) * w + xo * e;
                            out[row..row + e].fill(v);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-output-index interpolation taps for 2x linear upsampling with
/// half-pixel centres (align-corners false), clamped at the borders.
fn linear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2<T: Element>(x: &[T], planes: usize, [d, h, w]: [usize; 3]) -> Vec<T> {
    let (td, th, tw) = (linear_taps(d), linear_taps(h), linear_taps(w));
    let mut out = Vec::with_capacity(planes * 8 * d * h * w);
    for p in 0..planes {
        let xp = &x[p * d * h * w..(p + 1) * d * h * w];
        for &(z0, z1, lz) in &td {
            for &(y0, y1, ly) in &th {
                for &(x0, x1, lx) in &tw {
                    let at = |z: usize, y: usize, xx: usize| xp[(z * h + y) * w + xx].to_f64();
                    let v = (1.0 - lz)
                        * ((1.0 - ly) * ((1.0 - lx) * at(z0, y0, x0) + lx * at(z0, y0, x1))
                            + ly * ((1.0 - lx) * at(z0, y1, x0) + lx * at(z0, y1, x1)))
                        + lz * ((1.0 - ly) * ((1.0 - lx) * at(z1, y0, x0) + lx * at(z1, y0, x1))
                            + ly * ((1.0 - lx) * at(z1, y1, x0) + lx * at(z1, y1, x1)));
                    out.push(T::from_f64(v));
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Element>(dy: &[T], planes: usize, [d, h, w]: [usize; 3]) -> Vec<T> {
    let (td, th, tw) = (linear_taps(d), linear_taps(h), linear_taps(w));
    let mut dx = vec![0.0f64; planes * d * h * w];
    let mut i = 0;
    for p in 0..planes {
        let dp = &mut dx[p * d * h * w..(p + 1) * d * h * w];
        for &(z0, z1, lz) in &td {
            for &(y0, y1, ly) in &th {
                for &(x0, x1, lx) in &tw {
                    let g = dy[i].to_f64();
                    i += 1;
                    for (z, wz) in [(z0, 1.0 - lz), (z1, lz)] {
                        for (y, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                            for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                                dp[(z * h + y) * w + xx] += g * wz * wy * wx;
                            }
                        }
                    }
                }
            }
        }
    }
    dx.into_iter().map(T::from_f64).collect()
}

/// `(outer, len, inner)` decomposition of a `[d, h, w]` block along `axis`.
fn axis_layout([d, h, w]: [usize; 3], axis: usize) -> (usize, usize, usize) {
    match axis {
        0 => (1, d, h * w),
        1 => (d, h, w),
        _ => (d * h, w, 1),
    }
}

/// Valid-mode correlation with a 1-D kernel along one axis of every plane.
fn filter_axis<T: Element>(x: &[T], planes: usize, dims: [usize; 3], axis: usize, k: &[T]) -> Vec<T> {
    let (outer, len, inner) = axis_layout(dims, axis);
    let olen = len + 1 - k.len();
    let mut out = vec![T::ZERO; planes * outer * olen * inner];
    for p in 0..planes * outer {
        let src = &x[p * len * inner..(p + 1) * len * inner];
        let dst = &mut out[p * olen * inner..(p + 1) * olen * inner];
        for j in 0..olen {
            let row = &mut dst[j * inner..(j + 1) * inner];
            for (t, &kt) in k.iter().enumerate() {
                let s = &src[(j + t) * inner..(j + t + 1) * inner];
                for (r, &v) in row.iter_mut().zip(s) {
                    *r += kt * v;
                }
            }
        }
    }
    out
}

fn filter_axis_adjoint<T: Element>(dy: &[T], planes: usize, dims: [usize; 3], axis: usize, k: &[T]) -> Vec<T> {
    let (outer, len, inner) = axis_layout(dims, axis);
    let olen = len + 1 - k.len();
    let mut dx = vec![T::ZERO; planes * outer * len * inner];
    for p in 0..planes * outer {
        let src = &dy[p * olen * inner..(p + 1) * olen * inner];
        let dst = &mut dx[p * len * inner..(p + 1) * len * inner];
        for j in 0..olen {
            let g = &src[j * inner..(j + 1) * inner];
            for (t, &kt) in k.iter().enumerate() {
                let row = &mut dst[(j + t) * inner..(j + t + 1) * inner];
                for (r, &v) in row.iter_mut().zip(g) {
                    *r += kt * v;
                }
            }
        }
    }
    dx
}

/// Separable valid-mode window filter: the same 1-D kernel along depth,
/// height and width. Output extents are `n - k + 1`.
pub(crate) fn window_filter<T: Element>(x: &[T], planes: usize, dims: [usize; 3], k: &[T]) -> Vec<T> {
    let kl = k.len() - 1;
    let a = filter_axis(x, planes, dims, 2, k);
    let dims_a = [dims[0], dims[1], dims[2] - kl];
    let b = filter_axis(&a, planes, dims_a, 1, k);
    let dims_b = [dims[0], dims[1] - kl, dims[2] - kl];
    filter_axis(&b, planes, dims_b, 0, k)
}

pub(crate) fn window_filter_backward<T: Element>(dy: &[T], planes: usize, dims: [usize; 3], k: &[T]) -> Vec<T> {
    let kl = k.len() - 1;
    let dims_a = [dims[0], dims[1], dims[2] - kl];
    let dims_b = [dims[0], dims[1] - kl, dims[2] - kl];
    let db = filter_axis_adjoint(dy, planes, dims_b, 0, k);
    let da = filter_axis_adjoint(&db, planes, dims_a, 1, k);
    filter_axis_adjoint(&da, planes, dims, 2, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeometry::conv([16, 16, 16], 7, 1, 3).unwrap();
        assert_eq!(g.output, [16, 16, 16]);
        let g = ConvGeometry::conv([5, 6, 7], 3, 2, 1).unwrap();
        assert_eq!(g.output, [3, 3, 4]);
        assert!(ConvGeometry::conv([2, 2, 2], 3, 1, 0).is_none());
    }

    #[test]
    fn linear_taps_half_pixel() {
        let taps = linear_taps(2);
        let weights: Vec<f64> = taps
            .iter()
            .map(|&(i0, i1, l)| (1.0 - l) * [0.0, 1.0][i0] + l * [0.0, 1.0][i1])
            .collect();
        assert_eq!(weights, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn chunked_conv_matches_single_chunk() {
        // 64 channels of 3^3 taps at 32^2 planes forces several depth chunks.
        let g = ConvGeometry::conv([40, 32, 32], 3, 1, 1).unwrap();
        let rows = 64 * 27;
        assert!(g.depth_chunks(rows).len() > 1);
        let cin = 64;
        let x: Vec<f64> = (0..cin * g.in_voxels()).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        let w: Vec<f64> = (0..2 * rows).map(|i| ((i * 31) % 13) as f64 / 13.0 - 0.5).collect();
        let y = conv_forward(&g, &x, 1, cin, &w, 2, None);
        // Spot-check a few voxels against direct summation.
        for &(co, z, yy, xx) in &[(0, 0, 0, 0), (1, 39, 31, 31), (0, 17, 3, 29), (1, 25, 16, 0)] {
            let mut acc = 0.0;
            for c in 0..cin {
                for kd in 0..3 {
                    for kh in 0..3 {
                        for kw in 0..3 {
                            let (iz, iy, ix) = (z as isize + kd - 1, yy as isize + kh - 1, xx as isize + kw - 1);
                            if iz < 0 || iy < 0 || ix < 0 || iz >= 40 || iy >= 32 || ix >= 32 {
                                continue;
                            }
                            let xi = ((c * 40 + iz as usize) * 32 + iy as usize) * 32 + ix as usize;
                            let wi = ((co * cin + c) * 3 + kd as usize) * 9 + kh as usize * 3 + kw as usize;
                            acc += x[xi] * w[wi];
                        }
                    }
                }
            }
            let got = y[((co * 40 + z) * 32 + yy) * 32 + xx];
            assert!((got - acc).abs() < 1e-9, "{got} vs {acc}");
        }
    }
}
