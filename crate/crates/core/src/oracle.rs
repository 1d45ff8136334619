//! Slow, loop-by-definition reference implementations.
//!
//! Nothing here shares code with the fast kernels or the tape: windows are
//! evaluated one at a time with centred moments, convolutions are plain
//! nested sums. Used by the test-suite and `pcsa selfcheck`.

use crate::losses::{SsimConfig, WindowKind};
use crate::tensor::{Shape, Volume};
use crate::{Error, Result};

fn window_weights(cfg: &SsimConfig, edge: usize) -> Vec<f64> {
    let c = (edge - 1) as f64 / 2.0;
    let one_d: Vec<f64> = (0..edge)
        .map(|i| match cfg.window_kind {
            WindowKind::Uniform => 1.0,
            WindowKind::Gaussian => (-((i as f64 - c) * (i as f64 - c)) / (2.0 * cfg.sigma * cfg.sigma)).exp(),
        })
        .collect();
    let mut w = Vec::with_capacity(edge * edge * edge);
    for a in &one_d {
        for b in &one_d {
            for d in &one_d {
                w.push(a * b * d);
            }
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// `max(m, 1e-6)^p`, or `m` itself for `p = 1`.
fn floored_pow(m: f64, p: f64) -> f64 {
    if p == 1.0 { m } else { m.max(1e-6).powf(p) }
}

fn pool2(v: &[f64], [d, h, w]: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = vec![0.0; od * oh * ow];
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += v[((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx];
                        }
                    }
                }
                out[(z * oh + y) * ow + x] = s / 8.0;
            }
        }
    }
    (out, [od, oh, ow])
}

/// Window means of `[l, c, s, c*s, l*c*s]` for one plane.
fn plane_means(x: &[f64], y: &[f64], dims: [usize; 3], weights: &[f64], edge: usize, cfg: &SsimConfig) -> [f64; 5] {
    let [d, h, w] = dims;
    let (c1, c2, c3) = (cfg.c1(), cfg.c2(), cfg.c3());
    let (nd, nh, nw) = (d + 1 - edge, h + 1 - edge, w + 1 - edge);
    let mut total = [0.0; 5];
    for z in 0..nd {
        for r in 0..nh {
            for q in 0..nw {
                let idx = |i: usize| {
                    let (dz, rest) = (i / (edge * edge), i % (edge * edge));
                    ((z + dz) * h + r + rest / edge) * w + q + rest % edge
                };
                let (mut mx, mut my) = (0.0, 0.0);
                for (i, wt) in weights.iter().enumerate() {
                    mx += wt * x[idx(i)];
                    my += wt * y[idx(i)];
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for (i, wt) in weights.iter().enumerate() {
                    let (dx, dy) = (x[idx(i)] - mx, y[idx(i)] - my);
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cov += wt * dx * dy;
                }
                let (sx, sy) = (vx.max(0.0).sqrt(), vy.max(0.0).sqrt());
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                let c = (2.0 * sx * sy + c2) / (vx + vy + c2);
                let st = (cov + c3) / (sx * sy + c3);
                for (t, v) in total.iter_mut().zip([l, c, st, c * st, l * c * st]) {
                    *t += v;
                }
            }
        }
    }
    total.map(|t| t / (nd * nh * nw) as f64)
}

/// Brute-force (MS-)SSIM over `cfg.scales` scales, averaged over batch items.
pub fn ms_ssim(x: &Volume<f64>, y: &Volume<f64>, cfg: &SsimConfig) -> Result<f64> {
    let s = x.shape();
    if y.shape() != s {
        return Err(Error::Shape(format!("oracle operands differ: {s} vs {}", y.shape())));
    }
    let edge = cfg.effective_window(s.spatial())?;
    let weights = window_weights(cfg, edge);
    let mut per_item = 0.0;
    for b in 0..s.batch {
        let item_x = x.item(b);
        let item_y = y.item(b);
        let mut planes: Vec<(Vec<f64>, Vec<f64>)> = (0..s.channels)
            .map(|c| {
                let r = c * s.voxels()..(c + 1) * s.voxels();
                (item_x.data()[r.clone()].to_vec(), item_y.data()[r].to_vec())
            })
            .collect();
        let mut dims = s.spatial();
        let mut product = 1.0;
        for j in 0..cfg.scales {
            if j > 0 {
                let mut next_dims = dims;
                for (px, py) in planes.iter_mut() {
                    let (nx, nd) = pool2(px, dims);
                    *px = nx;
                    *py = pool2(py, dims).0;
                    next_dims = nd;
                }
                dims = next_dims;
            }
            let mut m = [0.0; 5];
            for (px, py) in &planes {
                for (acc, v) in m.iter_mut().zip(plane_means(px, py, dims, &weights, edge, cfg)) {
                    *acc += v / s.channels as f64;
                }
            }
            let [l, c, st, cs, lcs] = m;
            let (b, g) = (cfg.contrast_exponents[j], cfg.structure_exponents[j]);
            let a = cfg.luminance_exponent;
            let coarsest = j + 1 == cfg.scales;
            let factor = match (coarsest, b == g) {
                (false, true) => floored_pow(cs, b),
                (false, false) => floored_pow(c, b) * floored_pow(st, g),
                (true, true) if a == b => floored_pow(lcs, b),
                (true, true) => floored_pow(l, a) * floored_pow(cs, b),
                (true, false) => floored_pow(l, a) * floored_pow(c, b) * floored_pow(st, g),
            };
            product *= factor;
        }
        per_item += product;
    }
    Ok(per_item / s.batch as f64)
}

/// Brute-force single-scale SSIM with the coarsest-scale exponents.
pub fn ssim(x: &Volume<f64>, y: &Volume<f64>, cfg: &SsimConfig) -> Result<f64> {
    ms_ssim(x, y, &cfg.finest_scale())
}

/// Mean absolute difference by direct summation.
pub fn mae(x: &Volume<f64>, y: &Volume<f64>) -> f64 {
    let s = x.shape();
    let mut total = 0.0;
    for b in 0..s.batch {
        for c in 0..s.channels {
            for z in 0..s.depth {
                for r in 0..s.height {
                    for q in 0..s.width {
                        total += (x.at(b, c, z, r, q) - y.at(b, c, z, r, q)).abs();
                    }
                }
            }
        }
    }
    total / s.numel() as f64
}

/// Direct convolution: weight `(out, in, k, k, k)`, symmetric zero padding.
pub fn conv3d(x: &Volume<f64>, weight: &Volume<f64>, bias: Option<&[f64]>, stride: usize, pad: usize) -> Volume<f64> {
    let s = x.shape();
    let ws = weight.shape();
    let k = ws.depth;
    let out_len = |n: usize| (n + 2 * pad - k) / stride + 1;
    let os = Shape::new(s.batch, ws.batch, out_len(s.depth), out_len(s.height), out_len(s.width)).expect("nonzero");
    Volume::from_fn(os, |b, o, z, r, q| {
        let mut acc = bias.map_or(0.0, |bs| bs[o]);
        for i in 0..s.channels {
            for a in 0..k {
                for bb in 0..k {
                    for c in 0..k {
                        let zi = (z * stride + a) as isize - pad as isize;
                        let ri = (r * stride + bb) as isize - pad as isize;
                        let qi = (q * stride + c) as isize - pad as isize;
                        let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
                        if inside(zi, s.depth) && inside(ri, s.height) && inside(qi, s.width) {
                            acc += x.at(b, i, zi as usize, ri as usize, qi as usize) * weight.at(o, i, a, bb, c);
                        }
                    }
                }
            }
        }
        acc
    })
}

/// Scatter-form transposed convolution doubling extents: weight `(in, out, k, k, k)`,
/// input voxel `z` feeds output `2z + a - (k-1)/2`.
pub fn conv_transpose3d(x: &Volume<f64>, weight: &Volume<f64>, bias: Option<&[f64]>) -> Volume<f64> {
    let s = x.shape();
    let ws = weight.shape();
    let (k, cout) = (ws.depth, ws.channels);
    let pad = (k - 1) / 2;
    let os = Shape::new(s.batch, cout, 2 * s.depth, 2 * s.height, 2 * s.width).expect("nonzero");
    let mut out = Volume::from_fn(os, |_, o, _, _, _| bias.map_or(0.0, |bs| bs[o]));
    for b in 0..s.batch {
        for i in 0..s.channels {
            for z in 0..s.depth {
                for r in 0..s.height {
                    for q in 0..s.width {
                        let v = x.at(b, i, z, r, q);
                        for o in 0..cout {
                            for a in 0..k {
                                for bb in 0..k {
                                    for c in 0..k {
                                        let zo = (2 * z + a) as isize - pad as isize;
                                        let ro = (2 * r + bb) as isize - pad as isize;
                                        let qo = (2 * q + c) as isize - pad as isize;
                                        if zo < 0 || ro < 0 || qo < 0 {
                                            continue;
                                        }
                                        let (zo, ro, qo) = (zo as usize, ro as usize, qo as usize);
                                        if zo >= os.depth || ro >= os.height || qo >= os.width {
                                            continue;
                                        }
                                        let at = os.offset(b, o, zo, ro, qo);
                                        out.data_mut()[at] += v * weight.at(i, o, a, bb, c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `2x2x2` max pooling by direct comparison.
pub fn max_pool2(x: &Volume<f64>) -> Volume<f64> {
    let s = x.shape();
    let os = s.with_spatial(s.spatial().map(|n| n / 2));
    Volume::from_fn(os, |b, c, z, r, q| {
        let mut m = f64::NEG_INFINITY;
        for dz in 0..2 {
            for dr in 0..2 {
                for dq in 0..2 {
                    m = m.max(x.at(b, c, 2 * z + dz, 2 * r + dr, 2 * q + dq));
                }
            }
        }
        m
    })
}

/// Trilinear 2x upsampling with half-pixel centres and edge clamping.
pub fn upsample_trilinear2(x: &Volume<f64>) -> Volume<f64> {
    let s = x.shape();
    let os = s.with_spatial(s.spatial().map(|n| 2 * n));
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    Volume::from_fn(os, |b, c, z, r, q| {
        let (z0, z1, fz) = coord(z, s.depth);
        let (r0, r1, fr) = coord(r, s.height);
        let (q0, q1, fq) = coord(q, s.width);
        let mut acc = 0.0;
        for (zz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (rr, wr) in [(r0, 1.0 - fr), (r1, fr)] {
                for (qq, wq) in [(q0, 1.0 - fq), (q1, fq)] {
                    acc += wz * wr * wq * x.at(b, c, zz, rr, qq);
                }
            }
        }
        acc
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::random_volume;
    use crate::tensor::{Padding, Tape};

    #[test]
    fn conv_matches_kernel_path() {
        let x = random_volume(Shape::new(2, 3, 5, 6, 4).unwrap(), -1.0, 1.0, 1);
        let w = random_volume(Shape::new(4, 3, 3, 3, 3).unwrap(), -1.0, 1.0, 2);
        let bias = [0.1, -0.2, 0.3, 0.0];
        for stride in [1, 2] {
            let mut tape = Tape::<f64>::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let bv = tape.constant(Volume::from_vec(Shape::new(4, 1, 1, 1, 1).unwrap(), bias.to_vec()).unwrap());
            let y = tape.conv3d(xv, wv, Some(bv), stride, Padding::Same).unwrap();
            let want = conv3d(&x, &w, Some(&bias), stride, 1);
            assert!(tape.value(y).max_abs_diff(&want) < 1e-12, "stride {stride}");
        }
    }

    #[test]
    fn conv_counts_in_bounds_neighbours() {
        let x = Volume::full(Shape::cube(1, 1, 2).unwrap(), 1.0);
        let w = Volume::full(Shape::cube(1, 1, 3).unwrap(), 1.0);
        let y = conv3d(&x, &w, None, 1, 1);
        assert!(y.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn transposed_conv_matches_kernel_path() {
        let x = random_volume(Shape::new(2, 3, 2, 3, 2).unwrap(), -1.0, 1.0, 3);
        let w = random_volume(Shape::new(3, 2, 3, 3, 3).unwrap(), -1.0, 1.0, 4);
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv_transpose3d(xv, wv, None).unwrap();
        assert!(tape.value(y).max_abs_diff(&conv_transpose3d(&x, &w, None)) < 1e-12);
    }

    #[test]
    fn pools_and_upsampling_match_kernel_path() {
        let x = random_volume(Shape::new(1, 2, 4, 6, 2).unwrap(), -1.0, 1.0, 5);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let p = tape.max_pool2(xv).unwrap();
        let u = tape.upsample_trilinear2(xv);
        assert_eq!(tape.value(p), &max_pool2(&x));
        assert!(tape.value(u).max_abs_diff(&upsample_trilinear2(&x)) < 1e-12);
    }

    #[test]
    fn identical_inputs_score_one() {
        let x = random_volume(Shape::cube(1, 1, 8).unwrap(), 0.0, 1.0, 6);
        assert!((ms_ssim(&x, &x, &SsimConfig::single_scale()).unwrap() - 1.0).abs() < 1e-12);
    }
}
