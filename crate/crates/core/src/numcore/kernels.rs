//! Forward and backward kernels for the spatial primitives.
//!
//! Layout is NCHW throughout. Every reduction walks its operands in a fixed
//! order so results are bit-reproducible; the only deviation from strictly
//! sequential accumulation is `dot`, which keeps four interleaved partial sums
//! combined in a fixed pattern.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c, h, w] => Some(Dims4 { n, c, h, w }),
            _ => None,
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    for j in chunks * 4..a.len() {
        acc[0] += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
#[inline]
fn valid_range(extent: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 {
        extent.saturating_sub(d as usize)
    } else {
        extent
    };
    (lo, hi.max(lo))
}

/// Stride-1 "same" convolution with an odd square kernel.
pub fn conv2d_forward(
    x: &[f64],
    xd: Dims4,
    weight: &[f64],
    out_channels: usize,
    k: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let Dims4 { n, c: ci, h, w } = xd;
    let hw = xd.plane();
    let p = (k / 2) as isize;
    let mut out = vec![0.0; n * out_channels * hw];
    for b in 0..n {
        for o in 0..out_channels {
            let out_plane = &mut out[(b * out_channels + o) * hw..][..hw];
            if let Some(bias) = bias {
                out_plane.fill(bias[o]);
            }
            for c in 0..ci {
                let in_plane = &x[(b * ci + c) * hw..][..hw];
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = valid_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = weight[((o * ci + c) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let orow = &mut out_plane[y * w + x0..y * w + x1];
                            let irow = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            axpy(orow, wv, irow);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_input(
    grad_out: &[f64],
    xd: Dims4,
    weight: &[f64],
    out_channels: usize,
    k: usize,
) -> Vec<f64> {
    let Dims4 { n, c: ci, h, w } = xd;
    let hw = xd.plane();
    let p = (k / 2) as isize;
    let mut gx = vec![0.0; xd.len()];
    for b in 0..n {
        for c in 0..ci {
            let gx_plane = &mut gx[(b * ci + c) * hw..][..hw];
            for o in 0..out_channels {
                let g_plane = &grad_out[(b * out_channels + o) * hw..][..hw];
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - p;
                        let (x0, x1) = valid_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = weight[((o * ci + c) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let grow = &g_plane[y * w + x0..y * w + x1];
                            let xrow = &mut gx_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            axpy(xrow, wv, grow);
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d_backward_weight(
    grad_out: &[f64],
    x: &[f64],
    xd: Dims4,
    out_channels: usize,
    k: usize,
) -> Vec<f64> {
    let Dims4 { n, c: ci, h, w } = xd;
    let hw = xd.plane();
    let p = (k / 2) as isize;
    let mut gw = vec![0.0; out_channels * ci * k * k];
    for o in 0..out_channels {
        for c in 0..ci {
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for b in 0..n {
                        let g_plane = &grad_out[(b * out_channels + o) * hw..][..hw];
                        let in_plane = &x[(b * ci + c) * hw..][..hw];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            acc += dot(
                                &g_plane[y * w + x0..y * w + x1],
                                &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)],
                            );
                        }
                    }
                    gw[((o * ci + c) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    gw
}

pub fn conv2d_backward_bias(grad_out: &[f64], od: Dims4) -> Vec<f64> {
    let hw = od.plane();
    let mut gb = vec![0.0; od.c];
    for b in 0..od.n {
        for (o, g) in gb.iter_mut().enumerate() {
            *g += grad_out[(b * od.c + o) * hw..][..hw]
                .iter()
                .fold(0.0, |a, &v| a + v);
        }
    }
    gb
}

/// Per-channel mean over (batch, height, width).
pub fn channel_mean(x: &[f64], d: Dims4) -> Vec<f64> {
    let hw = d.plane();
    let m = (d.n * hw) as f64;
    (0..d.c)
        .map(|c| {
            let mut s = 0.0;
            for b in 0..d.n {
                s = x[(b * d.c + c) * hw..][..hw]
                    .iter()
                    .fold(s, |a, &v| a + v);
            }
            s / m
        })
        .collect()
}

/// Per-channel biased variance over (batch, height, width).
pub fn channel_var(x: &[f64], d: Dims4, mean: &[f64]) -> Vec<f64> {
    let hw = d.plane();
    let m = (d.n * hw) as f64;
    (0..d.c)
        .map(|c| {
            let mu = mean[c];
            let mut s = 0.0;
            for b in 0..d.n {
                s = x[(b * d.c + c) * hw..][..hw]
                    .iter()
                    .fold(s, |a, &v| a + (v - mu) * (v - mu));
            }
            s / m
        })
        .collect()
}

pub fn batchnorm_forward(
    x: &[f64],
    d: Dims4,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let hw = d.plane();
    let mut out = vec![0.0; x.len()];
    for b in 0..d.n {
        for c in 0..d.c {
            let inv = 1.0 / (var[c] + eps).sqrt();
            let (mu, g, be) = (mean[c], gamma[c], beta[c]);
            let off = (b * d.c + c) * hw;
            for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *o = g * ((v - mu) * inv) + be;
            }
        }
    }
    out
}

pub struct BatchNormGrads {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    g: &[f64],
    x: &[f64],
    d: Dims4,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
) -> BatchNormGrads {
    let hw = d.plane();
    let mut gx = vec![0.0; x.len()];
    let mut gmean = vec![0.0; d.c];
    let mut gvar = vec![0.0; d.c];
    let mut ggamma = vec![0.0; d.c];
    let mut gbeta = vec![0.0; d.c];
    for c in 0..d.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let scale = gamma[c] * inv;
        let mu = mean[c];
        let (mut sg, mut sgc) = (0.0, 0.0);
        for b in 0..d.n {
            let off = (b * d.c + c) * hw;
            for i in off..off + hw {
                let gi = g[i];
                let xc = x[i] - mu;
                gx[i] = gi * scale;
                sg += gi;
                sgc += gi * xc;
            }
        }
        gbeta[c] = sg;
        ggamma[c] = sgc * inv;
        gmean[c] = -sg * scale;
        gvar[c] = -0.5 * gamma[c] * sgc * inv * inv * inv;
    }
    BatchNormGrads {
        x: gx,
        mean: gmean,
        var: gvar,
        gamma: ggamma,
        beta: gbeta,
    }
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels(x: &[f64], d: Dims4) -> Vec<f64> {
    let hw = d.plane();
    let mut out = vec![0.0; x.len()];
    let mut mx = vec![0.0; hw];
    let mut sum = vec![0.0; hw];
    for b in 0..d.n {
        let base = b * d.c * hw;
        mx.copy_from_slice(&x[base..base + hw]);
        for c in 1..d.c {
            for (m, &v) in mx.iter_mut().zip(&x[base + c * hw..base + (c + 1) * hw]) {
                if v > *m {
                    *m = v;
                }
            }
        }
        sum.fill(0.0);
        for c in 0..d.c {
            let off = base + c * hw;
            for i in 0..hw {
                let e = (x[off + i] - mx[i]).exp();
                out[off + i] = e;
                sum[i] += e;
            }
        }
        for c in 0..d.c {
            let off = base + c * hw;
            for i in 0..hw {
                out[off + i] /= sum[i];
            }
        }
    }
    out
}

pub fn softmax_channels_backward(g: &[f64], probs: &[f64], d: Dims4) -> Vec<f64> {
    let hw = d.plane();
    let mut gx = vec![0.0; g.len()];
    let mut inner = vec![0.0; hw];
    for b in 0..d.n {
        let base = b * d.c * hw;
        inner.fill(0.0);
        for c in 0..d.c {
            let off = base + c * hw;
            for i in 0..hw {
                inner[i] += g[off + i] * probs[off + i];
            }
        }
        for c in 0..d.c {
            let off = base + c * hw;
            for i in 0..hw {
                gx[off + i] = probs[off + i] * (g[off + i] - inner[i]);
            }
        }
    }
    gx
}

/// Normalized log-sum-exp over one spatial plane, stabilized by the plane max.
pub fn lse_plane(plane: &[f64], r: f64) -> f64 {
    let m = plane.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let acc = plane.iter().fold(0.0, |a, &v| a + (r * (v - m)).exp());
    m + (acc / plane.len() as f64).ln() / r
}

/// Softmax weights `exp(r s) / sum exp(r s)` for one plane.
pub fn lse_plane_weights(plane: &[f64], r: f64) -> Vec<f64> {
    let m = plane.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let e: Vec<f64> = plane.iter().map(|&v| (r * (v - m)).exp()).collect();
    let acc = e.iter().fold(0.0, |a, &v| a + v);
    e.into_iter().map(|v| v / acc).collect()
}

pub fn spatial_lse(x: &[f64], d: Dims4, r: &[f64]) -> Vec<f64> {
    let hw = d.plane();
    (0..d.n * d.c)
        .map(|i| lse_plane(&x[i * hw..(i + 1) * hw], r[i]))
        .collect()
}

pub fn spatial_lse_backward(g: &[f64], x: &[f64], d: Dims4, r: &[f64]) -> Vec<f64> {
    let hw = d.plane();
    let mut gx = vec![0.0; x.len()];
    for i in 0..d.n * d.c {
        let wts = lse_plane_weights(&x[i * hw..(i + 1) * hw], r[i]);
        for (gv, wv) in gx[i * hw..(i + 1) * hw].iter_mut().zip(wts) {
            *gv = g[i] * wv;
        }
    }
    gx
}

pub fn spatial_mean(x: &[f64], d: Dims4) -> Vec<f64> {
    let hw = d.plane();
    (0..d.n * d.c)
        .map(|i| x[i * hw..(i + 1) * hw].iter().fold(0.0, |a, &v| a + v) / hw as f64)
        .collect()
}

/// Index of the first maximal entry in each plane.
pub fn spatial_argmax(x: &[f64], d: Dims4) -> Vec<usize> {
    let hw = d.plane();
    (0..d.n * d.c)
        .map(|i| {
            let plane = &x[i * hw..(i + 1) * hw];
            let mut best = 0;
            for (j, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Folds channels `old..C` into channel 0; channels `1..old` pass through.
pub fn rearrange(x: &[f64], d: Dims4, old: usize) -> Vec<f64> {
    let hw = d.plane();
    let mut out = vec![0.0; d.n * old * hw];
    for b in 0..d.n {
        let src = &x[b * d.c * hw..(b + 1) * d.c * hw];
        let dst = &mut out[b * old * hw..(b + 1) * old * hw];
        dst.copy_from_slice(&src[..old * hw]);
        for c in old..d.c {
            for (o, &v) in dst[..hw].iter_mut().zip(&src[c * hw..(c + 1) * hw]) {
                *o += v;
            }
        }
    }
    out
}

pub fn rearrange_backward(g: &[f64], d: Dims4, old: usize) -> Vec<f64> {
    let hw = d.plane();
    let mut gx = vec![0.0; d.len()];
    for b in 0..d.n {
        let src = &g[b * old * hw..(b + 1) * old * hw];
        let dst = &mut gx[b * d.c * hw..(b + 1) * d.c * hw];
        dst[..old * hw].copy_from_slice(src);
        for c in old..d.c {
            dst[c * hw..(c + 1) * hw].copy_from_slice(&src[..hw]);
        }
    }
    gx
}

/// Anisotropic squared-difference total variation, averaged over images and
/// normalized by the pixel count of one image.
pub fn total_variation(x: &[f64], d: Dims4) -> f64 {
    let (h, w) = (d.h, d.w);
    let hw = d.plane();
    let mut s = 0.0;
    for plane in x.chunks_exact(hw) {
        for y in 0..h {
            for xx in 0..w {
                let v = plane[y * w + xx];
                if xx + 1 < w {
                    let dd = plane[y * w + xx + 1] - v;
                    s += dd * dd;
                }
                if y + 1 < h {
                    let dd = plane[(y + 1) * w + xx] - v;
                    s += dd * dd;
                }
            }
        }
    }
    s / (d.n * hw) as f64
}

pub fn total_variation_backward(g: f64, x: &[f64], d: Dims4) -> Vec<f64> {
    let (h, w) = (d.h, d.w);
    let hw = d.plane();
    let scale = 2.0 * g / (d.n * hw) as f64;
    let mut gx = vec![0.0; x.len()];
    for (plane, gp) in x.chunks_exact(hw).zip(gx.chunks_exact_mut(hw)) {
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if xx + 1 < w {
                    let dd = scale * (plane[i + 1] - plane[i]);
                    gp[i + 1] += dd;
                    gp[i] -= dd;
                }
                if y + 1 < h {
                    let dd = scale * (plane[i + w] - plane[i]);
                    gp[i + w] += dd;
                    gp[i] -= dd;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], xd: Dims4, wt: &[f64], co: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; xd.n * co * xd.plane()];
        for b in 0..xd.n {
            for o in 0..co {
                for y in 0..xd.h {
                    for xx in 0..xd.w {
                        let mut s = 0.0;
                        for c in 0..xd.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - p;
                                    let ix = xx as isize + kx as isize - p;
                                    if iy < 0 || ix < 0 || iy >= xd.h as isize || ix >= xd.w as isize
                                    {
                                        continue;
                                    }
                                    s += wt[((o * xd.c + c) * k + ky) * k + kx]
                                        * x[((b * xd.c + c) * xd.h + iy as usize) * xd.w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((b * co + o) * xd.h + y) * xd.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let xd = Dims4 { n: 2, c: 3, h: 5, w: 4 };
        let x: Vec<f64> = (0..xd.len()).map(|i| ((i * 37 % 11) as f64) * 0.1 - 0.5).collect();
        let wt: Vec<f64> = (0..2 * 3 * 9).map(|i| ((i * 13 % 7) as f64) * 0.2 - 0.6).collect();
        let got = conv2d_forward(&x, xd, &wt, 2, 3, None);
        let want = naive_conv(&x, xd, &wt, 2, 3);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_plane_conv() {
        let xd = Dims4 { n: 1, c: 1, h: 1, w: 1 };
        let wt: Vec<f64> = (0..9).map(|i| i as f64).collect();
        // only the centre tap touches the lone pixel
        assert_eq!(conv2d_forward(&[2.0], xd, &wt, 1, 3, Some(&[1.0])), vec![9.0]);
    }

    #[test]
    fn tv_two_pixel_example() {
        let d = Dims4 { n: 1, c: 1, h: 1, w: 2 };
        assert_eq!(total_variation(&[0.0, 1.0], d), 0.5);
    }

    #[test]
    fn rearrange_folds_new_into_background() {
        let d = Dims4 { n: 1, c: 3, h: 1, w: 1 };
        let out = rearrange(&[0.2, 0.3, 0.5], d, 2);
        assert!((out[0] - 0.7).abs() < 1e-15);
        assert_eq!(out[1], 0.3);
    }
}
