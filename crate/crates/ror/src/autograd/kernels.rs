//! Raw numeric loops behind the graph ops: matmul variants, convolution,
//! deformable sampling, bilinear resize. Forward and backward live side by
//! side so the index arithmetic stays in one place.
//!
//! Everything here iterates in a fixed order — results are bitwise
//! reproducible run to run on the same target.

/// `out(m,n) = a(m,k) * b(k,n)`, accumulating into `out`.
pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out(m,n) = a(k,m)^T * b(k,n)`, accumulating into `out`.
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out(m,n) = a(m,k) * b(n,k)^T`, accumulating into `out`.
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// Output spatial extent of a conv along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    assert!(
        input + 2 * pad >= span,
        "conv kernel span {span} exceeds padded input {}",
        input + 2 * pad
    );
    (input + 2 * pad - span) / stride + 1
}

/// Valid output range `[lo, hi)` along one axis for a fixed kernel tap, i.e.
/// the `o` with `0 <= o*stride + tap_offset < input`.
fn tap_range(input: usize, stride: usize, tap_offset: isize, out_len: usize) -> (usize, usize) {
    // o*stride + tap_offset >= 0  =>  o >= ceil(-tap_offset / stride)
    let lo = if tap_offset >= 0 {
        0
    } else {
        (((-tap_offset) as usize) + stride - 1) / stride
    };
    // o*stride + tap_offset <= input-1
    let hi_incl = (input as isize - 1 - tap_offset) / stride as isize;
    if hi_incl < lo as isize {
        return (0, 0);
    }
    (lo, ((hi_incl as usize) + 1).min(out_len))
}

#[allow(clippy::too_many_arguments)]
pub struct ConvDims {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out_len(self.h, self.kh, self.stride, self.pad, self.dilation),
            conv_out_len(self.w, self.kw, self.stride, self.pad, self.dilation),
        )
    }
}

/// Zero-padded 2-D cross-correlation: x `(ci,h,w)`, weights `(co,ci,kh,kw)`.
pub fn conv2d_forward(x: &[f64], wt: &[f64], d: &ConvDims) -> Vec<f64> {
    let (ho, wo) = d.out_hw();
    let mut out = vec![0.0; d.co * ho * wo];
    for o in 0..d.co {
        for c in 0..d.ci {
            let wbase = (o * d.ci + c) * d.kh * d.kw;
            for ky in 0..d.kh {
                let oy_off = ky as isize * d.dilation as isize - d.pad as isize;
                let (oy_lo, oy_hi) = tap_range(d.h, d.stride, oy_off, ho);
                for kx in 0..d.kw {
                    let wv = wt[wbase + ky * d.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox_off = kx as isize * d.dilation as isize - d.pad as isize;
                    let (ox_lo, ox_hi) = tap_range(d.w, d.stride, ox_off, wo);
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * d.stride) as isize + oy_off;
                        let xrow = &x[(c * d.h + iy as usize) * d.w..];
                        let orow = &mut out[(o * ho + oy) * wo..(o * ho + oy) * wo + wo];
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * d.stride) as isize + ox_off) as usize;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weights.
pub fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    d: &ConvDims,
    want_gx: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = d.out_hw();
    let mut gx = vec![0.0; if want_gx { d.ci * d.h * d.w } else { 0 }];
    let mut gw = vec![0.0; wt.len()];
    for o in 0..d.co {
        for c in 0..d.ci {
            let wbase = (o * d.ci + c) * d.kh * d.kw;
            for ky in 0..d.kh {
                let oy_off = ky as isize * d.dilation as isize - d.pad as isize;
                let (oy_lo, oy_hi) = tap_range(d.h, d.stride, oy_off, ho);
                for kx in 0..d.kw {
                    let wv = wt[wbase + ky * d.kw + kx];
                    let ox_off = kx as isize * d.dilation as isize - d.pad as isize;
                    let (ox_lo, ox_hi) = tap_range(d.w, d.stride, ox_off, wo);
                    let mut wacc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * d.stride) as isize + oy_off) as usize;
                        let xbase = (c * d.h + iy) * d.w;
                        let gbase = (o * ho + oy) * wo;
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * d.stride) as isize + ox_off) as usize;
                            let gv = g[gbase + ox];
                            wacc += gv * x[xbase + ix];
                            if want_gx {
                                gx[xbase + ix] += wv * gv;
                            }
                        }
                    }
                    gw[wbase + ky * d.kw + kx] += wacc;
                }
            }
        }
    }
    (gx, gw)
}

/// One axis of a half-pixel bilinear resize: for each output index, the two
/// source indices and the fractional weight of the second one. Sources are
/// clamped to the border.
pub fn resize_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `(c,h,w)` data to `(c,oh,ow)`.
pub fn bilinear_resize(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &plane[y0 * w..y0 * w + w];
            let r1 = &plane[y1 * w..y1 * w + w];
            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                orow[ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Scatter-adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let xplane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let grow = &gplane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = grow[ox];
                xplane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                xplane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                xplane[y1 * w + x0] += gv * fy * (1.0 - fx);
                xplane[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    gx
}

/// Mean-pool each `f x f` block of `(c,h,w)` data. `h` and `w` must be
/// divisible by `f`.
pub fn area_downsample(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    assert!(f > 0 && h % f == 0 && w % f == 0, "area_downsample: {h}x{w} not divisible by {f}");
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..f {
                    let base = (ch * h + oy * f + dy) * w + ox * f;
                    for dx in 0..f {
                        acc += x[base + dx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

/// Per-pixel, per-tap bilinear sampling state for the deformable conv.
struct TapSample {
    /// Corner flat indices into one channel plane (usize::MAX = out of bounds).
    corner: [usize; 4],
    /// Corner weights (w00, w01, w10, w11).
    weight: [f64; 4],
    /// Interpolation fractions, kept for the offset gradient.
    fy: f64,
    fx: f64,
}

fn tap_sample(py: f64, px: f64, h: usize, w: usize) -> TapSample {
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = py - y0;
    let fx = px - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut corner = [usize::MAX; 4];
    for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
        let (cy, cx) = (y0 + dy, x0 + dx);
        if cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize {
            corner[i] = cy as usize * w + cx as usize;
        }
    }
    TapSample {
        corner,
        weight: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
        fy,
        fx,
    }
}

fn sample_channel(plane: &[f64], t: &TapSample) -> f64 {
    let mut v = 0.0;
    for i in 0..4 {
        if t.corner[i] != usize::MAX {
            v += t.weight[i] * plane[t.corner[i]];
        }
    }
    v
}

/// 3x3 deformable convolution, stride 1, zero padding 1. Offsets are
/// `(18,h,w)`: channels `2t` / `2t+1` hold the y/x displacement of kernel tap
/// `t = ty*3+tx`. Sampling is bilinear with zero padding outside the input.
pub fn deform_conv3x3_forward(
    x: &[f64],
    wt: &[f64],
    off: &[f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; co * hw];
    let mut samples = vec![0.0; ci * 9];
    for y in 0..h {
        for xp in 0..w {
            let pix = y * w + xp;
            let taps: [TapSample; 9] = std::array::from_fn(|t| {
                let py = y as f64 - 1.0 + (t / 3) as f64 + off[2 * t * hw + pix];
                let px = xp as f64 - 1.0 + (t % 3) as f64 + off[(2 * t + 1) * hw + pix];
                tap_sample(py, px, h, w)
            });
            for c in 0..ci {
                let plane = &x[c * hw..(c + 1) * hw];
                for (t, tap) in taps.iter().enumerate() {
                    samples[c * 9 + t] = sample_channel(plane, tap);
                }
            }
            for o in 0..co {
                let wrow = &wt[o * ci * 9..(o + 1) * ci * 9];
                let mut acc = 0.0;
                for (wv, sv) in wrow.iter().zip(samples.iter()) {
                    acc += wv * sv;
                }
                out[o * hw + pix] = acc;
            }
        }
    }
    out
}

/// Gradients of [`deform_conv3x3_forward`] w.r.t. input, weights and offsets.
pub fn deform_conv3x3_backward(
    x: &[f64],
    wt: &[f64],
    off: &[f64],
    g: &[f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut gx = vec![0.0; ci * hw];
    let mut gw = vec![0.0; wt.len()];
    let mut goff = vec![0.0; off.len()];
    let mut samples = vec![0.0; ci * 9];
    // a[c*9+t] = sum_o g[o] * w[o,c,t]: upstream gradient folded over outputs
    let mut a = vec![0.0; ci * 9];
    for y in 0..h {
        for xp in 0..w {
            let pix = y * w + xp;
            let taps: [TapSample; 9] = std::array::from_fn(|t| {
                let py = y as f64 - 1.0 + (t / 3) as f64 + off[2 * t * hw + pix];
                let px = xp as f64 - 1.0 + (t % 3) as f64 + off[(2 * t + 1) * hw + pix];
                tap_sample(py, px, h, w)
            });
            for c in 0..ci {
                let plane = &x[c * hw..(c + 1) * hw];
                for (t, tap) in taps.iter().enumerate() {
                    samples[c * 9 + t] = sample_channel(plane, tap);
                }
            }
            a.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..co {
                let gv = g[o * hw + pix];
                if gv == 0.0 {
                    continue;
                }
                let wrow = &wt[o * ci * 9..(o + 1) * ci * 9];
                let grow = &mut gw[o * ci * 9..(o + 1) * ci * 9];
                for i in 0..ci * 9 {
                    a[i] += gv * wrow[i];
                    grow[i] += gv * samples[i];
                }
            }
            for c in 0..ci {
                let plane = &x[c * hw..(c + 1) * hw];
                let gplane_base = c * hw;
                for (t, tap) in taps.iter().enumerate() {
                    let av = a[c * 9 + t];
                    if av == 0.0 {
                        continue;
                    }
                    let mut cv = [0.0; 4];
                    for i in 0..4 {
                        if tap.corner[i] != usize::MAX {
                            gx[gplane_base + tap.corner[i]] += av * tap.weight[i];
                            cv[i] = plane[tap.corner[i]];
                        }
                    }
                    // d(sample)/d(py) and /d(px) from the corner values
                    let dpy = (cv[2] - cv[0]) * (1.0 - tap.fx) + (cv[3] - cv[1]) * tap.fx;
                    let dpx = (cv[1] - cv[0]) * (1.0 - tap.fy) + (cv[3] - cv[2]) * tap.fy;
                    goff[2 * t * hw + pix] += av * dpy;
                    goff[(2 * t + 1) * hw + pix] += av * dpx;
                }
            }
        }
    }
    (gx, gw, goff)
}
