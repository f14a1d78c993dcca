//! Value-level kernels shared by the recording graph and the graph-free evaluator.

use super::{Tensor, TensorError};

/// Zero padding policy for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` on every side; odd kernels only.
    Same,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Same,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0 && self.stride == 1
    }
}

pub(crate) fn conv_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<ConvGeom, TensorError> {
    let (b, c_in, h, w) = input.dims4()?;
    let (c_out, wc, kh, kw) = weight.dims4()?;
    if wc != c_in {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d: input has {c_in} channels, weight expects {wc}"
        )));
    }
    if let Some(bias) = bias {
        if bias.numel() != c_out {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: bias has {} values for {c_out} output channels",
                bias.numel()
            )));
        }
    }
    if spec.stride == 0 {
        return Err(TensorError::ShapeMismatch("conv2d: stride 0".into()));
    }
    let pad = match spec.padding {
        Padding::Same => {
            if kh != kw || kh % 2 == 0 {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv2d: same padding needs a square odd kernel, got {kh}×{kw}"
                )));
            }
            (kh - 1) / 2
        }
        Padding::Explicit(p) => p,
    };
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d: kernel {kh}×{kw} larger than padded input {h}×{w}"
        )));
    }
    let ho = (h + 2 * pad - kh) / spec.stride + 1;
    let wo = (w + 2 * pad - kw) / spec.stride + 1;
    Ok(ConvGeom {
        b,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        pad,
        stride: spec.stride,
        ho,
        wo,
    })
}

/// Row and column strides of a matrix operand.
#[derive(Clone, Copy)]
struct Layout {
    rs: isize,
    cs: isize,
}

impl Layout {
    fn rows(ld: usize) -> Self {
        Self {
            rs: ld as isize,
            cs: 1,
        }
    }

    fn cols(ld: usize) -> Self {
        Self {
            rs: 1,
            cs: ld as isize,
        }
    }

    fn extent(&self, r: usize, c: usize) -> usize {
        (r - 1) * self.rs as usize + (c - 1) * self.cs as usize + 1
    }
}

/// `c = a·b + beta·c` with `a` m×k, `b` k×n, `c` m×n under the given layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    lc: Layout,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * lc.rs as usize + j * lc.cs as usize];
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= la.extent(m, k) && b.len() >= lb.extent(k, n) && c.len() >= lc.extent(m, n));
    // SAFETY: the assert above bounds every index touched for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

/// Output pixels per im2col tile; keeps the column buffer cache-resident.
const TILE_PIXELS: usize = 256;

/// Input column range `[lo, hi)` touched by kernel offset `kx` at stride 1,
/// as output range `[ox_lo, ox_hi)`.
fn valid_span(out_len: usize, in_len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(out_len);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

/// Columns for output rows `[oy0, oy1)`.
fn im2col(g: &ConvGeom, x: &[f64], oy0: usize, oy1: usize, cols: &mut [f64]) {
    let n = (oy1 - oy0) * g.wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g.wo, g.w, kx, g.pad);
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        out_row[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

fn col2im(g: &ConvGeom, cols: &[f64], oy0: usize, oy1: usize, dx: &mut [f64]) {
    let n = (oy1 - oy0) * g.wo;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g.wo, g.w, kx, g.pad);
                        dst[lo + kx - g.pad..hi + kx - g.pad]
                            .iter_mut()
                            .zip(&src_row[lo..hi])
                            .for_each(|(d, s)| *d += s);
                        continue;
                    }
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn row_tiles(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let per = (TILE_PIXELS / g.wo.max(1)).max(1);
    let ho = g.ho;
    (0..ho).step_by(per).map(move |y0| (y0, (y0 + per).min(ho)))
}

/// 2-D cross-correlation, `input` B×C×H×W, `weight` O×C×kh×kw.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor, TensorError> {
    let g = conv_geom(input, weight, bias, spec)?;
    let in_len = g.c_in * g.h * g.w;
    let hw = g.ho * g.wo;
    let out_len = g.c_out * hw;
    let rows = g.cols_rows();
    let mut out = vec![0.0; g.b * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * TILE_PIXELS.max(g.wo)]
    };
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    for bi in 0..g.b {
        let x = &input.data()[bi * in_len..(bi + 1) * in_len];
        let y = &mut out[bi * out_len..(bi + 1) * out_len];
        if let Some(bias) = bias {
            for (o, chunk) in y.chunks_mut(hw).enumerate() {
                chunk.fill(bias.data()[o]);
            }
        }
        if g.is_pointwise() {
            gemm(
                g.c_out,
                g.c_in,
                hw,
                weight.data(),
                Layout::rows(g.c_in),
                x,
                Layout::rows(hw),
                y,
                Layout::rows(hw),
                beta,
            );
            continue;
        }
        for (y0, y1) in row_tiles(&g) {
            let n = (y1 - y0) * g.wo;
            im2col(&g, x, y0, y1, &mut cols);
            gemm(
                g.c_out,
                rows,
                n,
                weight.data(),
                Layout::rows(rows),
                &cols,
                Layout::rows(n),
                &mut y[y0 * g.wo..],
                Layout::rows(hw),
                beta,
            );
        }
    }
    Tensor::new(&[g.b, g.c_out, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let in_len = g.c_in * g.h * g.w;
    let hw = g.ho * g.wo;
    let out_len = g.c_out * hw;
    let rows = g.cols_rows();
    let mut dx = need[0].then(|| vec![0.0; g.b * in_len]);
    let mut dw = need[1].then(|| vec![0.0; weight.numel()]);
    let mut db = need[2].then(|| vec![0.0; g.c_out]);
    let tile = if g.is_pointwise() {
        0
    } else {
        rows * TILE_PIXELS.max(g.wo)
    };
    let mut cols = vec![0.0; tile];
    let mut dcols = vec![0.0; if dx.is_some() { tile } else { 0 }];
    for bi in 0..g.b {
        let x = &input.data()[bi * in_len..(bi + 1) * in_len];
        let dy = &grad_out[bi * out_len..(bi + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dy.chunks(hw).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if g.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                gemm(
                    g.c_out,
                    hw,
                    rows,
                    dy,
                    Layout::rows(hw),
                    x,
                    Layout::cols(hw),
                    dw,
                    Layout::rows(rows),
                    1.0,
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    rows,
                    g.c_out,
                    hw,
                    weight.data(),
                    Layout::cols(rows),
                    dy,
                    Layout::rows(hw),
                    &mut dx[bi * in_len..(bi + 1) * in_len],
                    Layout::rows(hw),
                    1.0,
                );
            }
            continue;
        }
        for (y0, y1) in row_tiles(g) {
            let n = (y1 - y0) * g.wo;
            let dy_tile = &dy[y0 * g.wo..];
            if let Some(dw) = dw.as_mut() {
                im2col(g, x, y0, y1, &mut cols);
                gemm(
                    g.c_out,
                    n,
                    rows,
                    dy_tile,
                    Layout::rows(hw),
                    &cols,
                    Layout::cols(n),
                    dw,
                    Layout::rows(rows),
                    1.0,
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    rows,
                    g.c_out,
                    n,
                    weight.data(),
                    Layout::cols(rows),
                    dy_tile,
                    Layout::rows(hw),
                    &mut dcols,
                    Layout::rows(n),
                    0.0,
                );
                col2im(g, &dcols, y0, y1, &mut dx[bi * in_len..(bi + 1) * in_len]);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Non-overlapping max pooling with a `k×k` window; returns values and the
/// flat input index chosen for every output cell.
pub fn maxpool2d(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>), TensorError> {
    let (b, c, h, w) = input.dims4()?;
    if k == 0 || h < k || w < k {
        return Err(TensorError::ShapeMismatch(format!(
            "maxpool2d: window {k} on {h}×{w}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, ho, wo], out)?, arg))
}

/// One bilinear tap: output index reads `(1 - frac) * in[lo] + frac * in[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre (`align_corners = false`) sampling taps for a 1-D resize.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = if lo + 1 < in_len { lo + 1 } else { lo };
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Nearest-neighbour source index for a 1-D resize under half-pixel centres.
pub fn nearest_index(in_len: usize, out_len: usize, o: usize) -> usize {
    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}

pub fn upsample_bilinear2d(
    input: &Tensor,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::ShapeMismatch("upsample: empty output".into()));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in 0..b * c {
        let p = &x[plane * h * w..(plane + 1) * h * w];
        for yt in &ty {
            for xt in &tx {
                let top = p[yt.lo * w + xt.lo] * (1.0 - xt.frac) + p[yt.lo * w + xt.hi] * xt.frac;
                let bot = p[yt.hi * w + xt.lo] * (1.0 - xt.frac) + p[yt.hi * w + xt.hi] * xt.frac;
                out.push(top * (1.0 - yt.frac) + bot * yt.frac);
            }
        }
    }
    Tensor::new(&[b, c, out_h, out_w], out)
}

pub(crate) fn upsample_bilinear2d_backward(
    in_shape: &[usize],
    out_h: usize,
    out_w: usize,
    grad_out: &[f64],
) -> Vec<f64> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        let gy = &grad_out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, yt) in ty.iter().enumerate() {
            for (ox, xt) in tx.iter().enumerate() {
                let g = gy[oy * out_w + ox];
                let top = g * (1.0 - yt.frac);
                let bot = g * yt.frac;
                d[yt.lo * w + xt.lo] += top * (1.0 - xt.frac);
                d[yt.lo * w + xt.hi] += top * xt.frac;
                d[yt.hi * w + xt.lo] += bot * (1.0 - xt.frac);
                d[yt.hi * w + xt.hi] += bot * xt.frac;
            }
        }
    }
    dx
}

pub fn softmax_channel(input: &Tensor) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(x[base + k * hw + p]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (x[base + k * hw + p] - m).exp();
                out[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * hw + p] /= z;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn concat_channel(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch("concat of nothing".into()))?;
    let (b, _, h, w) = first.dims4()?;
    let mut c_total = 0;
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(TensorError::ShapeMismatch(format!(
                "concat: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        c_total += pc;
    }
    let mut out = Vec::with_capacity(b * c_total * h * w);
    for bi in 0..b {
        for p in parts {
            let len = p.shape()[1] * h * w;
            out.extend_from_slice(&p.data()[bi * len..(bi + 1) * len]);
        }
    }
    Tensor::new(&[b, c_total, h, w], out)
}

/// Multiplies every `H×W` plane of `x` by its per-(batch, channel) scale.
pub fn mul_channelwise(scale: &Tensor, x: &Tensor) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = x.dims4()?;
    let (sb, sc) = scale.dims2()?;
    if (sb, sc) != (b, c) {
        return Err(TensorError::ShapeMismatch(format!(
            "mul_channelwise: scale {:?} for input {:?}",
            scale.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (plane, chunk) in out.chunks_mut(hw).enumerate() {
        let s = scale.data()[plane];
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::new(x.shape(), out)
}

pub fn global_avg_pool_spatial(x: &Tensor) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = x.dims4()?;
    let hw = (h * w) as f64;
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() / hw)
        .collect();
    Tensor::new(&[b, c, 1, 1], out)
}

pub fn channel_mean_pool(x: &Tensor) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; b * hw];
    for bi in 0..b {
        let o = &mut out[bi * hw..(bi + 1) * hw];
        for k in 0..c {
            let plane = &x.data()[(bi * c + k) * hw..(bi * c + k + 1) * hw];
            o.iter_mut().zip(plane).for_each(|(a, v)| *a += v);
        }
        o.iter_mut().for_each(|v| *v /= c as f64);
    }
    Tensor::new(&[b, 1, h, w], out)
}

/// `x` B×in, `weight` out×in; output B×out.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, TensorError> {
    let (b, n_in) = x.dims2()?;
    let (n_out, w_in) = weight.dims2()?;
    if w_in != n_in {
        return Err(TensorError::ShapeMismatch(format!(
            "linear: input width {n_in}, weight expects {w_in}"
        )));
    }
    let mut out = vec![0.0; b * n_out];
    if let Some(bias) = bias {
        if bias.numel() != n_out {
            return Err(TensorError::ShapeMismatch("linear: bias width".into()));
        }
        for row in out.chunks_mut(n_out) {
            row.copy_from_slice(bias.data());
        }
    }
    gemm(
        b,
        n_in,
        n_out,
        x.data(),
        Layout::rows(n_in),
        weight.data(),
        Layout::cols(n_in),
        &mut out,
        Layout::rows(n_out),
        1.0,
    );
    Tensor::new(&[b, n_out], out)
}

pub fn mse_mean(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    a.same_shape(b)?;
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

pub fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_fn(x.shape(), |i| f(x.data()[i]))
}

pub fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
    a.same_shape(b)?;
    Ok(Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i])))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Hard class target and optional inclusion mask for [`dice_ce`], both of
/// length `B·H·W` in batch-major, row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTarget {
    pub classes: Vec<usize>,
    pub mask: Option<Vec<bool>>,
}

/// Weights and smoothing of the combined Dice + cross-entropy objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceCeSpec {
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub smooth: f64,
}

impl Default for DiceCeSpec {
    fn default() -> Self {
        Self {
            dice_weight: 0.5,
            ce_weight: 0.5,
            smooth: 1e-5,
        }
    }
}

pub(crate) fn check_target(logits: &Tensor, target: &ClassTarget) -> Result<(), TensorError> {
    let (b, k, h, w) = logits.dims4()?;
    let n = b * h * w;
    if target.classes.len() != n || target.mask.as_ref().is_some_and(|m| m.len() != n) {
        return Err(TensorError::ShapeMismatch(format!(
            "dice_ce: target of {} pixels for logits {:?}",
            target.classes.len(),
            logits.shape()
        )));
    }
    if let Some(&c) = target.classes.iter().find(|&&c| c >= k) {
        return Err(TensorError::ClassOutOfRange {
            class: c,
            classes: k,
        });
    }
    Ok(())
}

struct DiceCeParts {
    probs: Tensor,
    intersect: Vec<f64>,
    denom: Vec<f64>,
    count: f64,
    value: f64,
}

fn dice_ce_parts(
    logits: &Tensor,
    target: &ClassTarget,
    spec: DiceCeSpec,
) -> Result<DiceCeParts, TensorError> {
    check_target(logits, target)?;
    let (b, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let probs = softmax_channel(logits)?;
    let p = probs.data();
    let x = logits.data();
    let mut intersect = vec![0.0; k];
    let mut denom = vec![0.0; k];
    let mut ce = 0.0;
    let mut count = 0.0;
    for bi in 0..b {
        for q in 0..hw {
            let n = bi * hw + q;
            if target.mask.as_ref().is_some_and(|m| !m[n]) {
                continue;
            }
            count += 1.0;
            let t = target.classes[n];
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(x[(bi * k + c) * hw + q]);
            }
            let mut z = 0.0;
            for c in 0..k {
                z += (x[(bi * k + c) * hw + q] - m).exp();
                let pc = p[(bi * k + c) * hw + q];
                denom[c] += pc;
                if c == t {
                    intersect[c] += pc;
                    denom[c] += 1.0;
                }
            }
            ce += m + z.ln() - x[(bi * k + t) * hw + q];
        }
    }
    let value = if count == 0.0 {
        0.0
    } else {
        let dice_mean = (0..k)
            .map(|c| (2.0 * intersect[c] + spec.smooth) / (denom[c] + spec.smooth))
            .sum::<f64>()
            / k as f64;
        spec.dice_weight * (1.0 - dice_mean) + spec.ce_weight * ce / count
    };
    Ok(DiceCeParts {
        probs,
        intersect,
        denom,
        count,
        value,
    })
}

/// Soft-Dice (averaged over all classes) plus mean cross-entropy of
/// channel-softmax `logits` against a hard class target. Masked-out pixels
/// contribute to neither term; an empty selection scores 0.
pub fn dice_ce(
    logits: &Tensor,
    target: &ClassTarget,
    spec: DiceCeSpec,
) -> Result<f64, TensorError> {
    Ok(dice_ce_parts(logits, target, spec)?.value)
}

pub(crate) fn dice_ce_backward(
    logits: &Tensor,
    target: &ClassTarget,
    spec: DiceCeSpec,
    upstream: f64,
) -> Result<Vec<f64>, TensorError> {
    let parts = dice_ce_parts(logits, target, spec)?;
    let (b, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut dx = vec![0.0; logits.numel()];
    if parts.count == 0.0 {
        return Ok(dx);
    }
    let p = parts.probs.data();
    let mut gp = vec![0.0; k];
    for bi in 0..b {
        for q in 0..hw {
            let n = bi * hw + q;
            if target.mask.as_ref().is_some_and(|m| !m[n]) {
                continue;
            }
            let t = target.classes[n];
            // d(dice term)/d(prob)
            let mut dot = 0.0;
            for c in 0..k {
                let s = parts.denom[c] + spec.smooth;
                let onehot = if c == t { 1.0 } else { 0.0 };
                let d_dice =
                    (2.0 * onehot * s - (2.0 * parts.intersect[c] + spec.smooth)) / (s * s);
                gp[c] = -spec.dice_weight * d_dice / k as f64;
                dot += gp[c] * p[(bi * k + c) * hw + q];
            }
            for c in 0..k {
                let idx = (bi * k + c) * hw + q;
                let onehot = if c == t { 1.0 } else { 0.0 };
                let ce = spec.ce_weight * (p[idx] - onehot) / parts.count;
                dx[idx] = upstream * (p[idx] * (gp[c] - dot) + ce);
            }
        }
    }
    Ok(dx)
}
