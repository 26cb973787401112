//! Forward and backward kernels shared by the autodiff tape.
//!
//! Convolutions go through im2col and a dense GEMM; everything else is a
//! straight loop over the `[n, c, h, w]` layout.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// `c = a·b + beta·c` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable from the given
    // dimensions and strides (checked above for the dense layouts used here).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [_, in_ch, in_h, in_w] = x;
        let [out_ch, w_in, kh, kw] = w;
        if w_in != in_ch || kh != kw {
            return Err(shape_err(format!("conv2d: input {x:?} weight {w:?}")));
        }
        if stride == 0 || in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(shape_err(format!(
                "conv2d: kernel {kh} stride {stride} pad {pad} on {in_h}x{in_w}"
            )));
        }
        Ok(Self {
            in_ch,
            out_ch,
            kernel: kh,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside the row.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.in_w + g.pad > kx {
        ((g.in_w + g.pad - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    let k = g.kernel;
    for ci in 0..g.in_ch {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    let k = g.kernel;
    for ci in 0..g.in_ch {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    let start = lo * g.stride + kx - g.pad;
                    for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [1, g.out_ch, 1, 1] {
            return Err(shape_err(format!("conv2d bias {:?}", b.shape())));
        }
    }
    let n = x.batch();
    let p = g.positions();
    let kk = g.patch_len();
    let mut out = Tensor::zeros([n, g.out_ch, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
    for item in 0..n {
        let xs = x.item_slice(item);
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[item * g.out_ch * p..(item + 1) * g.out_ch * p];
        if let Some(b) = b {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm(
            g.out_ch,
            kk,
            p,
            w.data(),
            (kk as isize, 1),
            src,
            (p as isize, 1),
            if b.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let n = x.batch();
    let p = g.positions();
    let kk = g.patch_len();
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros([1, g.out_ch, 1, 1]));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcols = vec![0.0; kk * p];
    for item in 0..n {
        let dys = &dy.data()[item * g.out_ch * p..(item + 1) * g.out_ch * p];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dys.chunks(p).enumerate() {
                db.data_mut()[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = x.item_slice(item);
            let src: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut cols);
                &cols
            };
            // dW (co x kk) += dY (co x p) · colsᵀ (p x kk)
            gemm(
                g.out_ch,
                p,
                kk,
                dys,
                (p as isize, 1),
                src,
                (1, p as isize),
                1.0,
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (kk x p) = Wᵀ (kk x co) · dY (co x p)
            gemm(
                kk,
                g.out_ch,
                p,
                w.data(),
                (1, kk as isize),
                dys,
                (p as isize, 1),
                0.0,
                &mut dcols,
            );
            let len = x.item_len();
            let dst = &mut dx.data_mut()[item * len..(item + 1) * len];
            if g.is_pointwise() {
                for (d, s) in dst.iter_mut().zip(&dcols) {
                    *d += s;
                }
            } else {
                col2im_add(&g, &dcols, dst);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Normalizes each `(item, group)` slice to zero mean and unit variance.
/// Returns the output and the per-slice inverse standard deviations.
pub fn group_norm(x: &Tensor, groups: usize) -> Result<(Tensor, Vec<f64>)> {
    let [n, c, h, w] = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(shape_err(format!("group_norm: {c} channels, {groups} groups")));
    }
    let len = c / groups * h * w;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(n * groups);
    for chunk in out.data_mut().chunks_mut(len) {
        let mean = chunk.iter().sum::<f64>() / len as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    Ok((out, inv_std))
}

pub fn group_norm_backward(y: &Tensor, inv_std: &[f64], dy: &Tensor) -> Tensor {
    let len = y.len() / inv_std.len();
    let mut dx = Tensor::zeros(y.shape());
    for (((dxs, ys), dys), &inv) in dx
        .data_mut()
        .chunks_mut(len)
        .zip(y.data().chunks(len))
        .zip(dy.data().chunks(len))
        .zip(inv_std)
    {
        let mean_dy = dys.iter().sum::<f64>() / len as f64;
        let mean_dy_y = dys.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / len as f64;
        for ((d, &g), &yv) in dxs.iter_mut().zip(dys).zip(ys) {
            *d = inv * (g - mean_dy - yv * mean_dy_y);
        }
    }
    dx
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (plane_out, plane_in) in out.data_mut().chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                plane_out[oy * ow + ox] = plane_in[(oy / factor) * w + ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &Tensor, factor: usize) -> Tensor {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (plane_dx, plane_dy) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                plane_dx[(oy / factor) * w + ox / factor] += plane_dy[oy * ow + ox];
            }
        }
    }
    dx
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (plane_out, plane_in) in out.data_mut().chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = plane_in[y0 * w + x0] * (1.0 - lx) + plane_in[y0 * w + x1] * lx;
                let bot = plane_in[y1 * w + x0] * (1.0 - lx) + plane_in[y1 * w + x1] * lx;
                plane_out[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, oh, ow] = dy.shape();
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (plane_dx, plane_dy) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = plane_dy[oy * ow + ox];
                plane_dx[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                plane_dx[y0 * w + x1] += g * (1.0 - ly) * lx;
                plane_dx[y1 * w + x0] += g * ly * (1.0 - lx);
                plane_dx[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize, used for conditioning masks (no gradient).
pub fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (plane_out, plane_in) in out.data_mut().chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for oy in 0..oh {
            let sy = oy * h / oh;
            for ox in 0..ow {
                plane_out[oy * ow + ox] = plane_in[sy * w + ox * w / ow];
            }
        }
    }
    out
}

pub fn broadcast_shape(a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

fn strides(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let dense = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == out[d] { dense[d] } else { 0 };
    }
    s
}

/// Elementwise binary op with size-1 broadcasting on any axis.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = strides(a.shape(), out_shape);
    let sb = strides(b.shape(), out_shape);
    let mut out = Tensor::zeros(out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut k = 0;
    let od = out.data_mut();
    for n in 0..out_shape[0] {
        for c in 0..out_shape[1] {
            for y in 0..out_shape[2] {
                let ia = n * sa[0] + c * sa[1] + y * sa[2];
                let ib = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out_shape[3] {
                    od[k] = f(ad[ia + x * sa[3]], bd[ib + x * sb[3]]);
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Sums a gradient of broadcast shape back down to `shape`.
pub fn reduce_to(grad: &Tensor, shape: [usize; 4]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let gs = grad.shape();
    let st = strides(shape, gs);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let mut k = 0;
    let gd = grad.data();
    for n in 0..gs[0] {
        for c in 0..gs[1] {
            for y in 0..gs[2] {
                let base = n * st[0] + c * st[1] + y * st[2];
                for x in 0..gs[3] {
                    od[base + x * st[3]] += gd[k];
                    k += 1;
                }
            }
        }
    }
    out
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err(format!("concat: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for item in 0..n {
        data.extend_from_slice(a.item_slice(item));
        data.extend_from_slice(b.item_slice(item));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

pub fn split_channels(g: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = g.shape();
    let cb = c - ca;
    let mut da = Vec::with_capacity(n * ca * h * w);
    let mut db = Vec::with_capacity(n * cb * h * w);
    for item in 0..n {
        let s = g.item_slice(item);
        da.extend_from_slice(&s[..ca * h * w]);
        db.extend_from_slice(&s[ca * h * w..]);
    }
    (
        Tensor::from_vec([n, ca, h, w], da).expect("sizes agree"),
        Tensor::from_vec([n, cb, h, w], db).expect("sizes agree"),
    )
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
