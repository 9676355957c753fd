//! Pure tensor kernels.
//!
//! Every differentiable operation on the tape is a thin wrapper around a
//! forward function here plus its hand-written adjoint. The public functions
//! can be called directly when no gradient is needed.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[inline]
fn c<T: Float>(v: f64) -> T {
    T::from_f64(v)
}

// ---------------------------------------------------------------------------
// matrix products

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

/// Affine map over the last axis: `x[.., cin] * w[cin, cout] + b[cout]`.
pub fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [cin, cout] = w.dims2()?;
    let last = *x.shape().last().expect("rank >= 1");
    if last != cin {
        return Err(Error::shape(format!(
            "linear expects last dim {cin}, got {:?}",
            x.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape(format!("linear bias must be [{cout}], got {:?}", b.shape())));
        }
    }
    let rows = x.numel() / cin;
    let mut out = vec![T::zero(); rows * cout];
    if let Some(b) = b {
        for r in 0..rows {
            out[r * cout..(r + 1) * cout].copy_from_slice(b.data());
        }
    }
    gemm_nn(x.data(), w.data(), &mut out, rows, cin, cout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::from_vec(&shape, out)
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("stride must be >= 1"));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::shape(format!(
            "output size ({size}+2*{pad}-{k})/{stride}+1 is not integral"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv_geom<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [batch, cin, h, wd] = x.dims4()?;
    let [cout, cin2, k, k2] = w.dims4()?;
    if cin != cin2 || k != k2 {
        return Err(Error::shape(format!(
            "conv2d weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!("conv2d bias must be [{cout}], got {:?}", b.shape())));
        }
    }
    let ho = out_size(h, k, stride, pad)?;
    let wo = out_size(wd, k, stride, pad)?;
    Ok(ConvGeom {
        batch,
        cin,
        cout,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Unfold one image `[cin, h, w]` into columns `[cin*k*k, ho*wo]`.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let npos = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let npos = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let base = iy as usize * g.w;
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x[B,Cin,H,W]` with `w[Cout,Cin,k,k]`.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, bias, stride, pad)?;
    Ok(conv2d_forward(x, w, bias, &g))
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let npos = g.ho * g.wo;
    let kdim = g.cin * g.k * g.k;
    let mut out = vec![T::zero(); g.batch * g.cout * npos];
    let mut cols = vec![T::zero(); kdim * npos];
    let in_per = g.cin * g.h * g.w;
    for b in 0..g.batch {
        let dst = &mut out[b * g.cout * npos..(b + 1) * g.cout * npos];
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                dst[co * npos..(co + 1) * npos].fill(bv);
            }
        }
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        if g.k == 1 && g.stride == 1 && g.pad == 0 {
            gemm_nn(w.data(), xb, dst, g.cout, kdim, npos);
        } else {
            im2col(xb, g, &mut cols);
            gemm_nn(w.data(), &cols, dst, g.cout, kdim, npos);
        }
    }
    Tensor::from_vec(&[g.batch, g.cout, g.ho, g.wo], out).expect("conv output shape")
}

/// Gradients of conv2d with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let npos = g.ho * g.wo;
    let kdim = g.cin * g.k * g.k;
    let in_per = g.cin * g.h * g.w;
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    let mut db = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); kdim * npos];
    let mut dcols = vec![T::zero(); kdim * npos];
    for b in 0..g.batch {
        let dyb = &dy.data()[b * g.cout * npos..(b + 1) * g.cout * npos];
        for co in 0..g.cout {
            db[co] += dyb[co * npos..(co + 1) * npos].iter().copied().sum::<T>();
        }
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        if let Some(dw) = dw.as_mut() {
            if pointwise {
                gemm_nt(dyb, xb, dw, g.cout, npos, kdim);
            } else {
                im2col(xb, g, &mut cols);
                gemm_nt(dyb, &cols, dw, g.cout, npos, kdim);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            if pointwise {
                gemm_tn(w.data(), dyb, dxb, kdim, g.cout, npos);
            } else {
                dcols.fill(T::zero());
                gemm_tn(w.data(), dyb, &mut dcols, kdim, g.cout, npos);
                col2im(&dcols, g, dxb);
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d).unwrap()),
        dw.map(|d| Tensor::from_vec(w.shape(), d).unwrap()),
        Tensor::from_vec(&[g.cout], db).unwrap(),
    )
}

/// Depthwise convolution, `w[C,1,k,k]`, stride 1.
pub fn dwconv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = dw_geom(x, w, bias, pad)?;
    Ok(dwconv2d_forward(x, w, bias, &g))
}

pub(crate) fn dw_geom<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Result<ConvGeom> {
    let [batch, ch, h, wd] = x.dims4()?;
    let [cw, one, k, k2] = w.dims4()?;
    if cw != ch || one != 1 || k != k2 {
        return Err(Error::shape(format!(
            "depthwise weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [ch] {
            return Err(Error::shape(format!("depthwise bias must be [{ch}]")));
        }
    }
    let ho = out_size(h, k, 1, pad)?;
    let wo = out_size(wd, k, 1, pad)?;
    Ok(ConvGeom {
        batch,
        cin: ch,
        cout: ch,
        h,
        w: wd,
        k,
        stride: 1,
        pad,
        ho,
        wo,
    })
}

pub(crate) fn dwconv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let (k, p) = (g.k, g.pad as isize);
    let mut out = vec![T::zero(); g.batch * g.cin * g.ho * g.wo];
    for b in 0..g.batch {
        for ch in 0..g.cin {
            let plane = &x.data()[(b * g.cin + ch) * g.h * g.w..][..g.h * g.w];
            let dst = &mut out[(b * g.cin + ch) * g.ho * g.wo..][..g.ho * g.wo];
            if let Some(bias) = bias {
                dst.fill(bias.data()[ch]);
            }
            let kern = &w.data()[ch * k * k..(ch + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    for oy in 0..g.ho {
                        let iy = (oy + ky) as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let line = &mut dst[oy * g.wo..][..g.wo];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                *d += wv * src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.batch, g.cin, g.ho, g.wo], out).unwrap()
}

pub(crate) fn dwconv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (k, p) = (g.k, g.pad as isize);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); g.cin];
    for b in 0..g.batch {
        for ch in 0..g.cin {
            let off_in = (b * g.cin + ch) * g.h * g.w;
            let plane = &x.data()[off_in..][..g.h * g.w];
            let dplane = &mut dx[off_in..][..g.h * g.w];
            let dyp = &dy.data()[(b * g.cin + ch) * g.ho * g.wo..][..g.ho * g.wo];
            db[ch] += dyp.iter().copied().sum::<T>();
            let kern = &w.data()[ch * k * k..(ch + 1) * k * k];
            let dkern = &mut dw[ch * k * k..(ch + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    let mut acc = T::zero();
                    for oy in 0..g.ho {
                        let iy = (oy + ky) as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = iy as usize * g.w;
                        for ox in 0..g.wo {
                            let ix = (ox + kx) as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                let gv = dyp[oy * g.wo + ox];
                                acc += gv * plane[row + ix as usize];
                                dplane[row + ix as usize] += wv * gv;
                            }
                        }
                    }
                    dkern[ky * k + kx] += acc;
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).unwrap(),
        Tensor::from_vec(w.shape(), dw).unwrap(),
        Tensor::from_vec(&[g.cin], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// normalization

/// Geometry of a normalization over one axis: `outer x channels x inner`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormAxis {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl NormAxis {
    pub fn last(shape: &[usize]) -> Self {
        let channels = *shape.last().unwrap();
        NormAxis {
            outer: shape.iter().product::<usize>() / channels,
            channels,
            inner: 1,
        }
    }

    /// Axis 1 of a `[B, C, H, W]` map.
    pub fn nchw(shape: &[usize]) -> Self {
        NormAxis {
            outer: shape[0],
            channels: shape[1],
            inner: shape[2..].iter().product(),
        }
    }
}

/// Returns `(y, xhat, rstd)`; `rstd` holds one entry per normalized vector.
pub(crate) fn layernorm_forward<T: Float>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    ax: NormAxis,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let NormAxis {
        outer,
        channels,
        inner,
    } = ax;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); outer * inner];
    let inv_c = T::one() / c::<T>(channels as f64);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| (o * channels + ch) * inner + i;
            let mut mean = T::zero();
            for ch in 0..channels {
                mean += x[idx(ch)];
            }
            mean *= inv_c;
            let mut var = T::zero();
            for ch in 0..channels {
                let d = x[idx(ch)] - mean;
                var += d * d;
            }
            var *= inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for ch in 0..channels {
                let j = idx(ch);
                let xh = (x[j] - mean) * r;
                xhat[j] = xh;
                y[j] = xh * gamma[ch] + beta[ch];
            }
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layernorm_backward<T: Float>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    ax: NormAxis,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let NormAxis {
        outer,
        channels,
        inner,
    } = ax;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); channels];
    let mut db = vec![T::zero(); channels];
    let inv_c = T::one() / c::<T>(channels as f64);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| (o * channels + ch) * inner + i;
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for ch in 0..channels {
                let j = idx(ch);
                let g = dy[j] * gamma[ch];
                mean_g += g;
                mean_gx += g * xhat[j];
                dg[ch] += dy[j] * xhat[j];
                db[ch] += dy[j];
            }
            mean_g *= inv_c;
            mean_gx *= inv_c;
            let r = rstd[o * inner + i];
            for ch in 0..channels {
                let j = idx(ch);
                dx[j] = r * (dy[j] * gamma[ch] - mean_g - xhat[j] * mean_gx);
            }
        }
    }
    (dx, dg, db)
}

/// Normalize over the last axis.
pub fn layernorm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let ax = NormAxis::last(x.shape());
    check_norm_params(ax.channels, gamma, beta, eps)?;
    let (y, _, _) = layernorm_forward(x.data(), gamma.data(), beta.data(), c(eps), ax);
    Tensor::from_vec(x.shape(), y)
}

pub(crate) fn check_norm_params<T: Float>(
    channels: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<()> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::shape(format!(
            "layernorm affine parameters must be [{channels}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("layernorm eps must be > 0, got {eps}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// activations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    /// tanh approximation
    Gelu,
    Softplus,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let u = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
                c::<T>(0.5) * x * (T::one() + u.tanh())
            }
            Activation::Softplus => softplus(x),
        }
    }

    #[inline]
    pub fn derivative<T: Float>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let k = c::<T>(GELU_K);
                let a = c::<T>(GELU_A);
                let t = (k * (x + a * x * x * x)).tanh();
                let half = c::<T>(0.5);
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn activation<T: Float>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

// ---------------------------------------------------------------------------
// bilinear upsampling

/// Per-output-coordinate source indices and weight for an integer upscale
/// under the half-pixel (align-corners = false) convention:
/// `src = max((dst + 0.5) / factor - 0.5, 0)`, `i0 = floor(src)`,
/// `i1 = min(i0 + 1, n - 1)`, `lambda = src - i0`.
pub(crate) fn bilinear_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Float>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [b, ch, h, w] = x.dims4()?;
    if factor < 2 {
        return Err(Error::Domain(format!("upsample factor must be >= 2, got {factor}")));
    }
    Ok(upsample_forward(x.data(), [b, ch, h, w], factor))
}

pub(crate) fn upsample_forward<T: Float>(x: &[T], dims: [usize; 4], factor: usize) -> Tensor<T> {
    let [b, ch, h, w] = dims;
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![T::zero(); b * ch * ho * wo];
    for plane in 0..b * ch {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * ho * wo..][..ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = c::<T>(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = c::<T>(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Tensor::from_vec(&[b, ch, ho, wo], out).unwrap()
}

pub(crate) fn upsample_backward<T: Float>(dy: &[T], dims: [usize; 4], factor: usize) -> Vec<T> {
    let [b, ch, h, w] = dims;
    let (ho, wo) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![T::zero(); b * ch * h * w];
    for plane in 0..b * ch {
        let g = &dy[plane * ho * wo..][..ho * wo];
        let d = &mut dx[plane * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = c::<T>(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = c::<T>(lx);
                let v = g[oy * wo + ox];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                d[y0 * w + x0] += top * (T::one() - lx);
                d[y0 * w + x1] += top * lx;
                d[y1 * w + x0] += bot * (T::one() - lx);
                d[y1 * w + x1] += bot * lx;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// channel concat / split

pub fn concat_channels<T: Float>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    let [b, _, h, w] = first.dims4()?;
    let mut total = 0;
    for x in xs {
        let [bb, ci, hh, ww] = x.dims4()?;
        if (bb, hh, ww) != (b, h, w) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} does not match batch/spatial dims of {:?}",
                x.shape(),
                first.shape()
            )));
        }
        total += ci;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for x in xs {
            let ci = x.shape()[1];
            out.extend_from_slice(&x.data()[bi * ci * hw..(bi + 1) * ci * hw]);
        }
    }
    Tensor::from_vec(&[b, total, h, w], out)
}

/// Split along axis 1 into tensors with the given channel counts.
pub(crate) fn split_channels_sizes<T: Float>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [b, ch, h, w] = x.dims4()?;
    if sizes.iter().sum::<usize>() != ch || sizes.contains(&0) {
        return Err(Error::shape(format!("cannot split {ch} channels as {sizes:?}")));
    }
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = sizes.iter().map(|s| Vec::with_capacity(b * s * hw)).collect();
    for bi in 0..b {
        let mut start = 0;
        for (o, &s) in outs.iter_mut().zip(sizes) {
            o.extend_from_slice(&x.data()[(bi * ch + start) * hw..(bi * ch + start + s) * hw]);
            start += s;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::from_vec(&[b, s, h, w], d))
        .collect()
}

/// Split axis 1 into `parts` equal contiguous groups.
pub fn split_channels<T: Float>(x: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    let [_, ch, _, _] = x.dims4()?;
    if parts == 0 || ch % parts != 0 {
        return Err(Error::shape(format!(
            "{ch} channels are not divisible into {parts} parts"
        )));
    }
    split_channels_sizes(x, &vec![ch / parts; parts])
}

// ---------------------------------------------------------------------------
// layout

/// `[B, C, H, W]` -> `[B, H*W, C]`.
pub fn nchw_to_tokens<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, ch, h, w] = x.dims4()?;
    Ok(transpose_last2(x.data(), b, ch, h * w, &[b, h * w, ch]))
}

/// `[B, L, C]` -> `[B, C, H, W]` with `L == H*W`.
pub fn tokens_to_nchw<T: Float>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [b, l, ch] = x.dims3()?;
    if l != h * w {
        return Err(Error::shape(format!("{l} tokens cannot form a {h}x{w} map")));
    }
    Ok(transpose_last2(x.data(), b, l, ch, &[b, ch, h, w]))
}

/// Batched transpose of `[b, r, c]` data to `[b, c, r]`, reshaped to `shape`.
pub(crate) fn transpose_last2<T: Float>(x: &[T], b: usize, r: usize, cc: usize, shape: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let src = &x[bi * r * cc..][..r * cc];
        let dst = &mut out[bi * r * cc..][..r * cc];
        for i in 0..r {
            for j in 0..cc {
                dst[j * r + i] = src[i * cc + j];
            }
        }
    }
    Tensor::from_vec(shape, out).unwrap()
}

/// Reorder the sequence axis of `[B, L, C]`: `out[b, t, :] = x[b, perm[t], :]`.
pub fn gather_positions<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let [b, l, ch] = x.dims3()?;
    if perm.len() != l {
        return Err(Error::shape(format!(
            "order of length {} applied to sequence of length {l}",
            perm.len()
        )));
    }
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        let src = &x.data()[bi * l * ch..][..l * ch];
        let dst = &mut out[bi * l * ch..][..l * ch];
        for (t, &p) in perm.iter().enumerate() {
            dst[t * ch..(t + 1) * ch].copy_from_slice(&src[p * ch..(p + 1) * ch]);
        }
    }
    Tensor::from_vec(x.shape(), out)
}

// ---------------------------------------------------------------------------
// loss

/// Per-pixel cross-entropy `[B, H, W]` and, per pixel, the derivative of
/// that pixel's loss with respect to its logits (`softmax - onehot`). Pixels
/// labelled `ignore_index` have loss 0 and zero derivative. Also returns the
/// number of scored pixels.
pub(crate) fn cross_entropy_terms<T: Float>(
    logits: &Tensor<T>,
    labels: &Tensor<u8>,
    ignore_index: u8,
) -> Result<(Tensor<T>, Tensor<T>, usize)> {
    let [b, k, h, w] = logits.dims4()?;
    if labels.shape() != [b, h, w] {
        return Err(Error::shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    let hw = h * w;
    let x = logits.data();
    let mut grad = vec![T::zero(); x.len()];
    let mut losses = vec![T::zero(); b * hw];
    let mut count = 0;
    let mut probs = vec![T::zero(); k];
    for bi in 0..b {
        for p in 0..hw {
            let lab = labels.data()[bi * hw + p];
            if lab == ignore_index {
                continue;
            }
            if lab as usize >= k {
                return Err(Error::Label(format!(
                    "label {lab} outside [0, {k}) and not the ignore index {ignore_index}"
                )));
            }
            let at = |ch: usize| (bi * k + ch) * hw + p;
            let mut m = T::neg_infinity();
            for ch in 0..k {
                m = m.max(x[at(ch)]);
            }
            let mut z = T::zero();
            for (ch, pr) in probs.iter_mut().enumerate() {
                *pr = (x[at(ch)] - m).exp();
                z += *pr;
            }
            losses[bi * hw + p] = m + z.ln() - x[at(lab as usize)];
            for (ch, pr) in probs.iter().enumerate() {
                grad[at(ch)] = *pr / z;
            }
            grad[at(lab as usize)] -= T::one();
            count += 1;
        }
    }
    Ok((
        Tensor::from_vec(&[b, h, w], losses)?,
        Tensor::from_vec(logits.shape(), grad)?,
        count,
    ))
}

/// Mean pixelwise cross-entropy and its gradient with respect to the logits.
/// Pixels labelled `ignore_index` are excluded; if every pixel is ignored the
/// loss is 0 and the gradient is zero.
pub(crate) fn cross_entropy_with_grad<T: Float>(
    logits: &Tensor<T>,
    labels: &Tensor<u8>,
    ignore_index: u8,
) -> Result<(T, Tensor<T>)> {
    let (losses, grad, count) = cross_entropy_terms(logits, labels, ignore_index)?;
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let n = c::<T>(count as f64);
    Ok((losses.sum() / n, grad.map(|g| g / n)))
}

pub fn cross_entropy_loss<T: Float>(
    logits: &Tensor<T>,
    labels: &Tensor<u8>,
    ignore_index: u8,
) -> Result<T> {
    cross_entropy_with_grad(logits, labels, ignore_index).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let eye = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = rand_t(&[2, 3], 1);
        assert_eq!(matmul(&eye, &x).unwrap(), x);
        let a = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::<f32>::create(&[4, 5], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 3 }).unwrap();
        let b = Tensor::<f32>::create(&[5, 3], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 4 }).unwrap();
        let got = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] as f64 * b.data()[p * 3 + j] as f64;
                }
                assert!((got.data()[i * 3 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transposed_gemms_agree_with_plain() {
        let a = rand_t(&[3, 4], 5);
        let b = rand_t(&[5, 4], 6);
        let mut nt = vec![0.0; 15];
        gemm_nt(a.data(), b.data(), &mut nt, 3, 4, 5);
        let mut bt = vec![0.0; 20];
        for i in 0..5 {
            for j in 0..4 {
                bt[j * 5 + i] = b.data()[i * 4 + j];
            }
        }
        let mut nn = vec![0.0; 15];
        gemm_nn(a.data(), &bt, &mut nn, 3, 4, 5);
        for (x, y) in nt.iter().zip(&nn) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut tn = vec![0.0; 16];
        gemm_tn(a.data(), a.data(), &mut tn, 4, 3, 4);
        for i in 0..4 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|p| a.data()[p * 4 + i] * a.data()[p * 4 + j]).sum();
                assert!((tn[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_and_scaling_kernels() {
        let x = rand_t(&[1, 2, 5, 5], 9);
        let mut w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // out 0 <- in 0 centre
        w.data_mut()[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 centre
        assert_eq!(conv2d(&x, &w, None, 1, 1).unwrap(), x);

        let w1 = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let x1 = rand_t(&[1, 1, 3, 4], 2);
        let y = conv2d(&x1, &w1, Some(&b), 1, 0).unwrap();
        assert_eq!(y, x1.map(|v| 2.0 * v));
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let x = Tensor::<f32>::create(&[1, 2, 5, 5], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 11 }).unwrap();
        let w = Tensor::<f32>::create(&[3, 2, 3, 3], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 12 }).unwrap();
        let b = Tensor::<f32>::create(&[3], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 13 }).unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let got = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let [_, _, ho, wo] = got.dims4().unwrap();
            for co in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b.data()[co] as f64;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                        s += x.data()[(ci * 5 + iy as usize) * 5 + ix as usize] as f64
                                            * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx] as f64;
                                    }
                                }
                            }
                        }
                        let v = got.data()[(co * ho + oy) * wo + ox] as f64;
                        assert!((v - s).abs() < 1e-6, "{v} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let x = rand_t(&[1, 1, 5, 5], 1);
        let w = rand_t(&[1, 1, 2, 2], 2);
        assert!(matches!(conv2d(&x, &w, None, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn dwconv_cases() {
        let x = rand_t(&[2, 3, 4, 5], 4);
        let mut w = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
        for ch in 0..3 {
            w.data_mut()[ch * 9 + 4] = 1.0;
        }
        assert_eq!(dwconv2d(&x, &w, None, 1).unwrap(), x);

        let zero = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
        let b = Tensor::<f64>::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = dwconv2d(&x, &zero, Some(&b), 1).unwrap();
        for bi in 0..2 {
            for ch in 0..3 {
                assert!(y.data()[(bi * 3 + ch) * 20..][..20].iter().all(|&v| v == b.data()[ch]));
            }
        }

        let bad = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        assert!(matches!(dwconv2d(&x, &bad, None, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn dwconv_matches_per_channel_conv() {
        let x = rand_t(&[1, 3, 6, 5], 21);
        let w = rand_t(&[3, 1, 5, 5], 22);
        let b = rand_t(&[3], 23);
        let got = dwconv2d(&x, &w, Some(&b), 2).unwrap();
        let xs = split_channels(&x, 3).unwrap();
        for ch in 0..3 {
            let wc = Tensor::from_vec(&[1, 1, 5, 5], w.data()[ch * 25..(ch + 1) * 25].to_vec()).unwrap();
            let bc = Tensor::from_vec(&[1], vec![b.data()[ch]]).unwrap();
            let oracle = conv2d(&xs[ch], &wc, Some(&bc), 1, 2).unwrap();
            let slice = &got.data()[ch * 30..(ch + 1) * 30];
            for (a, o) in slice.iter().zip(oracle.data()) {
                assert!((a - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_cases() {
        let g = Tensor::<f64>::filled(&[4], 1.0);
        let bt = Tensor::<f64>::zeros(&[4]);
        let flat = Tensor::<f64>::filled(&[3, 4], 2.5);
        assert!(layernorm(&flat, &g, &bt, 1e-5).unwrap().data().iter().all(|&v| v == 0.0));

        let g2 = Tensor::<f64>::filled(&[2], 1.0);
        let b2 = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 3.0]).unwrap();
        let y = layernorm(&x, &g2, &b2, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let r = rand_t(&[5, 4], 8).map(|v| 3.0 * v + 1.0);
        let y = layernorm(&r, &g, &bt, 1e-5).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(matches!(layernorm(&r, &g, &bt, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert!((Activation::Softplus.apply(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        // ln(1 + e^30) = 30 + ln(1 + e^-30) = 30 + 9.357622968840175e-14
        assert!((Activation::Softplus.apply(30.0f64) - 30.0).abs() < 1e-9);
        assert!((Activation::Softplus.apply(30.0f64) - (30.0 + 9.357622968840175e-14)).abs() < 1e-14);
        assert!(Activation::Softplus.apply(1000.0f64).is_finite());
        assert!(Activation::Softplus.apply(-1000.0f64) >= 0.0);
        // tanh-GELU reference values
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
    }

    #[test]
    fn upsample_cases() {
        let x = Tensor::<f64>::filled(&[1, 2, 3, 2], 5.0);
        let y = upsample_bilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 4]);
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-15));

        let ramp = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample_bilinear(&ramp, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
        assert!(matches!(upsample_bilinear(&ramp, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn upsample_preserves_mean_of_linear_ramp() {
        // symmetric ramp: mean is preserved because the edge clamping is symmetric
        let ramp: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let x = Tensor::from_vec(&[1, 1, 1, 6], ramp).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        assert!((y.mean() - x.mean()).abs() < 1e-6);
        let y4 = upsample_bilinear(&x, 4).unwrap();
        assert!((y4.mean() - x.mean()).abs() < 1e-6);
    }

    #[test]
    fn split_concat_round_trip() {
        let x = rand_t(&[2, 8, 3, 3], 31);
        let parts = split_channels(&x, 4).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.shape() == [2, 2, 3, 3]));
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), x);

        let a = rand_t(&[1, 3, 2, 2], 1);
        let b = rand_t(&[1, 2, 2, 2], 2);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(&cat.data()[..12], a.data());
        assert!(matches!(split_channels(&b, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn token_layout_round_trip() {
        let x = rand_t(&[2, 3, 4, 5], 41);
        let t = nchw_to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[2, 20, 3]);
        assert_eq!(t.data()[(20 + 7) * 3 + 2], x.data()[(3 + 2) * 20 + 7]);
        assert_eq!(tokens_to_nchw(&t, 4, 5).unwrap(), x);
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let lab = Tensor::<u8>::from_vec(&[1, 1, 1], vec![0]).unwrap();
        let l = cross_entropy_loss(&logits, &lab, 255).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let strong = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![100.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&strong, &lab, 255).unwrap() < 1e-6);

        let ignored = Tensor::<u8>::from_vec(&[1, 1, 1], vec![255]).unwrap();
        let (l, g) = cross_entropy_with_grad(&strong, &ignored, 255).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let bad = Tensor::<u8>::from_vec(&[1, 1, 1], vec![2]).unwrap();
        assert!(matches!(cross_entropy_loss(&strong, &bad, 255), Err(Error::Label(_))));
    }
}
