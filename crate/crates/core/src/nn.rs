//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, Activation, NormAxis};
use crate::tensor::{compensated_sum, Float, Tensor};

fn same_shape<T: Float>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x + y);
        let (ga, gb) = (a.requires_grad(), b.requires_grad());
        Ok(self.custom(out, &[a, b], move |g| {
            vec![ga.then(|| g.clone()), gb.then(|| g.clone())]
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x - y);
        let (ga, gb) = (a.requires_grad(), b.requires_grad());
        Ok(self.custom(out, &[a, b], move |g| {
            vec![ga.then(|| g.clone()), gb.then(|| g.map(|v| -v))]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x * y);
        let (av, bv) = (a.value_rc(), b.value_rc());
        let (ga, gb) = (a.requires_grad(), b.requires_grad());
        Ok(self.custom(out, &[a, b], move |g| {
            vec![
                ga.then(|| g.zip_map(&bv, |x, y| x * y)),
                gb.then(|| g.zip_map(&av, |x, y| x * y)),
            ]
        }))
    }

    pub fn scale(&self, a: &Var<T>, s: f64) -> Var<T> {
        let s = T::from_f64(s);
        self.custom(a.value().scale(s), &[a], move |g| vec![Some(g.scale(s))])
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let shape = a.shape().to_vec();
        self.custom(Tensor::scalar(a.value().sum()), &[a], move |g| {
            vec![Some(Tensor::filled(&shape, g.item()))]
        })
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        let n = a.value().numel() as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    /// `sum(a * weights)` for a constant weight tensor; the usual probe
    /// functional for gradient checks.
    pub fn dot_const(&self, a: &Var<T>, weights: &Tensor<T>) -> Result<Var<T>> {
        if a.shape() != weights.shape() {
            return Err(Error::shape("dot_const: weight shape differs from operand"));
        }
        let v = compensated_sum(a.value().data().iter().zip(weights.data()).map(|(&x, &w)| x * w));
        let w = weights.clone();
        Ok(self.custom(Tensor::scalar(v), &[a], move |g| vec![Some(w.scale(g.item()))]))
    }

    /// `-exp(a)`, the stable parametrization of a negative diagonal.
    pub fn neg_exp(&self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(|v| -v.exp());
        let o = Rc::new(out.clone());
        self.custom(out, &[a], move |g| vec![Some(g.zip_map(&o, |x, y| x * y))])
    }

    pub fn activation(&self, a: &Var<T>, kind: Activation) -> Var<T> {
        let out = ops::activation(a.value(), kind);
        let av = a.value_rc();
        self.custom(out, &[a], move |g| {
            vec![Some(g.zip_map(&av, |gv, x| gv * kind.derivative(x)))]
        })
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        self.activation(a, Activation::Relu)
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = ops::matmul(a.value(), b.value())?;
        let [m, k] = a.value().dims2()?;
        let [_, n] = b.value().dims2()?;
        let (av, bv) = (a.value_rc(), b.value_rc());
        let (ga, gb) = (a.requires_grad(), b.requires_grad());
        Ok(self.custom(out, &[a, b], move |g| {
            let da = ga.then(|| {
                let mut d = vec![T::zero(); m * k];
                ops::gemm_nt(g.data(), bv.data(), &mut d, m, n, k);
                Tensor::from_vec(&[m, k], d).unwrap()
            });
            let db = gb.then(|| {
                let mut d = vec![T::zero(); k * n];
                ops::gemm_tn(av.data(), g.data(), &mut d, k, m, n);
                Tensor::from_vec(&[k, n], d).unwrap()
            });
            vec![da, db]
        }))
    }

    /// Affine map over the last axis with weight `[cin, cout]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let out = ops::linear(x.value(), w.value(), b.map(|b| b.value()))?;
        let [cin, cout] = w.value().dims2()?;
        let rows = x.value().numel() / cin;
        let (xv, wv) = (x.value_rc(), w.value_rc());
        let (gx, gw) = (x.requires_grad(), w.requires_grad());
        let x_shape = x.shape().to_vec();
        let mut operands = vec![x, w];
        if let Some(b) = b {
            operands.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.custom(out, &operands, move |g| {
            let dx = gx.then(|| {
                let mut d = vec![T::zero(); rows * cin];
                ops::gemm_nt(g.data(), wv.data(), &mut d, rows, cout, cin);
                Tensor::from_vec(&x_shape, d).unwrap()
            });
            let dw = gw.then(|| {
                let mut d = vec![T::zero(); cin * cout];
                ops::gemm_tn(xv.data(), g.data(), &mut d, cin, rows, cout);
                Tensor::from_vec(&[cin, cout], d).unwrap()
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut d = vec![T::zero(); cout];
                for row in g.data().chunks(cout) {
                    for (a, &v) in d.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                grads.push(Some(Tensor::from_vec(&[cout], d).unwrap()));
            }
            grads
        }))
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let geom = ops::conv_geom(x.value(), w.value(), b.map(|b| b.value()), stride, pad)?;
        let out = ops::conv2d_forward(x.value(), w.value(), b.map(|b| b.value()), &geom);
        let (xv, wv) = (x.value_rc(), w.value_rc());
        let (gx, gw) = (x.requires_grad(), w.requires_grad());
        let mut operands = vec![x, w];
        if let Some(b) = b {
            operands.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.custom(out, &operands, move |g| {
            let (dx, dw, db) = ops::conv2d_backward(&xv, &wv, g, &geom, gx, gw);
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(Some(db));
            }
            grads
        }))
    }

    pub fn dwconv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, pad: usize) -> Result<Var<T>> {
        let geom = ops::dw_geom(x.value(), w.value(), b.map(|b| b.value()), pad)?;
        let out = ops::dwconv2d_forward(x.value(), w.value(), b.map(|b| b.value()), &geom);
        let (xv, wv) = (x.value_rc(), w.value_rc());
        let mut operands = vec![x, w];
        if let Some(b) = b {
            operands.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.custom(out, &operands, move |g| {
            let (dx, dw, db) = ops::dwconv2d_backward(&xv, &wv, g, &geom);
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                grads.push(Some(db));
            }
            grads
        }))
    }

    fn layernorm_axis(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
        ax: NormAxis,
    ) -> Result<Var<T>> {
        ops::check_norm_params(ax.channels, gamma.value(), beta.value(), eps)?;
        let (y, xhat, rstd) = ops::layernorm_forward(
            x.value().data(),
            gamma.value().data(),
            beta.value().data(),
            T::from_f64(eps),
            ax,
        );
        let out = Tensor::from_vec(x.shape(), y)?;
        let shape = x.shape().to_vec();
        let gv = gamma.value_rc();
        let need = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let saved = need.then_some((xhat, rstd));
        Ok(self.custom(out, &[x, gamma, beta], move |g| {
            let (xhat, rstd) = saved.as_ref().expect("saved statistics");
            let (dx, dg, db) = ops::layernorm_backward(g.data(), xhat, rstd, gv.data(), ax);
            let n = dg.len();
            vec![
                Some(Tensor::from_vec(&shape, dx).unwrap()),
                Some(Tensor::from_vec(&[n], dg).unwrap()),
                Some(Tensor::from_vec(&[n], db).unwrap()),
            ]
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        self.layernorm_axis(x, gamma, beta, eps, NormAxis::last(x.shape()))
    }

    /// Layer normalization over the channel axis of a `[B, C, H, W]` map.
    pub fn layernorm_channels(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        x.value().dims4()?;
        self.layernorm_axis(x, gamma, beta, eps, NormAxis::nchw(x.shape()))
    }

    pub fn upsample_bilinear(&self, x: &Var<T>, factor: usize) -> Result<Var<T>> {
        let out = ops::upsample_bilinear(x.value(), factor)?;
        let dims = x.value().dims4()?;
        Ok(self.custom(out, &[x], move |g| {
            let d = ops::upsample_backward(g.data(), dims, factor);
            vec![Some(Tensor::from_vec(&dims, d).unwrap())]
        }))
    }

    pub fn concat_channels(&self, xs: &[&Var<T>]) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|v| v.value()).collect();
        let out = ops::concat_channels(&values)?;
        let sizes: Vec<usize> = xs.iter().map(|v| v.shape()[1]).collect();
        Ok(self.custom(out, xs, move |g| {
            ops::split_channels_sizes(g, &sizes)
                .expect("concat adjoint")
                .into_iter()
                .map(Some)
                .collect()
        }))
    }

    /// Contiguous channel range `[start, start + len)` of a `[B, C, H, W]` map.
    pub fn slice_channels(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let [b, ch, h, w] = x.value().dims4()?;
        if len == 0 || start + len > ch {
            return Err(Error::shape(format!("channel slice {start}+{len} outside {ch}")));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            data.extend_from_slice(&x.value().data()[(bi * ch + start) * hw..(bi * ch + start + len) * hw]);
        }
        let out = Tensor::from_vec(&[b, len, h, w], data)?;
        let shape = x.shape().to_vec();
        Ok(self.custom(out, &[x], move |g| {
            let mut d = Tensor::zeros(&shape);
            for bi in 0..b {
                d.data_mut()[(bi * ch + start) * hw..(bi * ch + start + len) * hw]
                    .copy_from_slice(&g.data()[bi * len * hw..(bi + 1) * len * hw]);
            }
            vec![Some(d)]
        }))
    }

    /// Split axis 1 into `parts` equal contiguous groups.
    pub fn split_channels(&self, x: &Var<T>, parts: usize) -> Result<Vec<Var<T>>> {
        let [_, ch, _, _] = x.value().dims4()?;
        if parts == 0 || ch % parts != 0 {
            return Err(Error::shape(format!(
                "{ch} channels are not divisible into {parts} parts"
            )));
        }
        let per = ch / parts;
        (0..parts).map(|i| self.slice_channels(x, i * per, per)).collect()
    }

    pub fn nchw_to_tokens(&self, x: &Var<T>) -> Result<Var<T>> {
        let [b, ch, h, w] = x.value().dims4()?;
        let out = ops::nchw_to_tokens(x.value())?;
        Ok(self.custom(out, &[x], move |g| {
            vec![Some(ops::transpose_last2(g.data(), b, h * w, ch, &[b, ch, h, w]))]
        }))
    }

    pub fn tokens_to_nchw(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let [b, l, ch] = x.value().dims3()?;
        let out = ops::tokens_to_nchw(x.value(), h, w)?;
        Ok(self.custom(out, &[x], move |g| {
            vec![Some(ops::transpose_last2(g.data(), b, ch, l, &[b, l, ch]))]
        }))
    }

    /// `out[b, t, :] = x[b, perm[t], :]` for a permutation `perm`.
    pub fn gather_positions(&self, x: &Var<T>, perm: Rc<[usize]>) -> Result<Var<T>> {
        let out = ops::gather_positions(x.value(), &perm)?;
        let [b, l, ch] = x.value().dims3()?;
        Ok(self.custom(out, &[x], move |g| {
            let mut d = vec![T::zero(); b * l * ch];
            for bi in 0..b {
                let src = &g.data()[bi * l * ch..][..l * ch];
                let dst = &mut d[bi * l * ch..][..l * ch];
                for (t, &p) in perm.iter().enumerate() {
                    for j in 0..ch {
                        dst[p * ch + j] += src[t * ch + j];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[b, l, ch], d).unwrap())]
        }))
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value().clone().reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.custom(out, &[x], move |g| vec![Some(g.clone().reshape(&orig).unwrap())]))
    }

    /// Mean pixelwise cross-entropy over non-ignored labels.
    pub fn cross_entropy(&self, logits: &Var<T>, labels: &Tensor<u8>, ignore_index: u8) -> Result<Var<T>> {
        let (loss, grad) = ops::cross_entropy_with_grad(logits.value(), labels, ignore_index)?;
        Ok(self.custom(Tensor::scalar(loss), &[logits], move |g| {
            vec![Some(grad.scale(g.item()))]
        }))
    }

    /// Per-pixel cross-entropy `[B, H, W]`; ignored pixels contribute 0.
    pub fn cross_entropy_map(&self, logits: &Var<T>, labels: &Tensor<u8>, ignore_index: u8) -> Result<Var<T>> {
        let (losses, local, _) = ops::cross_entropy_terms(logits.value(), labels, ignore_index)?;
        let [_, k, h, w] = local.dims4()?;
        Ok(self.custom(losses, &[logits], move |g| {
            let hw = h * w;
            let mut d = local.clone();
            for (i, v) in d.data_mut().iter_mut().enumerate() {
                let (bi, p) = (i / (k * hw), i % hw);
                *v *= g.data()[bi * hw + p];
            }
            vec![Some(d)]
        }))
    }
}
