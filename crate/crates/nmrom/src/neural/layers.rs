//! Convolution kernels, their adjoints, activations, and the fused layer
//! type used by the network containers.
//!
//! All convolutions use symmetric zero padding. Forward/backward pairs are
//! exact adjoints, checked by inner-product identities and finite
//! differences in the tests.

use super::rng::DetRng;
use super::tensor::Tensor;
use crate::{Error, Result};

pub fn conv_output_size(n: usize, k: usize, pad: usize, stride: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub fn convtr_output_size(n: usize, k: usize, pad: usize, stride: usize) -> usize {
    (n - 1) * stride + k - 2 * pad
}

/// Cross-correlation of `x (N,Ci,H,W)` with `w (Co,Ci,KH,KW)`, no bias.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let (n, ci, h, wd) = shape4(x)?;
    let (co, ci_w, kh, kw) = shape4(w)?;
    if ci != ci_w {
        return Err(Error::Shape(format!(
            "conv input has {ci} channels, kernel expects {ci_w}"
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Shape("kernel larger than padded input".into()));
    }
    let oh = conv_output_size(h, kh, pad, stride);
    let ow = conv_output_size(wd, kw, pad, stride);
    let mut y = Tensor::zeros(&[n, co, oh, ow]);
    let xd = x.data();
    let wdt = w.data();
    let yd = y.data_mut();
    for b in 0..n {
        for o in 0..co {
            for c in 0..ci {
                let x_base = (b * ci + c) * h * wd;
                let w_base = (o * ci_w + c) * kh * kw;
                for oy in 0..oh {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_base + iy as usize * wd;
                        let w_row = w_base + ky * kw;
                        let y_row = ((b * co + o) * oh + oy) * ow;
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc += xd[x_row + ix as usize] * wdt[w_row + kx];
                                }
                            }
                            yd[y_row + ox] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    pad: usize,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, ci, h, wd) = shape4(x)?;
    let (co, _, kh, kw) = shape4(w)?;
    let (_, _, oh, ow) = shape4(dy)?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xd = x.data();
    let wdt = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..n {
        for o in 0..co {
            for c in 0..ci {
                let x_base = (b * ci + c) * h * wd;
                let w_base = (o * ci + c) * kh * kw;
                for oy in 0..oh {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_base + iy as usize * wd;
                        let w_row = w_base + ky * kw;
                        let y_row = ((b * co + o) * oh + oy) * ow;
                        for ox in 0..ow {
                            let g = dyd[y_row + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    dxd[x_row + ix as usize] += wdt[w_row + kx] * g;
                                    dwd[w_row + kx] += xd[x_row + ix as usize] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Transposed convolution of `x (N,Ci,H,W)` with `w (Ci,Co,KH,KW)`, the
/// adjoint of [`conv2d_forward`] with matching kernel/stride/padding.
pub fn convtr2d_forward(x: &Tensor, w: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let (n, ci, h, wd) = shape4(x)?;
    let (ci_w, co, kh, kw) = shape4(w)?;
    if ci != ci_w {
        return Err(Error::Shape(format!(
            "transposed conv input has {ci} channels, kernel expects {ci_w}"
        )));
    }
    if (h - 1) * stride + kh < 2 * pad || (wd - 1) * stride + kw < 2 * pad {
        return Err(Error::Shape("padding exceeds transposed output".into()));
    }
    let oh = convtr_output_size(h, kh, pad, stride);
    let ow = convtr_output_size(wd, kw, pad, stride);
    let mut y = Tensor::zeros(&[n, co, oh, ow]);
    let xd = x.data();
    let wdt = w.data();
    let yd = y.data_mut();
    for b in 0..n {
        for c in 0..ci {
            for o in 0..co {
                let w_base = (c * co + o) * kh * kw;
                for iy in 0..h {
                    let x_row = ((b * ci + c) * h + iy) * wd;
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let y_row = ((b * co + o) * oh + oy as usize) * ow;
                        let w_row = w_base + ky * kw;
                        for ix in 0..wd {
                            let xv = xd[x_row + ix];
                            if xv == 0.0 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox >= 0 && ox < ow as isize {
                                    yd[y_row + ox as usize] += xv * wdt[w_row + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`convtr2d_forward`] with respect to input and kernel.
pub fn convtr2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    pad: usize,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    let (n, ci, h, wd) = shape4(x)?;
    let (_, co, kh, kw) = shape4(w)?;
    let (_, _, oh, ow) = shape4(dy)?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xd = x.data();
    let wdt = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..n {
        for c in 0..ci {
            for o in 0..co {
                let w_base = (c * co + o) * kh * kw;
                for iy in 0..h {
                    let x_row = ((b * ci + c) * h + iy) * wd;
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let y_row = ((b * co + o) * oh + oy as usize) * ow;
                        let w_row = w_base + ky * kw;
                        for ix in 0..wd {
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox >= 0 && ox < ow as isize {
                                    let g = dyd[y_row + ox as usize];
                                    dxd[x_row + ix] += wdt[w_row + kx] * g;
                                    dwd[w_row + kx] += xd[x_row + ix] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

fn shape4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected a 4D tensor, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// ELU derivative expressed through the activation output.
pub fn elu_grad(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        y + 1.0
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    None,
    Elu,
    Relu,
}

impl Activation {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Elu => elu(v),
            Activation::Relu => relu(v),
        }
    }

    /// Derivative through the output value.
    pub fn grad_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Elu => elu_grad(y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// What a fused layer computes before its activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Kernel `(Co, Ci, K, K)`.
    Conv2d,
    /// Kernel `(Ci, Co, K, K)`.
    ConvTr2d,
    /// Weight `(in, out)`.
    Linear,
}

/// Trainable layer: kernel or weight matrix, bias, fused activation, and the
/// gradient buffers filled by `backward`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub w: Tensor,
    pub b: Tensor,
    pub gw: Tensor,
    pub gb: Tensor,
    pub pad: usize,
    pub stride: usize,
    pub act: Activation,
}

impl Layer {
    pub fn conv2d(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
        stride: usize,
        act: Activation,
        rng: &mut DetRng,
    ) -> Layer {
        let fan_in = in_ch * k * k;
        let w = init_uniform(&[out_ch, in_ch, k, k], fan_in, rng);
        let b = init_bias(out_ch, fan_in, rng);
        Layer {
            kind: LayerKind::Conv2d,
            gw: Tensor::zeros(w.shape()),
            gb: Tensor::zeros(b.shape()),
            w,
            b,
            pad,
            stride,
            act,
        }
    }

    pub fn convtr2d(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
        stride: usize,
        act: Activation,
        rng: &mut DetRng,
    ) -> Layer {
        let fan_in = in_ch * k * k;
        let w = init_uniform(&[in_ch, out_ch, k, k], fan_in, rng);
        let b = init_bias(out_ch, fan_in, rng);
        Layer {
            kind: LayerKind::ConvTr2d,
            gw: Tensor::zeros(w.shape()),
            gb: Tensor::zeros(b.shape()),
            w,
            b,
            pad,
            stride,
            act,
        }
    }

    pub fn linear(inp: usize, out: usize, act: Activation, rng: &mut DetRng) -> Layer {
        let w = init_uniform(&[inp, out], inp, rng);
        let b = init_bias(out, inp, rng);
        Layer {
            kind: LayerKind::Linear,
            gw: Tensor::zeros(w.shape()),
            gb: Tensor::zeros(b.shape()),
            w,
            b,
            pad: 0,
            stride: 1,
            act,
        }
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Pre-activation output (bias included).
    pub fn linear_part(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = match self.kind {
            LayerKind::Conv2d => conv2d_forward(x, &self.w, self.pad, self.stride)?,
            LayerKind::ConvTr2d => convtr2d_forward(x, &self.w, self.pad, self.stride)?,
            LayerKind::Linear => {
                let (n, inp) = (x.shape()[0], x.shape()[1]);
                let out = self.w.shape()[1];
                let mut y = Tensor::zeros(&[n, out]);
                let xd = x.data();
                let wd = self.w.data();
                let yd = y.data_mut();
                for bch in 0..n {
                    for i in 0..inp {
                        let xv = xd[bch * inp + i];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = i * out;
                        let yrow = bch * out;
                        for o in 0..out {
                            yd[yrow + o] += xv * wd[wrow + o];
                        }
                    }
                }
                y
            }
        };
        add_bias(&mut y, &self.b, self.kind);
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.linear_part(x)?;
        if self.act != Activation::None {
            for v in y.data_mut() {
                *v = self.act.apply(*v);
            }
        }
        Ok(y)
    }

    /// Backpropagates `dy` through activation, bias, and the linear part;
    /// accumulates `gw`/`gb` and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, y: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let mut dz = dy.clone();
        if self.act != Activation::None {
            for (g, &out) in dz.data_mut().iter_mut().zip(y.data()) {
                *g *= self.act.grad_from_output(out);
            }
        }
        accumulate_bias_grad(&mut self.gb, &dz, self.kind);
        match self.kind {
            LayerKind::Conv2d => {
                let (dx, dw) = conv2d_backward(x, &self.w, &dz, self.pad, self.stride)?;
                add_into(&mut self.gw, &dw);
                Ok(dx)
            }
            LayerKind::ConvTr2d => {
                let (dx, dw) = convtr2d_backward(x, &self.w, &dz, self.pad, self.stride)?;
                add_into(&mut self.gw, &dw);
                Ok(dx)
            }
            LayerKind::Linear => {
                let (n, inp) = (x.shape()[0], x.shape()[1]);
                let out = self.w.shape()[1];
                let mut dx = Tensor::zeros(x.shape());
                let xd = x.data();
                let wd = self.w.data();
                let dzd = dz.data();
                let dxd = dx.data_mut();
                let gwd = self.gw.data_mut();
                for bch in 0..n {
                    for i in 0..inp {
                        let mut acc = 0.0;
                        let wrow = i * out;
                        let zrow = bch * out;
                        for o in 0..out {
                            let g = dzd[zrow + o];
                            acc += wd[wrow + o] * g;
                            gwd[wrow + o] += xd[bch * inp + i] * g;
                        }
                        dxd[bch * inp + i] += acc;
                    }
                }
                Ok(dx)
            }
        }
    }
}

fn add_bias(y: &mut Tensor, b: &Tensor, kind: LayerKind) {
    match kind {
        LayerKind::Linear => {
            let out = b.len();
            let bd = b.data().to_vec();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += bd[i % out];
            }
        }
        _ => {
            let (co, plane) = (y.shape()[1], y.shape()[2] * y.shape()[3]);
            let n = y.shape()[0];
            let bd = b.data().to_vec();
            let yd = y.data_mut();
            for bch in 0..n {
                for c in 0..co {
                    let base = (bch * co + c) * plane;
                    for k in 0..plane {
                        yd[base + k] += bd[c];
                    }
                }
            }
        }
    }
}

fn accumulate_bias_grad(gb: &mut Tensor, dz: &Tensor, kind: LayerKind) {
    match kind {
        LayerKind::Linear => {
            let out = gb.len();
            let gbd = gb.data_mut();
            for (i, &g) in dz.data().iter().enumerate() {
                gbd[i % out] += g;
            }
        }
        _ => {
            let (co, plane) = (dz.shape()[1], dz.shape()[2] * dz.shape()[3]);
            let n = dz.shape()[0];
            let gbd = gb.data_mut();
            let dzd = dz.data();
            for bch in 0..n {
                for c in 0..co {
                    let base = (bch * co + c) * plane;
                    let mut acc = 0.0;
                    for k in 0..plane {
                        acc += dzd[base + k];
                    }
                    gbd[c] += acc;
                }
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut DetRng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform(bound);
    }
    t
}

fn init_bias(out: usize, fan_in: usize, rng: &mut DetRng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(&[out]);
    for v in t.data_mut() {
        *v = rng.uniform(bound);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = DetRng::new(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform(1.0);
        }
        t
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = filled(&[1, 1, 3, 3], 1);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &w, 0, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn encoder_shape_chain_on_60() {
        // stride-2 chain with the benchmark kernel sizes
        let mut n = 60;
        for (k, p) in [(5, 0), (3, 1), (3, 1), (3, 1), (2, 1)] {
            n = conv_output_size(n, k, p, 2);
        }
        assert_eq!(n, 3);
        // decoder chain back to 60
        let mut m = 3;
        for (k, p) in [(2, 1), (3, 1), (4, 1), (4, 0), (4, 1)] {
            m = convtr_output_size(m, k, p, 2);
        }
        assert_eq!(m, 60);
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        // <conv(x), y> == <x, convtr(y)> with shared kernel, no bias
        let x = filled(&[2, 3, 9, 9], 5);
        let w_conv = filled(&[4, 3, 3, 3], 6); // (Co,Ci,K,K)
        let y_shape = conv2d_forward(&x, &w_conv, 1, 2).unwrap();
        let y = filled(y_shape.shape(), 7);
        // transpose kernel layout (Ci=4 -> Co=3)
        let mut w_tr = Tensor::zeros(&[4, 3, 3, 3]);
        for o in 0..4 {
            for c in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let src = ((o * 3 + c) * 3 + ky) * 3 + kx;
                        let dst = ((o * 3 + c) * 3 + ky) * 3 + kx;
                        w_tr.data_mut()[dst] = w_conv.data()[src];
                    }
                }
            }
        }
        let cx = conv2d_forward(&x, &w_conv, 1, 2).unwrap();
        let ty = convtr2d_forward(&y, &w_tr, 1, 2).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn activations_behave_at_zero() {
        assert_eq!(relu(-2.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
        // ELU is continuous and C1 at 0
        let eps = 1e-8;
        assert!((elu(eps) - elu(-eps)).abs() < 1e-7);
        assert!((elu_grad(elu(eps)) - elu_grad(elu(-eps))).abs() < 1e-7);
        assert!((elu(-1e9) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = filled(&[1, 2, 6, 6], 11);
        let mut rng = DetRng::new(12);
        let layer = Layer::conv2d(2, 3, 3, 1, 2, Activation::Elu, &mut rng);
        layer_fd_check(layer, x, 1e-6);
    }

    #[test]
    fn convtr_gradients_match_finite_differences() {
        let x = filled(&[1, 3, 4, 4], 21);
        let mut rng = DetRng::new(22);
        let layer = Layer::convtr2d(3, 2, 4, 1, 2, Activation::Elu, &mut rng);
        layer_fd_check(layer, x, 1e-6);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let x = filled(&[3, 7], 31);
        let mut rng = DetRng::new(32);
        let layer = Layer::linear(7, 4, Activation::None, &mut rng);
        layer_fd_check(layer, x, 1e-8);
    }

    /// Quadratic loss on the layer output; central differences are exact for
    /// quadratics up to round-off.
    fn layer_fd_check(mut layer: Layer, x: Tensor, tol: f64) {
        let target = filled(&layer.forward(&x).unwrap().shape().to_vec(), 999);
        let loss = |layer: &Layer, x: &Tensor| -> f64 {
            let y = layer.forward(x).unwrap();
            y.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        // backprop
        layer.zero_grads();
        let y = layer.forward(&x).unwrap();
        let mut dy = Tensor::zeros(y.shape());
        for ((g, &yv), &tv) in dy.data_mut().iter_mut().zip(y.data()).zip(target.data()) {
            *g = 2.0 * (yv - tv);
        }
        let dx = layer.backward(&x, &y, &dy).unwrap();

        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1.0);
            max_err = max_err.max((analytic - fd).abs() / denom);
        };
        for i in 0..layer.w.len() {
            let orig = layer.w.data()[i];
            layer.w.data_mut()[i] = orig + h;
            let lp = loss(&layer, &x);
            layer.w.data_mut()[i] = orig - h;
            let lm = loss(&layer, &x);
            layer.w.data_mut()[i] = orig;
            check(layer.gw.data()[i], lp, lm);
        }
        for i in 0..layer.b.len() {
            let orig = layer.b.data()[i];
            layer.b.data_mut()[i] = orig + h;
            let lp = loss(&layer, &x);
            layer.b.data_mut()[i] = orig - h;
            let lm = loss(&layer, &x);
            layer.b.data_mut()[i] = orig;
            check(layer.gb.data()[i], lp, lm);
        }
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            xp.data_mut()[i] = orig + h;
            let lp = loss(&layer, &xp);
            xp.data_mut()[i] = orig - h;
            let lm = loss(&layer, &xp);
            xp.data_mut()[i] = orig;
            check(dx.data()[i], lp, lm);
        }
        assert!(max_err < tol, "max relative gradient error {max_err}");
    }
}
