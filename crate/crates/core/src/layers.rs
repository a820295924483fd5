//! Full-precision layers: PReLU/ReLU, batch norm, float convolution and the
//! linear classifier.

use rand::Rng;

use crate::conv::{float_conv, float_conv_backward, ConvGeometry};
use crate::error::{Error, Result};
use crate::param::{join, ParamKind, Parameterized, SlotMut, SlotRef};
use crate::tensor::FloatTensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const PRELU_INIT: f32 = 0.25;

fn missing_cache(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a cached forward pass"))
}

/// `x` if `x >= 0` else `slope[c] · x`, per channel of an NCHW tensor.
pub fn prelu(x: &FloatTensor, slopes: &[f32]) -> Result<FloatTensor> {
    let [_, c, h, w] = x.dims4()?;
    if slopes.len() != c {
        return Err(Error::dim(format!("{} slopes for {c} channels", slopes.len())));
    }
    let plane = h * w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v >= 0.0 { v } else { slopes[(i / plane) % c] * v })
        .collect();
    Ok(FloatTensor::from_vec(x.shape().to_vec(), data))
}

/// Returns `(grad_input, grad_slopes)`.
pub fn prelu_backward(x: &FloatTensor, slopes: &[f32], grad: &FloatTensor) -> Result<(FloatTensor, Vec<f32>)> {
    x.check_same_shape(grad)?;
    let [_, c, h, w] = x.dims4()?;
    let plane = h * w;
    let mut gs = vec![0.0; c];
    let mut gx = vec![0.0; x.len()];
    for (i, ((&v, &g), o)) in x.data().iter().zip(grad.data()).zip(gx.iter_mut()).enumerate() {
        let ch = (i / plane) % c;
        if v >= 0.0 {
            *o = g;
        } else {
            *o = slopes[ch] * g;
            gs[ch] += v * g;
        }
    }
    Ok((FloatTensor::from_vec(x.shape().to_vec(), gx), gs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActivationKind {
    PRelu,
    Relu,
}

/// Channel-wise PReLU, or plain ReLU (slope pinned at 0, not trainable).
#[derive(Clone, Debug)]
pub struct Activation {
    kind: ActivationKind,
    slopes: FloatTensor,
    grad: Vec<f32>,
    cache: Option<FloatTensor>,
}

impl Activation {
    pub fn new(kind: ActivationKind, channels: usize) -> Self {
        let init = match kind {
            ActivationKind::PRelu => PRELU_INIT,
            ActivationKind::Relu => 0.0,
        };
        Self {
            kind,
            slopes: FloatTensor::full(&[channels], init),
            grad: vec![0.0; channels],
            cache: None,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn slopes(&self) -> &[f32] {
        self.slopes.data()
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ActivationKind::PRelu => self.slopes.len(),
            ActivationKind::Relu => 0,
        }
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        prelu(x, self.slopes.data())
    }

    pub fn forward_train(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        let y = prelu(x, self.slopes.data())?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("activation"))?;
        let (gx, gs) = prelu_backward(&x, self.slopes.data(), grad)?;
        if self.kind == ActivationKind::PRelu {
            self.grad.iter_mut().zip(gs).for_each(|(a, b)| *a += b);
        }
        Ok(gx)
    }
}

impl Parameterized for Activation {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        if self.kind == ActivationKind::PRelu {
            f(
                &join(prefix, "slope"),
                SlotRef::Float {
                    value: &self.slopes,
                    kind: ParamKind::Float,
                    decay: false,
                },
            );
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        if self.kind == ActivationKind::PRelu {
            f(
                &join(prefix, "slope"),
                SlotMut::Float {
                    value: &mut self.slopes,
                    grad: &mut self.grad,
                    kind: ParamKind::Float,
                    decay: false,
                },
            );
        }
    }
}

/// Cached values of a training-mode batch norm pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: FloatTensor,
    pub inv_std: Vec<f32>,
}

/// Batch statistics per channel over (N, H, W); biased variance.
fn channel_stats(x: &FloatTensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let [n, c, h, w] = x.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
        mean[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
        let mu = mean[i % c];
        var[i % c] += chunk.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    Ok((
        mean.into_iter().map(|v| v as f32).collect(),
        var.into_iter().map(|v| v as f32).collect(),
    ))
}

/// Training-mode batch norm. Returns `(y, cache, batch_mean, batch_var)`.
pub fn batch_norm_train(
    x: &FloatTensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(FloatTensor, BnCache, Vec<f32>, Vec<f32>)> {
    let [_, c, h, w] = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim("batch norm parameters do not match channels"));
    }
    let (mean, var) = channel_stats(x)?;
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let plane = h * w;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (i, ((src, xh), dst)) in x
        .data()
        .chunks_exact(plane)
        .zip(xhat.chunks_exact_mut(plane))
        .zip(y.chunks_exact_mut(plane))
        .enumerate()
    {
        let ch = i % c;
        for ((&v, o), d) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
            *o = (v - mean[ch]) * inv_std[ch];
            *d = *o * gamma[ch] + beta[ch];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        FloatTensor::from_vec(shape.clone(), y),
        BnCache {
            xhat: FloatTensor::from_vec(shape, xhat),
            inv_std,
        },
        mean,
        var,
    ))
}

pub fn batch_norm_eval(
    x: &FloatTensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<FloatTensor> {
    let [_, c, h, w] = x.dims4()?;
    if gamma.len() != c {
        return Err(Error::dim("batch norm parameters do not match channels"));
    }
    let plane = h * w;
    let scale: Vec<f32> = (0..c).map(|i| gamma[i] / (running_var[i] + eps).sqrt()).collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            (v - running_mean[ch]) * scale[ch] + beta[ch]
        })
        .collect();
    Ok(FloatTensor::from_vec(x.shape().to_vec(), data))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(
    cache: &BnCache,
    gamma: &[f32],
    grad: &FloatTensor,
) -> Result<(FloatTensor, Vec<f32>, Vec<f32>)> {
    cache.xhat.check_same_shape(grad)?;
    let [n, c, h, w] = grad.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut sum_g = vec![0.0f32; c];
    let mut sum_gx = vec![0.0f32; c];
    for (i, (g, xh)) in grad
        .data()
        .chunks_exact(plane)
        .zip(cache.xhat.data().chunks_exact(plane))
        .enumerate()
    {
        for (&gv, &xv) in g.iter().zip(xh) {
            sum_g[i % c] += gv;
            sum_gx[i % c] += gv * xv;
        }
    }
    let mut gx = vec![0.0; grad.len()];
    for (i, ((g, xh), o)) in grad
        .data()
        .chunks_exact(plane)
        .zip(cache.xhat.data().chunks_exact(plane))
        .zip(gx.chunks_exact_mut(plane))
        .enumerate()
    {
        let ch = i % c;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for ((&gv, &xv), ov) in g.iter().zip(xh).zip(o.iter_mut()) {
            *ov = k * (m * gv - sum_g[ch] - xv * sum_gx[ch]);
        }
    }
    Ok((FloatTensor::from_vec(grad.shape().to_vec(), gx), sum_gx, sum_g))
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: FloatTensor,
    beta: FloatTensor,
    running_mean: FloatTensor,
    running_var: FloatTensor,
    grad_gamma: Vec<f32>,
    grad_beta: Vec<f32>,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: FloatTensor::full(&[channels], 1.0),
            beta: FloatTensor::zeros(&[channels]),
            running_mean: FloatTensor::zeros(&[channels]),
            running_var: FloatTensor::full(&[channels], 1.0),
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma_mut(&mut self) -> &mut [f32] {
        self.gamma.data_mut()
    }

    pub fn beta_mut(&mut self) -> &mut [f32] {
        self.beta.data_mut()
    }

    pub fn running_mean(&self) -> &[f32] {
        self.running_mean.data()
    }

    pub fn running_var(&self) -> &[f32] {
        self.running_var.data()
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        batch_norm_eval(
            x,
            self.gamma.data(),
            self.beta.data(),
            self.running_mean.data(),
            self.running_var.data(),
            BN_EPS,
        )
    }

    /// Normalizes with batch statistics and folds them into the running
    /// statistics with momentum [`BN_MOMENTUM`] (unbiased variance).
    pub fn forward_train(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        let (y, cache, mean, var) = batch_norm_train(x, self.gamma.data(), self.beta.data(), BN_EPS)?;
        let [n, _, h, w] = x.dims4()?;
        let m = n * h * w;
        let unbias = if m > 1 { m as f32 / (m - 1) as f32 } else { 1.0 };
        for (r, v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batch norm"))?;
        let (gx, gg, gb) = batch_norm_backward(&cache, self.gamma.data(), grad)?;
        self.grad_gamma.iter_mut().zip(gg).for_each(|(a, b)| *a += b);
        self.grad_beta.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        Ok(gx)
    }
}

impl Parameterized for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        let float = |value| SlotRef::Float {
            value,
            kind: ParamKind::Float,
            decay: false,
        };
        let buffer = |value| SlotRef::Float {
            value,
            kind: ParamKind::Buffer,
            decay: false,
        };
        f(&join(prefix, "gamma"), float(&self.gamma));
        f(&join(prefix, "beta"), float(&self.beta));
        f(&join(prefix, "running_mean"), buffer(&self.running_mean));
        f(&join(prefix, "running_var"), buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(
            &join(prefix, "gamma"),
            SlotMut::Float {
                value: &mut self.gamma,
                grad: &mut self.grad_gamma,
                kind: ParamKind::Float,
                decay: false,
            },
        );
        f(
            &join(prefix, "beta"),
            SlotMut::Float {
                value: &mut self.beta,
                grad: &mut self.grad_beta,
                kind: ParamKind::Float,
                decay: false,
            },
        );
        f(
            &join(prefix, "running_mean"),
            SlotMut::Float {
                value: &mut self.running_mean,
                grad: &mut [],
                kind: ParamKind::Buffer,
                decay: false,
            },
        );
        f(
            &join(prefix, "running_var"),
            SlotMut::Float {
                value: &mut self.running_var,
                grad: &mut [],
                kind: ParamKind::Buffer,
                decay: false,
            },
        );
    }
}

/// Kaiming-uniform values: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> FloatTensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    FloatTensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Full-precision convolution (the stem).
#[derive(Clone, Debug)]
pub struct FloatConv {
    geom: ConvGeometry,
    weight: FloatTensor,
    grad: Vec<f32>,
    cache: Option<FloatTensor>,
}

impl FloatConv {
    pub fn new(geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        let weight = kaiming_uniform(rng, &geom.weight_shape(), geom.filter_len());
        Self::from_weight(geom, weight)
    }

    pub fn from_weight(geom: ConvGeometry, weight: FloatTensor) -> Self {
        let n = weight.len();
        Self {
            geom,
            weight,
            grad: vec![0.0; n],
            cache: None,
        }
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn weight(&self) -> &FloatTensor {
        &self.weight
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        float_conv(x, &self.weight, &self.geom)
    }

    pub fn forward_train(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        let y = float_conv(x, &self.weight, &self.geom)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("float conv"))?;
        let (gx, gw) = float_conv_backward(&x, &self.weight, grad, &self.geom)?;
        self.grad.iter_mut().zip(gw.data()).for_each(|(a, b)| *a += b);
        Ok(gx)
    }
}

impl Parameterized for FloatConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(
            &join(prefix, "weight"),
            SlotRef::Float {
                value: &self.weight,
                kind: ParamKind::Float,
                decay: true,
            },
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(
            &join(prefix, "weight"),
            SlotMut::Float {
                value: &mut self.weight,
                grad: &mut self.grad,
                kind: ParamKind::Float,
                decay: true,
            },
        );
    }
}

/// Fully connected layer, `y = x·Wᵀ + b` on `(n, in)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: FloatTensor,
    bias: FloatTensor,
    grad_w: Vec<f32>,
    grad_b: Vec<f32>,
    cache: Option<FloatTensor>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = kaiming_uniform(rng, &[outputs, inputs], inputs);
        Self {
            weight,
            bias: FloatTensor::zeros(&[outputs]),
            grad_w: vec![0.0; outputs * inputs],
            grad_b: vec![0.0; outputs],
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &FloatTensor {
        &self.weight
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let (inputs, outputs) = (self.inputs(), self.outputs());
        let n = match *x.shape() {
            [n, i] if i == inputs => n,
            _ => {
                return Err(Error::dim(format!(
                    "linear layer expects (n, {inputs}), got {:?}",
                    x.shape()
                )))
            }
        };
        let w = self.weight.data();
        let b = self.bias.data();
        let mut y = vec![0.0; n * outputs];
        for (row, out) in x.data().chunks_exact(inputs).zip(y.chunks_exact_mut(outputs)) {
            for (o, (wr, &bo)) in out.iter_mut().zip(w.chunks_exact(inputs).zip(b)) {
                *o = bo + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        Ok(FloatTensor::from_vec(vec![n, outputs], y))
    }

    pub fn forward_train(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear"))?;
        let (inputs, outputs) = (self.inputs(), self.outputs());
        let n = x.shape()[0];
        if grad.shape() != [n, outputs] {
            return Err(Error::dim("linear backward: gradient shape mismatch"));
        }
        let w = self.weight.data();
        let mut gx = vec![0.0; n * inputs];
        for ((xr, gr), gxr) in x
            .data()
            .chunks_exact(inputs)
            .zip(grad.data().chunks_exact(outputs))
            .zip(gx.chunks_exact_mut(inputs))
        {
            for (o, &g) in gr.iter().enumerate() {
                self.grad_b[o] += g;
                let wrow = &w[o * inputs..(o + 1) * inputs];
                let gwrow = &mut self.grad_w[o * inputs..(o + 1) * inputs];
                for i in 0..inputs {
                    gwrow[i] += g * xr[i];
                    gxr[i] += g * wrow[i];
                }
            }
        }
        Ok(FloatTensor::from_vec(vec![n, inputs], gx))
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(
            &join(prefix, "weight"),
            SlotRef::Float {
                value: &self.weight,
                kind: ParamKind::Float,
                decay: true,
            },
        );
        f(
            &join(prefix, "bias"),
            SlotRef::Float {
                value: &self.bias,
                kind: ParamKind::Float,
                decay: false,
            },
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(
            &join(prefix, "weight"),
            SlotMut::Float {
                value: &mut self.weight,
                grad: &mut self.grad_w,
                kind: ParamKind::Float,
                decay: true,
            },
        );
        f(
            &join(prefix, "bias"),
            SlotMut::Float {
                value: &mut self.bias,
                grad: &mut self.grad_b,
                kind: ParamKind::Float,
                decay: false,
            },
        );
    }
}
