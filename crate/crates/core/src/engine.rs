//! Deterministic forward/backward passes.
//!
//! Every loop runs in a fixed order with plain f32 accumulation (f64 only for
//! batch statistics and per-channel gradient reductions), so repeated runs on
//! the same inputs are bit-identical. Nothing in here scrubs NaN or Inf —
//! corrupted values propagate exactly as IEEE arithmetic dictates, which is
//! what fault injection relies on. Only EDAC layers sanitize.

use crate::error::{Error, Result};
use crate::harden;
use crate::layer::{Layer, LayerParams, LayerSpec};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Epsilon added to the variance before the square root in BatchNorm.
pub const BN_EPS: f32 = 1e-5;

/// Which statistics BatchNorm layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStats {
    /// Stored running statistics (inference).
    Running,
    /// Statistics of the current batch (training).
    Batch,
}

/// Per-layer bookkeeping recorded during a cached forward pass.
enum Aux {
    None,
    /// Flat input index of the winning element for every pooled output.
    Pool { argmax: Vec<usize> },
    /// Batch mean/variance actually used for normalization (Batch mode only).
    Norm { mean: Vec<f32>, var: Vec<f32> },
}

/// Activations captured by [`forward_cached`], consumed by [`backward`].
pub struct ForwardCache {
    fingerprint: u64,
    stats: BnStats,
    /// `inputs[l]` is the batch fed into layer `l`.
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    logits_shape: Vec<usize>,
}

impl ForwardCache {
    pub fn bn_stats(&self) -> BnStats {
        self.stats
    }

    /// Input batch of layer `l` (so layer `l-1`'s raw output).
    pub fn layer_input(&self, l: usize) -> &Tensor {
        &self.inputs[l]
    }
}

/// Gradients for every layer, indexed in model order.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub enum LayerGrads {
    Conv2D {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    FullyConnected {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    BatchNorm {
        scale: Tensor,
        shift: Tensor,
    },
    None,
}

/// Inference pass: logits for a `[N, C, H, W]` batch, BatchNorm on running
/// statistics, no activation capture.
pub fn forward(model: &ModelGraph, batch: &Tensor) -> Result<Tensor> {
    check_batch_shape(model, batch)?;
    let mut cur = batch.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        cur = layer_forward(l, layer, &cur, BnStats::Running, None)?;
    }
    Ok(cur)
}

/// Forward pass that records everything [`backward`] needs.
pub fn forward_cached(
    model: &ModelGraph,
    batch: &Tensor,
    stats: BnStats,
) -> Result<(Tensor, ForwardCache)> {
    check_batch_shape(model, batch)?;
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut aux = Vec::with_capacity(model.layers.len());
    let mut cur = batch.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let mut a = Aux::None;
        let out = layer_forward(l, layer, &cur, stats, Some(&mut a))?;
        inputs.push(cur);
        aux.push(a);
        cur = out;
    }
    let cache = ForwardCache {
        fingerprint: model.fingerprint(),
        stats,
        inputs,
        aux,
        logits_shape: cur.shape().to_vec(),
    };
    Ok((cur, cache))
}

/// Backpropagates `output_grad` (same shape as the logits) through the model,
/// producing parameter gradients. The cache must come from `forward_cached`
/// on this exact model state.
pub fn backward(
    model: &ModelGraph,
    cache: &ForwardCache,
    output_grad: &Tensor,
) -> Result<GradientSet> {
    if cache.fingerprint != model.fingerprint() {
        return Err(Error::StaleCache(
            "cache was recorded against different parameters".into(),
        ));
    }
    if output_grad.shape() != cache.logits_shape {
        return Err(Error::StaleCache(format!(
            "output gradient shape {:?} does not match logits shape {:?}",
            output_grad.shape(),
            cache.logits_shape
        )));
    }
    let mut grads = vec![];
    let mut g = output_grad.clone();
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let (gin, lg) = layer_backward(l, layer, &cache.inputs[l], &cache.aux[l], &g, cache.stats)?;
        grads.push(lg);
        g = gin;
    }
    grads.reverse();
    Ok(GradientSet { layers: grads })
}

/// In-place SGD update: `w -= lr * g` over every trainable tensor.
pub fn sgd_step(model: &mut ModelGraph, grads: &GradientSet, lr: f32) -> Result<()> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient set covers {} layers, model has {}",
            grads.layers.len(),
            model.layers.len()
        )));
    }
    for (l, (layer, lg)) in model.layers.iter_mut().zip(&grads.layers).enumerate() {
        match (&mut layer.params, lg) {
            (LayerParams::Conv2D { weight, bias }, LayerGrads::Conv2D { weight: gw, bias: gb })
            | (
                LayerParams::FullyConnected { weight, bias },
                LayerGrads::FullyConnected { weight: gw, bias: gb },
            ) => {
                axpy(weight, gw, -lr)?;
                match (bias, gb) {
                    (Some(b), Some(g)) => axpy(b, g, -lr)?,
                    (None, None) => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "layer {l}: bias gradient does not match bias presence"
                        )))
                    }
                }
            }
            (
                LayerParams::BatchNorm { scale, shift, .. },
                LayerGrads::BatchNorm { scale: gs, shift: gh },
            ) => {
                axpy(scale, gs, -lr)?;
                axpy(shift, gh, -lr)?;
            }
            (LayerParams::Edac { .. }, LayerGrads::None)
            | (LayerParams::None, LayerGrads::None) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "layer {l}: gradient kind does not match layer parameters"
                )))
            }
        }
    }
    Ok(())
}

/// Folds the batch statistics recorded in `cache` into the model's running
/// mean/variance: `running = (1 - momentum)·running + momentum·batch`, with
/// the unbiased variance estimate.
pub fn update_running_stats(
    model: &mut ModelGraph,
    cache: &ForwardCache,
    momentum: f32,
) -> Result<()> {
    if cache.stats != BnStats::Batch {
        return Err(Error::StaleCache(
            "running statistics can only be updated from a Batch-mode pass".into(),
        ));
    }
    if cache.fingerprint != model.fingerprint() {
        // Normal during training: the cache predates the SGD step. Parameter
        // updates never touch the recorded batch statistics, so consuming
        // them is still sound; only the layer list must line up.
        if cache.inputs.len() != model.layers.len() {
            return Err(Error::StaleCache(
                "cache layer count does not match model".into(),
            ));
        }
    }
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let LayerParams::BatchNorm {
            running_mean,
            running_var,
            ..
        } = &mut layer.params
        else {
            continue;
        };
        let Aux::Norm { mean, var } = &cache.aux[l] else {
            return Err(Error::StaleCache(format!(
                "no batch statistics recorded for BatchNorm layer {l}"
            )));
        };
        let shape = cache.inputs[l].shape();
        let nst: usize = shape.iter().product::<usize>() / shape[1];
        if nst < 2 {
            return Err(Error::InvalidArgument(format!(
                "layer {l}: {nst} value(s) per channel is too few for an unbiased variance"
            )));
        }
        let correction = nst as f32 / (nst - 1) as f32;
        for c in 0..mean.len() {
            let rm = &mut running_mean.data_mut()[c];
            *rm = (1.0 - momentum) * *rm + momentum * mean[c];
            let rv = &mut running_var.data_mut()[c];
            *rv = (1.0 - momentum) * *rv + momentum * var[c] * correction;
        }
    }
    Ok(())
}

fn axpy(x: &mut Tensor, g: &Tensor, alpha: f32) -> Result<()> {
    if x.shape() != g.shape() {
        return Err(Error::InvalidArgument(format!(
            "gradient shape {:?} does not match parameter shape {:?}",
            g.shape(),
            x.shape()
        )));
    }
    for (w, gv) in x.data_mut().iter_mut().zip(g.data()) {
        *w += alpha * gv;
    }
    Ok(())
}

fn check_batch_shape(model: &ModelGraph, batch: &Tensor) -> Result<()> {
    let s = batch.shape();
    if s.len() != 4 || s[1..] != model.input_shape {
        return Err(Error::InvalidArgument(format!(
            "batch shape {s:?} does not match model input [N, {}, {}, {}]",
            model.input_shape[0], model.input_shape[1], model.input_shape[2]
        )));
    }
    Ok(())
}

fn shape_err(l: usize, layer: &Layer, detail: String) -> Error {
    Error::ShapeMismatch {
        layer: l,
        kind: layer.spec.kind_name(),
        detail,
    }
}

/// Applies one layer to a batch. `aux` captures backward bookkeeping when
/// provided.
fn layer_forward(
    l: usize,
    layer: &Layer,
    input: &Tensor,
    stats: BnStats,
    aux: Option<&mut Aux>,
) -> Result<Tensor> {
    let sample_shape = &input.shape()[1..];
    let out_sample = layer
        .spec
        .output_shape(sample_shape)
        .map_err(|d| shape_err(l, layer, d))?;
    let n = input.shape()[0];
    let mut out_shape = vec![n];
    out_shape.extend(out_sample);

    match (&layer.spec, &layer.params) {
        (LayerSpec::Conv2D { stride, padding, .. }, LayerParams::Conv2D { weight, bias }) => {
            Ok(conv_forward(input, weight, bias.as_ref(), *stride, *padding, &out_shape))
        }
        (LayerSpec::FullyConnected { .. }, LayerParams::FullyConnected { weight, bias }) => {
            Ok(fc_forward(input, weight, bias.as_ref(), &out_shape))
        }
        (LayerSpec::BatchNorm { channels }, LayerParams::BatchNorm { scale, shift, running_mean, running_var }) => {
            let (out, mean, var) = bn_forward(
                input,
                *channels,
                scale.data(),
                shift.data(),
                running_mean.data(),
                running_var.data(),
                stats,
            );
            if let Some(a) = aux {
                if stats == BnStats::Batch {
                    *a = Aux::Norm { mean, var };
                }
            }
            Ok(out)
        }
        (LayerSpec::ReLU, _) => {
            let mut out = input.clone();
            for v in out.data_mut() {
                // `< 0` keeps NaN (comparison is false) and -0.0 as-is.
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        (LayerSpec::MaxPool { window, stride }, _) => {
            let (out, argmax) = pool_forward(input, *window, *stride, &out_shape);
            if let Some(a) = aux {
                *a = Aux::Pool { argmax };
            }
            Ok(out)
        }
        (LayerSpec::Flatten, _) => input.reshaped(out_shape),
        (LayerSpec::Edac(spec), LayerParams::Edac { lower, upper }) => {
            harden::edac_apply(input, spec, lower.data(), upper.data())
        }
        _ => Err(Error::InvalidModel(format!(
            "layer {l}: parameters do not match a {} layer",
            layer.spec.kind_name()
        ))),
    }
}

fn layer_backward(
    l: usize,
    layer: &Layer,
    input: &Tensor,
    aux: &Aux,
    gout: &Tensor,
    stats: BnStats,
) -> Result<(Tensor, LayerGrads)> {
    match (&layer.spec, &layer.params) {
        (LayerSpec::Conv2D { stride, padding, .. }, LayerParams::Conv2D { weight, bias }) => {
            let (gin, gw, gb) = conv_backward(input, weight, bias.is_some(), *stride, *padding, gout);
            Ok((gin, LayerGrads::Conv2D { weight: gw, bias: gb }))
        }
        (LayerSpec::FullyConnected { .. }, LayerParams::FullyConnected { weight, bias }) => {
            let (gin, gw, gb) = fc_backward(input, weight, bias.is_some(), gout);
            Ok((gin, LayerGrads::FullyConnected { weight: gw, bias: gb }))
        }
        (
            LayerSpec::BatchNorm { channels },
            LayerParams::BatchNorm { scale, running_mean, running_var, .. },
        ) => {
            let (m, v): (&[f32], &[f32]) = match (stats, aux) {
                (BnStats::Batch, Aux::Norm { mean, var }) => (mean, var),
                (BnStats::Running, _) => (running_mean.data(), running_var.data()),
                (BnStats::Batch, _) => {
                    return Err(Error::StaleCache(format!(
                        "no batch statistics recorded for BatchNorm layer {l}"
                    )))
                }
            };
            let (gin, gs, gh) = bn_backward(input, *channels, scale.data(), m, v, gout, stats);
            Ok((gin, LayerGrads::BatchNorm { scale: gs, shift: gh }))
        }
        (LayerSpec::ReLU, _) => {
            let mut gin = gout.clone();
            for (g, &x) in gin.data_mut().iter_mut().zip(input.data()) {
                if x <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok((gin, LayerGrads::None))
        }
        (LayerSpec::MaxPool { .. }, _) => {
            let Aux::Pool { argmax } = aux else {
                return Err(Error::StaleCache(format!(
                    "no pooling indices recorded for MaxPool layer {l}"
                )));
            };
            let mut gin = Tensor::zeros(input.shape());
            for (o, &src) in argmax.iter().enumerate() {
                gin.data_mut()[src] += gout.data()[o];
            }
            Ok((gin, LayerGrads::None))
        }
        (LayerSpec::Flatten, _) => Ok((gout.reshaped(input.shape().to_vec())?, LayerGrads::None)),
        (LayerSpec::Edac(_), _) => Err(Error::Unsupported(
            "backward through an EDAC layer (hardened models are inference-only)".into(),
        )),
        _ => Err(Error::InvalidModel(format!(
            "layer {l}: parameters do not match a {} layer",
            layer.spec.kind_name()
        ))),
    }
}

fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let [n, ic, h, w] = four(input.shape());
    let [oc, _, kh, kw] = four(weight.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let wt = weight.data();
    let mut out = Tensor::zeros(out_shape);
    let o = out.data_mut();
    let p = padding as isize;
    for ni in 0..n {
        for oci in 0..oc {
            let b = bias.map_or(0.0, |b| b.data()[oci]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ici in 0..ic {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - p;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - p;
                                // Out-of-bounds taps read the zero padding;
                                // multiplying (not skipping) keeps Inf/NaN
                                // weights poisoning border sums like a
                                // materialized padded input would.
                                let xv = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                                {
                                    x[((ni * ic + ici) * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                };
                                acc += wt[((oci * ic + ici) * kh + ky) * kw + kx] * xv;
                            }
                        }
                    }
                    o[((ni * oc + oci) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    stride: usize,
    padding: usize,
    gout: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [n, ic, h, w] = four(input.shape());
    let [oc, _, kh, kw] = four(weight.shape());
    let [_, _, oh, ow] = four(gout.shape());
    let x = input.data();
    let wt = weight.data();
    let go = gout.data();
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = has_bias.then(|| Tensor::zeros(&[oc]));
    let p = padding as isize;
    for ni in 0..n {
        for oci in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[((ni * oc + oci) * oh + oy) * ow + ox];
                    if let Some(gb) = &mut gb {
                        gb.data_mut()[oci] += g;
                    }
                    for ici in 0..ic {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((ni * ic + ici) * h + iy as usize) * w + ix as usize;
                                let wi = ((oci * ic + ici) * kh + ky) * kw + kx;
                                gw.data_mut()[wi] += g * x[xi];
                                gin.data_mut()[xi] += g * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

fn fc_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, out_shape: &[usize]) -> Tensor {
    let n = input.shape()[0];
    let inf = input.shape()[1];
    let outf = weight.shape()[0];
    let x = input.data();
    let wt = weight.data();
    let mut out = Tensor::zeros(out_shape);
    let o = out.data_mut();
    for ni in 0..n {
        for oi in 0..outf {
            let mut acc = bias.map_or(0.0, |b| b.data()[oi]);
            let row = &wt[oi * inf..(oi + 1) * inf];
            for (wv, xv) in row.iter().zip(&x[ni * inf..(ni + 1) * inf]) {
                acc += wv * xv;
            }
            o[ni * outf + oi] = acc;
        }
    }
    out
}

fn fc_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    gout: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let n = input.shape()[0];
    let inf = input.shape()[1];
    let outf = weight.shape()[0];
    let x = input.data();
    let wt = weight.data();
    let go = gout.data();
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = has_bias.then(|| Tensor::zeros(&[outf]));
    for ni in 0..n {
        for oi in 0..outf {
            let g = go[ni * outf + oi];
            if let Some(gb) = &mut gb {
                gb.data_mut()[oi] += g;
            }
            for ii in 0..inf {
                gw.data_mut()[oi * inf + ii] += g * x[ni * inf + ii];
                gin.data_mut()[ni * inf + ii] += g * wt[oi * inf + ii];
            }
        }
    }
    (gin, gw, gb)
}

/// Iterates `(channel, flat_index)` over a `[N, C, ...]` tensor in storage
/// order, calling `f` with each element's channel and position.
fn per_channel<F: FnMut(usize, usize)>(shape: &[usize], mut f: F) {
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                f(ci, base + s);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_forward(
    input: &Tensor,
    channels: usize,
    scale: &[f32],
    shift: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    stats: BnStats,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let x = input.data();
    let (mean, var) = match stats {
        BnStats::Running => (running_mean.to_vec(), running_var.to_vec()),
        BnStats::Batch => {
            let nst = (x.len() / channels) as f64;
            let mut sums = vec![0.0f64; channels];
            per_channel(input.shape(), |c, i| sums[c] += x[i] as f64);
            let mean: Vec<f32> = sums.iter().map(|s| (s / nst) as f32).collect();
            let mut sq = vec![0.0f64; channels];
            per_channel(input.shape(), |c, i| {
                let d = (x[i] - mean[c]) as f64;
                sq[c] += d * d;
            });
            let var: Vec<f32> = sq.iter().map(|s| (s / nst) as f32).collect();
            (mean, var)
        }
    };
    let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = input.clone();
    let o = out.data_mut();
    per_channel(input.shape(), |c, i| {
        o[i] = scale[c] * ((o[i] - mean[c]) * inv[c]) + shift[c];
    });
    (out, mean, var)
}

fn bn_backward(
    input: &Tensor,
    channels: usize,
    scale: &[f32],
    mean: &[f32],
    var: &[f32],
    gout: &Tensor,
    stats: BnStats,
) -> (Tensor, Tensor, Tensor) {
    let x = input.data();
    let go = gout.data();
    let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut gscale = vec![0.0f64; channels];
    let mut gshift = vec![0.0f64; channels];
    per_channel(input.shape(), |c, i| {
        let xhat = (x[i] - mean[c]) * inv[c];
        gscale[c] += (go[i] * xhat) as f64;
        gshift[c] += go[i] as f64;
    });
    let mut gin = Tensor::zeros(input.shape());
    match stats {
        BnStats::Running => {
            // Statistics are constants here, so the chain is elementwise.
            let g = gin.data_mut();
            per_channel(input.shape(), |c, i| {
                g[i] = go[i] * scale[c] * inv[c];
            });
        }
        BnStats::Batch => {
            // The batch mean/variance are themselves functions of x.
            let nst = (x.len() / channels) as f64;
            let mut gvar = vec![0.0f64; channels];
            let mut gmean = vec![0.0f64; channels];
            let mut dsum = vec![0.0f64; channels];
            per_channel(input.shape(), |c, i| {
                let dxhat = (go[i] * scale[c]) as f64;
                let d = (x[i] - mean[c]) as f64;
                let inv3 = (inv[c] as f64).powi(3);
                gvar[c] += dxhat * d * -0.5 * inv3;
                gmean[c] += -dxhat * inv[c] as f64;
                dsum[c] += d;
            });
            for c in 0..channels {
                gmean[c] += gvar[c] * -2.0 * dsum[c] / nst;
            }
            let g = gin.data_mut();
            per_channel(input.shape(), |c, i| {
                let dxhat = (go[i] * scale[c]) as f64;
                let d = (x[i] - mean[c]) as f64;
                g[i] = (dxhat * inv[c] as f64 + gvar[c] * 2.0 * d / nst + gmean[c] / nst) as f32;
            });
        }
    }
    let gs = Tensor::new(vec![channels], gscale.iter().map(|&v| v as f32).collect()).unwrap();
    let gh = Tensor::new(vec![channels], gshift.iter().map(|&v| v as f32).collect()).unwrap();
    (gin, gs, gh)
}

fn pool_forward(input: &Tensor, window: usize, stride: usize, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = four(input.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut out = Tensor::zeros(out_shape);
    let o = out.data_mut();
    let mut argmax = vec![0usize; o.len()];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = ((ni * c + ci) * h + oy * stride) * w + ox * stride;
                    'win: for ky in 0..window {
                        for kx in 0..window {
                            let xi = ((ni * c + ci) * h + oy * stride + ky) * w + ox * stride + kx;
                            let v = x[xi];
                            if v.is_nan() {
                                // NaN poisons the window; stop scanning so
                                // the result does not depend on later values.
                                best = v;
                                bi = xi;
                                break 'win;
                            }
                            if v > best {
                                best = v;
                                bi = xi;
                            }
                        }
                    }
                    let oi = ((ni * c + ci) * oh + oy) * ow + ox;
                    o[oi] = best;
                    argmax[oi] = bi;
                }
            }
        }
    }
    (out, argmax)
}

fn four(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::build;

    fn batch(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// 1x1 input, 1x1 kernel: conv reduces to y = w·x + b.
    #[test]
    fn conv_scalar_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = build::conv2d(&mut rng, 1, 1, 1, 1, 0);
        if let LayerParams::Conv2D { weight, bias } = &mut layer.params {
            weight.data_mut()[0] = 3.0;
            bias.as_mut().unwrap().data_mut()[0] = -1.0;
        }
        let model = ModelGraph {
            layers: vec![layer],
            input_shape: [1, 1, 1],
            num_classes: 2,
        };
        let out = forward_raw(&model, &batch(&[1, 1, 1, 1], vec![2.0]));
        assert_eq!(out.data(), &[5.0]);
    }

    // Small helper for tests that drive a model whose output is not logits.
    fn forward_raw(model: &ModelGraph, batch: &Tensor) -> Tensor {
        let mut cur = batch.clone();
        for (l, layer) in model.layers.iter().enumerate() {
            cur = layer_forward(l, layer, &cur, BnStats::Running, None).unwrap();
        }
        cur
    }

    #[test]
    fn conv_known_3x3() {
        // 3x3 input, 2x2 kernel of ones, stride 1, no padding, no bias:
        // each output is the sum of a 2x2 patch.
        let layer = Layer::new(
            LayerSpec::Conv2D {
                in_channels: 1,
                out_channels: 1,
                kernel_h: 2,
                kernel_w: 2,
                stride: 1,
                padding: 0,
                has_bias: false,
            },
            LayerParams::Conv2D {
                weight: Tensor::filled(&[1, 1, 2, 2], 1.0),
                bias: None,
            },
        );
        let model = ModelGraph {
            layers: vec![layer],
            input_shape: [1, 3, 3],
            num_classes: 2,
        };
        let x = batch(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect());
        let out = forward_raw(&model, &x);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_padding_poisons_border_with_inf_weight() {
        // Inf weight times the zero padding is NaN at the borders, while the
        // interior stays finite: the padded multiply is materialized.
        let layer = Layer::new(
            LayerSpec::Conv2D {
                in_channels: 1,
                out_channels: 1,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: 1,
                has_bias: false,
            },
            LayerParams::Conv2D {
                weight: {
                    let mut w = Tensor::filled(&[1, 1, 3, 3], 1.0);
                    w.data_mut()[0] = f32::INFINITY;
                    w
                },
                bias: None,
            },
        );
        let model = ModelGraph {
            layers: vec![layer],
            input_shape: [1, 3, 3],
            num_classes: 2,
        };
        let x = batch(&[1, 1, 3, 3], vec![1.0; 9]);
        let out = forward_raw(&model, &x);
        assert!(out.data()[0].is_nan());
        assert!(out.data()[4].is_infinite());
    }

    #[test]
    fn relu_passes_nan_and_zeroes_negatives() {
        let model = ModelGraph {
            layers: vec![build::relu()],
            input_shape: [1, 1, 4],
            num_classes: 2,
        };
        let x = batch(&[1, 1, 1, 4], vec![-1.0, 2.0, f32::NAN, f32::NEG_INFINITY]);
        let out = forward_raw(&model, &x);
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[1], 2.0);
        assert!(out.data()[2].is_nan());
        assert_eq!(out.data()[3], 0.0);
    }

    #[test]
    fn maxpool_picks_max_and_poisons_on_nan() {
        let model = ModelGraph {
            layers: vec![build::max_pool(2, 2)],
            input_shape: [1, 2, 2],
            num_classes: 2,
        };
        let x = batch(&[1, 1, 2, 2], vec![1.0, 7.0, -3.0, 4.0]);
        assert_eq!(forward_raw(&model, &x).data(), &[7.0]);
        let x = batch(&[1, 1, 2, 2], vec![1.0, f32::NAN, -3.0, 4.0]);
        assert!(forward_raw(&model, &x).data()[0].is_nan());
    }

    #[test]
    fn bn_running_stats_normalize() {
        let layer = build::batch_norm(1);
        let model = ModelGraph {
            layers: vec![layer],
            input_shape: [1, 1, 2],
            num_classes: 2,
        };
        // scale 1, shift 0, mean 0, var 1 → y ≈ x / sqrt(1 + eps)
        let x = batch(&[1, 1, 1, 2], vec![1.0, -2.0]);
        let out = forward_raw(&model, &x);
        let expect = 1.0 / (1.0f32 + BN_EPS).sqrt();
        assert!((out.data()[0] - expect).abs() < 1e-7);
        assert!((out.data()[1] + 2.0 * expect).abs() < 1e-7);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let model = crate::model::ArchPreset::CnnBn.build([1, 12, 12], 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..2 * 144).map(|_| rng.random::<f32>()).collect();
        let x = batch(&[2, 1, 12, 12], data);
        let a = forward(&model, &x).unwrap();
        let b = forward(&model, &x).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut model = crate::model::ArchPreset::MlpSmall.build([1, 4, 4], 3, 3).unwrap();
        let x = batch(&[1, 1, 4, 4], vec![0.5; 16]);
        let (logits, cache) = forward_cached(&model, &x, BnStats::Running).unwrap();
        model.layers[1].xor_param_bit(0, 3).unwrap();
        let g = Tensor::filled(logits.shape(), 1.0);
        assert!(matches!(
            backward(&model, &cache, &g),
            Err(Error::StaleCache(_))
        ));
    }
}
