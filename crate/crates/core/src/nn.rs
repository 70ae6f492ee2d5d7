//! Fixed-architecture feed-forward networks with hand-derived backward
//! passes.
//!
//! No general autodiff graph: the layer set is closed (conv2d, relu,
//! average-pool, flatten, dense) and each layer implements its own
//! input/parameter gradients. Inputs are `[channels, height, width]` images;
//! the final layer must produce a rank-1 logit vector.
//!
//! Conventions:
//! * ReLU subgradient at exactly 0 is 0.
//! * Convolutions are valid (no padding) with floor output sizing.
//! * Average pooling tiles non-overlapping windows; trailing rows/columns
//!   that do not fill a window are dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of a [`LayerStack`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// Valid 2-D convolution; weight shape `[out_c, in_c, kh, kw]`.
    Conv2d {
        weight: Tensor,
        bias: Vec<f64>,
        stride: (usize, usize),
    },
    Relu,
    /// Non-overlapping average pooling with the given window.
    AvgPool { window: (usize, usize) },
    Flatten,
    /// Fully connected layer; weight shape `[out, in]`.
    Dense { weight: Tensor, bias: Vec<f64> },
}

/// Gradients of a layer's parameters, in the same layout as the layer.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[allow(clippy::needless_range_loop)] // indexed loops mirror the kernel math
impl Layer {
    /// Output shape for a given input shape, or an error when they do not
    /// compose.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
            } => {
                let ws = weight.shape();
                if ws.len() != 4 {
                    return Err(Error::Config("conv weight must be rank 4".into()));
                }
                let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                if bias.len() != oc {
                    return Err(Error::Config(format!(
                        "conv bias length {} does not match {oc} output channels",
                        bias.len()
                    )));
                }
                if input.len() != 3 || input[0] != ic {
                    return Err(Error::ShapeMismatch(format!(
                        "conv expects [{ic}, h, w] input, got {input:?}"
                    )));
                }
                let (h, w) = (input[1], input[2]);
                if kh > h || kw > w || stride.0 == 0 || stride.1 == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "conv kernel {kh}x{kw} stride {stride:?} does not fit {h}x{w} input"
                    )));
                }
                Ok(vec![oc, (h - kh) / stride.0 + 1, (w - kw) / stride.1 + 1])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::AvgPool { window } => {
                if input.len() != 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "avg-pool expects rank-3 input, got {input:?}"
                    )));
                }
                let (ph, pw) = *window;
                if ph == 0 || pw == 0 || ph > input[1] || pw > input[2] {
                    return Err(Error::ShapeMismatch(format!(
                        "pool window {window:?} does not fit {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / ph, input[2] / pw])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense { weight, bias } => {
                let ws = weight.shape();
                if ws.len() != 2 {
                    return Err(Error::Config("dense weight must be rank 2".into()));
                }
                if bias.len() != ws[0] {
                    return Err(Error::Config(format!(
                        "dense bias length {} does not match {} outputs",
                        bias.len(),
                        ws[0]
                    )));
                }
                if input != [ws[1]] {
                    return Err(Error::ShapeMismatch(format!(
                        "dense expects [{}] input, got {input:?}",
                        ws[1]
                    )));
                }
                Ok(vec![ws[0]])
            }
        }
    }

    fn forward(&self, input: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
            } => {
                let ws = weight.shape();
                let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let (sh, sw) = *stride;
                let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
                let mut out = Tensor::zeros(&[oc, oh, ow]);
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[o];
                            for i in 0..ic {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        acc += weight.data()
                                            [((o * ic + i) * kh + ky) * kw + kx]
                                            * input.at3(i, oy * sh + ky, ox * sw + kx);
                                    }
                                }
                            }
                            out.set3(o, oy, ox, acc);
                        }
                    }
                }
                out
            }
            Layer::Relu => input.map(|v| if v > 0.0 { v } else { 0.0 }),
            Layer::AvgPool { window } => {
                let (ph, pw) = *window;
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (oh, ow) = (h / ph, w / pw);
                let inv = 1.0 / (ph * pw) as f64;
                let mut out = Tensor::zeros(&[c, oh, ow]);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..ph {
                                for kx in 0..pw {
                                    acc += input.at3(ch, oy * ph + ky, ox * pw + kx);
                                }
                            }
                            out.set3(ch, oy, ox, acc * inv);
                        }
                    }
                }
                out
            }
            Layer::Flatten => input
                .reshaped(&[input.len()])
                .expect("flatten preserves volume"),
            Layer::Dense { weight, bias } => {
                let (out_n, in_n) = (weight.shape()[0], weight.shape()[1]);
                let mut out = vec![0.0; out_n];
                for (o, out_v) in out.iter_mut().enumerate() {
                    let row = &weight.data()[o * in_n..(o + 1) * in_n];
                    let mut acc = bias[o];
                    for (wv, xv) in row.iter().zip(input.data()) {
                        acc += wv * xv;
                    }
                    *out_v = acc;
                }
                Tensor::from_vec(&[out_n], out).expect("dense output length")
            }
        }
    }

    /// Gradient with respect to the layer input.
    fn backward_input(&self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d { weight, stride, .. } => {
                let ws = weight.shape();
                let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (sh, sw) = *stride;
                let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
                let mut gin = Tensor::zeros(input.shape());
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad_out.at3(o, oy, ox);
                            if g == 0.0 {
                                continue;
                            }
                            for i in 0..ic {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let idx = ((i * input.shape()[1]) + oy * sh + ky)
                                            * input.shape()[2]
                                            + ox * sw + kx;
                                        gin.data_mut()[idx] += g
                                            * weight.data()[((o * ic + i) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                gin
            }
            Layer::Relu => input
                .zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
                .expect("relu shapes match"),
            Layer::AvgPool { window } => {
                let (ph, pw) = *window;
                let (c, oh, ow) = (
                    grad_out.shape()[0],
                    grad_out.shape()[1],
                    grad_out.shape()[2],
                );
                let inv = 1.0 / (ph * pw) as f64;
                let mut gin = Tensor::zeros(input.shape());
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad_out.at3(ch, oy, ox) * inv;
                            for ky in 0..ph {
                                for kx in 0..pw {
                                    let idx = (ch * input.shape()[1] + oy * ph + ky)
                                        * input.shape()[2]
                                        + ox * pw + kx;
                                    gin.data_mut()[idx] += g;
                                }
                            }
                        }
                    }
                }
                gin
            }
            Layer::Flatten => grad_out
                .reshaped(input.shape())
                .expect("flatten preserves volume"),
            Layer::Dense { weight, .. } => {
                let (out_n, in_n) = (weight.shape()[0], weight.shape()[1]);
                let mut gin = vec![0.0; in_n];
                for o in 0..out_n {
                    let g = grad_out.data()[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &weight.data()[o * in_n..(o + 1) * in_n];
                    for (gi, wv) in gin.iter_mut().zip(row) {
                        *gi += g * wv;
                    }
                }
                Tensor::from_vec(&[in_n], gin).expect("dense input length")
            }
        }
    }

    /// Gradient with respect to the layer parameters, if it has any.
    fn backward_params(&self, input: &Tensor, grad_out: &Tensor) -> Option<ParamGrad> {
        match self {
            Layer::Conv2d { weight, stride, .. } => {
                let ws = weight.shape();
                let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (sh, sw) = *stride;
                let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
                let mut gw = Tensor::zeros(ws);
                let mut gb = vec![0.0; oc];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad_out.at3(o, oy, ox);
                            if g == 0.0 {
                                continue;
                            }
                            gb[o] += g;
                            for i in 0..ic {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        gw.data_mut()[((o * ic + i) * kh + ky) * kw + kx] +=
                                            g * input.at3(i, oy * sh + ky, ox * sw + kx);
                                    }
                                }
                            }
                        }
                    }
                }
                Some(ParamGrad {
                    weight: gw,
                    bias: gb,
                })
            }
            Layer::Dense { weight, .. } => {
                let (out_n, in_n) = (weight.shape()[0], weight.shape()[1]);
                let mut gw = Tensor::zeros(&[out_n, in_n]);
                let mut gb = vec![0.0; out_n];
                for o in 0..out_n {
                    let g = grad_out.data()[o];
                    gb[o] = g;
                    if g == 0.0 {
                        continue;
                    }
                    for (gwv, xv) in gw.data_mut()[o * in_n..(o + 1) * in_n]
                        .iter_mut()
                        .zip(input.data())
                    {
                        *gwv = g * xv;
                    }
                }
                Some(ParamGrad {
                    weight: gw,
                    bias: gb,
                })
            }
            _ => None,
        }
    }
}

/// Loss functions whose input-space gradients the stack can compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSpec {
    /// Cross-entropy toward a target class: `logsumexp(z) - z_t`.
    CrossEntropyTarget(usize),
    /// A single raw logit, used to assemble Jacobians.
    Logit(usize),
}

/// An ordered stack of layers forming a classifier with rank-1 logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    num_classes: usize,
}

impl LayerStack {
    /// Builds a stack, verifying that consecutive layer shapes compose and
    /// that the output is a rank-1 logit vector.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let mut shape: Vec<usize> = input_shape.to_vec();
        if shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {shape:?} has a zero dimension"
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| {
                Error::Config(format!("layer {i} does not compose: {e}"))
            })?;
        }
        if shape.len() != 1 {
            return Err(Error::Config(format!(
                "final output shape {shape:?} is not a logit vector"
            )));
        }
        Ok(LayerStack {
            input_shape: input_shape.to_vec(),
            layers,
            num_classes: shape[0],
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d { weight, bias, .. } => weight.len() + bias.len(),
                Layer::Dense { weight, bias } => weight.len() + bias.len(),
                _ => 0,
            })
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Logits `Z(x)`. Pure: identical inputs give identical bits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.pop().expect("nonempty activations"))
    }

    /// Runs the stack keeping every intermediate activation;
    /// `acts[0]` is the input and `acts.last()` the logits.
    fn forward_cached(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("nonempty"));
            acts.push(next);
        }
        Ok(acts)
    }

    /// Backpropagates a logit-space gradient to the input, optionally
    /// collecting parameter gradients along the way.
    fn backprop(
        &self,
        acts: &[Tensor],
        dlogits: Tensor,
        want_params: bool,
    ) -> (Tensor, Vec<Option<ParamGrad>>) {
        let mut grad = dlogits;
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if want_params {
                params.push(layer.backward_params(&acts[i], &grad));
            }
            grad = layer.backward_input(&acts[i], &grad);
        }
        params.reverse();
        (grad, params)
    }

    /// Gradient of the loss with respect to the input image.
    pub fn input_gradient(&self, x: &Tensor, loss: &LossSpec) -> Result<Tensor> {
        let acts = self.forward_cached(x)?;
        let logits = acts.last().expect("nonempty");
        let dlogits = loss_logit_gradient(logits, loss)?;
        Ok(self.backprop(&acts, dlogits, false).0)
    }

    /// Loss value and input gradient in one pass.
    pub fn loss_and_input_gradient(&self, x: &Tensor, loss: &LossSpec) -> Result<(f64, Tensor)> {
        let acts = self.forward_cached(x)?;
        let logits = acts.last().expect("nonempty");
        let value = loss_value(logits, loss)?;
        let dlogits = loss_logit_gradient(logits, loss)?;
        Ok((value, self.backprop(&acts, dlogits, false).0))
    }

    /// Per-sample parameter gradients of the target cross-entropy, for the
    /// trainer. Returns the loss value and one gradient slot per layer.
    pub(crate) fn ce_param_gradients(
        &self,
        x: &Tensor,
        target: usize,
    ) -> Result<(f64, Vec<Option<ParamGrad>>)> {
        let acts = self.forward_cached(x)?;
        let logits = acts.last().expect("nonempty");
        let spec = LossSpec::CrossEntropyTarget(target);
        let value = loss_value(logits, &spec)?;
        let dlogits = loss_logit_gradient(logits, &spec)?;
        Ok((value, self.backprop(&acts, dlogits, true).1))
    }

    /// Jacobian of the logits with respect to the input, shape `[K, d]`.
    /// Row `k` is exactly `input_gradient(x, Logit(k))`.
    pub fn logit_jacobian(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.len();
        let k = self.num_classes;
        let mut jac = Tensor::zeros(&[k, d]);
        for row in 0..k {
            let g = self.input_gradient(x, &LossSpec::Logit(row))?;
            jac.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.data());
        }
        Ok(jac)
    }
}

/// Numerically stable softmax; entries are positive and sum to 1.
pub fn softmax_probs(logits: &Tensor) -> Tensor {
    let max = logits
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::from_vec(logits.shape(), exps.into_iter().map(|e| e / sum).collect())
        .expect("softmax preserves shape")
}

/// Loss value for a logit vector.
pub fn loss_value(logits: &Tensor, loss: &LossSpec) -> Result<f64> {
    match *loss {
        LossSpec::CrossEntropyTarget(t) => {
            check_class(logits, t)?;
            let max = logits
                .data()
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse: f64 = logits.data().iter().map(|&z| (z - max).exp()).sum();
            Ok(max + lse.ln() - logits.data()[t])
        }
        LossSpec::Logit(k) => {
            check_class(logits, k)?;
            Ok(logits.data()[k])
        }
    }
}

fn check_class(logits: &Tensor, k: usize) -> Result<()> {
    if k >= logits.len() {
        return Err(Error::Config(format!(
            "class index {k} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(())
}

/// dL/dz for the supported losses.
fn loss_logit_gradient(logits: &Tensor, loss: &LossSpec) -> Result<Tensor> {
    match *loss {
        LossSpec::CrossEntropyTarget(t) => {
            check_class(logits, t)?;
            let mut g = softmax_probs(logits);
            g.data_mut()[t] -= 1.0;
            Ok(g)
        }
        LossSpec::Logit(k) => {
            check_class(logits, k)?;
            let mut g = Tensor::zeros(logits.shape());
            g.data_mut()[k] = 1.0;
            Ok(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(weight: Vec<f64>, out_n: usize, in_n: usize, bias: Vec<f64>) -> Layer {
        Layer::Dense {
            weight: Tensor::from_vec(&[out_n, in_n], weight).unwrap(),
            bias,
        }
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax_probs(&Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_ln3() {
        let p = softmax_probs(&Tensor::from_vec(&[2], vec![3.0f64.ln(), 0.0]).unwrap());
        assert!((p.data()[0] - 0.75).abs() < 1e-12);
        assert!((p.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax_probs(&Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let z = Tensor::from_vec(&[4], vec![0.3, -1.2, 4.0, 2.2]).unwrap();
        let p = softmax_probs(&z);
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let shifted = softmax_probs(&z.map(|v| v + 7.5));
        for (a, b) in p.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_dense_gives_uniform_probs() {
        let model = LayerStack::new(
            [1, 2, 2],
            vec![
                Layer::Flatten,
                dense(vec![0.0; 8], 2, 4, vec![0.7, 0.7]),
            ],
        )
        .unwrap();
        let x = Tensor::filled(&[1, 2, 2], 0.3);
        let z = model.forward(&x).unwrap();
        assert_eq!(z.data(), &[0.7, 0.7]);
        let p = softmax_probs(&z);
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_conv_sum_dense_on_constant_image() {
        // 1x1 conv with weight 1 passes the image through; an all-ones dense
        // row sums it, so the logit is c * pixel count.
        let model = LayerStack::new(
            [1, 4, 4],
            vec![
                Layer::Conv2d {
                    weight: Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(),
                    bias: vec![0.0],
                    stride: (1, 1),
                },
                Layer::Flatten,
                dense(vec![1.0; 16], 1, 16, vec![0.0]),
            ],
        )
        .unwrap();
        let x = Tensor::filled(&[1, 4, 4], 0.25);
        let z = model.forward(&x).unwrap();
        assert_eq!(z.data(), &[4.0]);
    }

    #[test]
    fn forward_is_pure() {
        let model = LayerStack::new(
            [1, 3, 3],
            vec![
                Layer::Conv2d {
                    weight: Tensor::from_vec(&[2, 1, 2, 2], vec![0.3, -0.1, 0.9, 0.2, -0.4, 0.6, 0.05, -0.7])
                        .unwrap(),
                    bias: vec![0.1, -0.2],
                    stride: (1, 1),
                },
                Layer::Relu,
                Layer::Flatten,
                dense((0..16).map(|i| (i as f64) * 0.01 - 0.05).collect(), 2, 8, vec![0.0, 0.0]),
            ],
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 3, 3], (0..9).map(|i| i as f64 / 10.0).collect()).unwrap();
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let model = LayerStack::new(
            [1, 2, 2],
            vec![Layer::Flatten, dense(vec![0.0; 4], 1, 4, vec![0.0])],
        )
        .unwrap();
        let bad = Tensor::zeros(&[1, 3, 3]);
        assert!(matches!(
            model.forward(&bad),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn stack_rejects_noncomposing_layers() {
        let err = LayerStack::new(
            [1, 2, 2],
            vec![dense(vec![0.0; 4], 1, 4, vec![0.0])],
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_gradient_is_zero() {
        let model = LayerStack::new(
            [1, 2, 2],
            vec![Layer::Flatten, dense(vec![0.0; 8], 2, 4, vec![0.0, 0.0])],
        )
        .unwrap();
        let x = Tensor::filled(&[1, 2, 2], 0.4);
        let g = model
            .input_gradient(&x, &LossSpec::Logit(0))
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        // Cross-entropy on uniform logits still has zero input gradient.
        let g = model
            .input_gradient(&x, &LossSpec::CrossEntropyTarget(1))
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_dense_logit_gradient_is_weight_row() {
        let w = vec![0.5, -1.0, 2.0, 0.25, 0.1, 0.2, 0.3, 0.4];
        let model = LayerStack::new(
            [1, 2, 2],
            vec![Layer::Flatten, dense(w.clone(), 2, 4, vec![0.0, 0.0])],
        )
        .unwrap();
        let x = Tensor::filled(&[1, 2, 2], 0.9);
        let g = model.input_gradient(&x, &LossSpec::Logit(1)).unwrap();
        assert_eq!(g.data(), &w[4..8]);
    }

    #[test]
    fn jacobian_of_linear_model_is_weight_matrix() {
        let w: Vec<f64> = vec![0.5, -1.0, 2.0, 0.25, 0.1, 0.2, 0.3, 0.4];
        let model = LayerStack::new(
            [1, 2, 2],
            vec![Layer::Flatten, dense(w.clone(), 2, 4, vec![0.3, -0.3])],
        )
        .unwrap();
        let x = Tensor::filled(&[1, 2, 2], 0.1);
        let jac = model.logit_jacobian(&x).unwrap();
        assert_eq!(jac.shape(), &[2, 4]);
        assert_eq!(jac.data(), w.as_slice());
    }

    #[test]
    fn jacobian_rows_match_input_gradient_bitwise() {
        let model = LayerStack::new(
            [1, 3, 3],
            vec![
                Layer::Conv2d {
                    weight: Tensor::from_vec(&[2, 1, 2, 2], vec![0.3, -0.1, 0.9, 0.2, -0.4, 0.6, 0.05, -0.7])
                        .unwrap(),
                    bias: vec![0.1, -0.2],
                    stride: (1, 1),
                },
                Layer::Relu,
                Layer::Flatten,
                dense((0..16).map(|i| (i as f64) * 0.07 - 0.3).collect(), 2, 8, vec![0.0, 0.1]),
            ],
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 3, 3], (0..9).map(|i| (i as f64) * 0.1).collect()).unwrap();
        let jac = model.logit_jacobian(&x).unwrap();
        for k in 0..2 {
            let g = model.input_gradient(&x, &LossSpec::Logit(k)).unwrap();
            assert_eq!(&jac.data()[k * 9..(k + 1) * 9], g.data());
        }
    }

    #[test]
    fn avgpool_drops_partial_windows() {
        let pool = Layer::AvgPool { window: (2, 2) };
        assert_eq!(pool.output_shape(&[3, 5, 5]).unwrap(), vec![3, 2, 2]);
    }
}
