//! Differentiable bilinear image warps driven by a dense flow field.
//!
//! Output pixel `(c, i, j)` samples the input at `(i + dv[i,j], j + du[i,j])`
//! with bilinear interpolation; sample coordinates are resolved by clamping
//! the four gather indices to the image border, so out-of-range flows
//! reproduce the nearest border pixel and never leave `[0, 1]`. With zero
//! flow the warp is the identity, bit-exact.
//!
//! Derivatives with respect to the flow use the active interpolation cell
//! (`floor` of the sample coordinate), which at exact integer offsets is the
//! one-sided, right-facing derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerStack, LossSpec};
use crate::tensor::Tensor;

/// Per-pixel displacement field; `du` shifts columns, `dv` shifts rows,
/// both measured in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub du: Tensor,
    pub dv: Tensor,
}

impl FlowField {
    /// Zero flow for an `height x width` image.
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            du: Tensor::zeros(&[height, width]),
            dv: Tensor::zeros(&[height, width]),
        }
    }

    pub fn height(&self) -> usize {
        self.du.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.du.shape()[1]
    }

    /// Largest displacement magnitude across both components.
    pub fn max_magnitude(&self) -> f64 {
        self.du.linf_norm().max(self.dv.linf_norm())
    }

    /// Clamps both components to `[-limit, limit]`.
    pub fn clamp_in_place(&mut self, limit: f64) {
        self.du.clamp_in_place(-limit, limit);
        self.dv.clamp_in_place(-limit, limit);
    }

    fn check_matches(&self, x: &Tensor) -> Result<()> {
        if self.du.shape() != self.dv.shape() {
            return Err(Error::ShapeMismatch(format!(
                "flow components disagree: {:?} vs {:?}",
                self.du.shape(),
                self.dv.shape()
            )));
        }
        if x.shape().len() != 3 || self.du.shape() != &x.shape()[1..] {
            return Err(Error::ShapeMismatch(format!(
                "flow {:?} does not match image {:?}",
                self.du.shape(),
                x.shape()
            )));
        }
        Ok(())
    }
}

#[inline]
fn cell(coord: f64, size: usize) -> (usize, usize, f64) {
    // Active interpolation cell and fractional offset, with border clamping.
    let floor = coord.floor();
    let frac = coord - floor;
    let lo = (floor as isize).clamp(0, size as isize - 1) as usize;
    let hi = (floor as isize + 1).clamp(0, size as isize - 1) as usize;
    (lo, hi, frac)
}

/// Warps `x` by the flow field with bilinear sampling and border clamping.
pub fn bilinear_warp(x: &Tensor, flow: &FlowField) -> Result<Tensor> {
    flow.check_matches(x)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(x.shape());
    for i in 0..h {
        for j in 0..w {
            let v = i as f64 + flow.dv.at2(i, j);
            let u = j as f64 + flow.du.at2(i, j);
            let (y0, y1, a) = cell(v, h);
            let (x0, x1, b) = cell(u, w);
            for ch in 0..c {
                let p00 = x.at3(ch, y0, x0);
                let p01 = x.at3(ch, y0, x1);
                let p10 = x.at3(ch, y1, x0);
                let p11 = x.at3(ch, y1, x1);
                let val = (1.0 - a) * ((1.0 - b) * p00 + b * p01)
                    + a * ((1.0 - b) * p10 + b * p11);
                out.set3(ch, i, j, val);
            }
        }
    }
    Ok(out)
}

/// Gradient of `loss(model(warp(x, flow)))` with respect to the flow.
///
/// Returns analytic `(d loss / d du, d loss / d dv)` via the chain rule
/// through the bilinear sampling weights.
pub fn warp_flow_gradient(
    model: &LayerStack,
    x: &Tensor,
    flow: &FlowField,
    loss: &LossSpec,
) -> Result<(Tensor, Tensor)> {
    let (_, g) = warp_loss_and_flow_gradient(model, x, flow, loss)?;
    Ok(g)
}

/// Loss value at the warped image together with the flow gradient.
pub fn warp_loss_and_flow_gradient(
    model: &LayerStack,
    x: &Tensor,
    flow: &FlowField,
    loss: &LossSpec,
) -> Result<(f64, (Tensor, Tensor))> {
    flow.check_matches(x)?;
    let warped = bilinear_warp(x, flow)?;
    let (value, g_image) = model.loss_and_input_gradient(&warped, loss)?;

    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut gdu = Tensor::zeros(&[h, w]);
    let mut gdv = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let v = i as f64 + flow.dv.at2(i, j);
            let u = j as f64 + flow.du.at2(i, j);
            let (y0, y1, a) = cell(v, h);
            let (x0, x1, b) = cell(u, w);
            let mut du_acc = 0.0;
            let mut dv_acc = 0.0;
            for ch in 0..c {
                let p00 = x.at3(ch, y0, x0);
                let p01 = x.at3(ch, y0, x1);
                let p10 = x.at3(ch, y1, x0);
                let p11 = x.at3(ch, y1, x1);
                let g = g_image.at3(ch, i, j);
                du_acc += g * ((1.0 - a) * (p01 - p00) + a * (p11 - p10));
                dv_acc += g * ((1.0 - b) * (p10 - p00) + b * (p11 - p01));
            }
            gdu.set2(i, j, du_acc);
            gdv.set2(i, j, dv_acc);
        }
    }
    Ok((value, (gdu, gdv)))
}
