//! Trainable convolution layer over the channels-last kernel.

use candle_core::{DType, Device, Tensor, Var};

use super::ops::{conv_cl, randn_tensor};
use crate::error::Result;

/// A 2-D convolution with its weights stored as a single matrix
/// `(k*k*cin + 1, cout)` whose last row is the bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub w: Var,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvLayer {
    /// He-normal initialization (std = sqrt(2 / fan_in)), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        stride: usize,
        dtype: DType,
        dev: &Device,
        seed: u64,
    ) -> Result<Self> {
        let fan_in = (k * k * cin) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weights = (randn_tensor(&[k * k * cin, cout], dtype, dev, seed)? * std)?;
        let bias = Tensor::zeros((1, cout), dtype, dev)?;
        let w = Var::from_tensor(&Tensor::cat(&[&weights, &bias], 0)?)?;
        Ok(Self {
            name: name.to_string(),
            w,
            cin,
            cout,
            k,
            pad,
            stride,
        })
    }

    /// Rescale the initial weights in place (e.g. near-zero heads so a fresh
    /// model starts from unit-variance posteriors).
    pub fn scale_weights(&self, s: f64) -> Result<()> {
        self.w.set(&(self.w.as_tensor() * s)?)?;
        Ok(())
    }

    /// Output spatial dims for an input of the given dims.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Apply to a `(B, h*w, cin)` tensor. When `compute_dtype` differs from
    /// the storage dtype the weights are cast inside the graph (mixed
    /// precision), so gradients still reach the full-precision master copy.
    pub fn forward(&self, x: &Tensor, (h, w): (usize, usize), compute_dtype: DType) -> Result<Tensor> {
        let wt = if self.w.dtype() == compute_dtype {
            self.w.as_tensor().clone()
        } else {
            self.w.as_tensor().to_dtype(compute_dtype)?
        };
        conv_cl(x, &wt, (h, w), self.k, self.pad, self.stride)
    }

    /// (name, var) pair for optimizers and checkpoints.
    pub fn param(&self) -> (String, Var) {
        (self.name.clone(), self.w.clone())
    }
}
