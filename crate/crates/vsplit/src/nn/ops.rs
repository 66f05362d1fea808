//! Custom CPU tensor ops (channels-last conv building blocks, upsampling)
//! and small differentiable helpers.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, WithDType};
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rng::rng_from;

fn conv_out(side: usize, k: usize, pad: usize, stride: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

/// im2col for channels-last input `(B, H*W, C)`.
///
/// Output is 2-D `(B*Ho*Wo, k*k*C + 1)`: each row holds the receptive field
/// in (ky, kx, c) order followed by a constant 1 so the bias can live in the
/// weight matrix. Out-of-bounds taps are zero (zero padding).
pub(crate) struct Im2ColCl {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

impl Im2ColCl {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out(self.h, self.k, self.pad, self.stride),
            conv_out(self.w, self.k, self.pad, self.stride),
        )
    }

    fn fwd_t<T: WithDType>(&self, src: &[T], b: usize) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let (c, h, w, k) = (self.c, self.h, self.w, self.k);
        let width = k * k * c + 1;
        let one = T::from_f64(1.0);
        let zero = T::from_f64(0.0);
        let mut out = vec![zero; b * ho * wo * width];
        for bi in 0..b {
            let src_b = &src[bi * h * w * c..(bi + 1) * h * w * c];
            let out_b = &mut out[bi * ho * wo * width..(bi + 1) * ho * wo * width];
            for oy in 0..ho {
                let iy0 = (oy * self.stride) as isize - self.pad as isize;
                for ox in 0..wo {
                    let ix0 = (ox * self.stride) as isize - self.pad as isize;
                    let col = &mut out_b[(oy * wo + ox) * width..(oy * wo + ox + 1) * width];
                    col[k * k * c] = one;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        // contiguous run of in-bounds kx taps
                        let kx_lo = if ix0 < 0 { (-ix0) as usize } else { 0 };
                        let kx_hi = if ix0 + k as isize > w as isize {
                            (w as isize - ix0) as usize
                        } else {
                            k
                        };
                        if kx_lo >= kx_hi {
                            continue;
                        }
                        let src_off = iy * w + (ix0 + kx_lo as isize) as usize;
                        let n = (kx_hi - kx_lo) * c;
                        col[(ky * k + kx_lo) * c..(ky * k + kx_lo) * c + n]
                            .copy_from_slice(&src_b[src_off * c..src_off * c + n]);
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Im2ColCl {
    fn name(&self) -> &'static str {
        "im2col_cl"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        if dims.len() != 3 || dims[1] != self.h * self.w || dims[2] != self.c {
            candle_core::bail!(
                "im2col_cl: expected (B, {}, {}), got {dims:?}",
                self.h * self.w,
                self.c
            );
        }
        if layout.start_offset() != 0 || !layout.is_contiguous() {
            candle_core::bail!("im2col_cl requires a contiguous input");
        }
        let b = dims[0];
        let (ho, wo) = self.out_hw();
        let shape = Shape::from_dims(&[b * ho * wo, self.k * self.k * self.c + 1]);
        match storage {
            CpuStorage::F16(v) => Ok((CpuStorage::F16(self.fwd_t(v, b)), shape)),
            CpuStorage::F32(v) => Ok((CpuStorage::F32(self.fwd_t(v, b)), shape)),
            CpuStorage::F64(v) => Ok((CpuStorage::F64(self.fwd_t(v, b)), shape)),
            _ => candle_core::bail!("im2col_cl: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let b = arg.dims3()?.0;
        let op = Col2ImCl {
            b,
            c: self.c,
            h: self.h,
            w: self.w,
            k: self.k,
            pad: self.pad,
            stride: self.stride,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

/// Adjoint of [`Im2ColCl`]: scatter-adds column gradients back onto the
/// `(B, H*W, C)` input grid. The trailing ones column is ignored.
pub(crate) struct Col2ImCl {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

impl Col2ImCl {
    fn fwd_t<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let (ho, wo) = (
            conv_out(self.h, self.k, self.pad, self.stride),
            conv_out(self.w, self.k, self.pad, self.stride),
        );
        let (b, c, h, w, k) = (self.b, self.c, self.h, self.w, self.k);
        let width = k * k * c + 1;
        let mut out = vec![T::from_f64(0.0); b * h * w * c];
        for bi in 0..b {
            let src_b = &src[bi * ho * wo * width..(bi + 1) * ho * wo * width];
            let out_b = &mut out[bi * h * w * c..(bi + 1) * h * w * c];
            for oy in 0..ho {
                let iy0 = (oy * self.stride) as isize - self.pad as isize;
                for ox in 0..wo {
                    let ix0 = (ox * self.stride) as isize - self.pad as isize;
                    let col = &src_b[(oy * wo + ox) * width..(oy * wo + ox + 1) * width];
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let kx_lo = if ix0 < 0 { (-ix0) as usize } else { 0 };
                        let kx_hi = if ix0 + k as isize > w as isize {
                            (w as isize - ix0) as usize
                        } else {
                            k
                        };
                        if kx_lo >= kx_hi {
                            continue;
                        }
                        let dst_off = iy * w + (ix0 + kx_lo as isize) as usize;
                        let n = (kx_hi - kx_lo) * c;
                        let s = &col[(ky * k + kx_lo) * c..(ky * k + kx_lo) * c + n];
                        let d = &mut out_b[dst_off * c..dst_off * c + n];
                        for i in 0..n {
                            d[i] += s[i];
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Col2ImCl {
    fn name(&self) -> &'static str {
        "col2im_cl"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (ho, wo) = (
            conv_out(self.h, self.k, self.pad, self.stride),
            conv_out(self.w, self.k, self.pad, self.stride),
        );
        let width = self.k * self.k * self.c + 1;
        let expect = self.b * ho * wo * width;
        if layout.shape().elem_count() != expect || !layout.is_contiguous() {
            candle_core::bail!(
                "col2im_cl: expected {expect} contiguous elements, got {:?}",
                layout.shape()
            );
        }
        let shape = Shape::from_dims(&[self.b, self.h * self.w, self.c]);
        match storage {
            CpuStorage::F16(v) => Ok((CpuStorage::F16(self.fwd_t(v)), shape)),
            CpuStorage::F32(v) => Ok((CpuStorage::F32(self.fwd_t(v)), shape)),
            CpuStorage::F64(v) => Ok((CpuStorage::F64(self.fwd_t(v)), shape)),
            _ => candle_core::bail!("col2im_cl: unsupported dtype"),
        }
    }
}

/// Channels-last convolution.
///
/// * `x`: `(B, H*W, Cin)` contiguous
/// * `w`: `(k*k*Cin + 1, Cout)` — rows in (ky, kx, c) order, last row = bias
///
/// Returns `(B, Ho*Wo, Cout)`.
pub fn conv_cl(
    x: &Tensor,
    w: &Tensor,
    (h, wd): (usize, usize),
    k: usize,
    pad: usize,
    stride: usize,
) -> Result<Tensor> {
    let (b, hw, cin) = x.dims3()?;
    if hw != h * wd {
        return Err(candle_core::Error::Msg(format!(
            "conv_cl: spatial size {hw} != {h}x{wd}"
        ))
        .into());
    }
    let op = Im2ColCl {
        c: cin,
        h,
        w: wd,
        k,
        pad,
        stride,
    };
    let (ho, wo) = op.out_hw();
    let cols = x.apply_op1(op)?;
    let cout = w.dims2()?.1;
    Ok(cols.matmul(w)?.reshape((b, ho * wo, cout))?)
}

/// Nearest-neighbor 2x upsampling for channels-last maps:
/// `(B, H*W, C)` -> `(B, 2H*2W, C)`.
pub(crate) struct Upsample2xCl {
    pub h: usize,
    pub w: usize,
}

impl Upsample2xCl {
    fn fwd_t<T: WithDType>(&self, src: &[T], b: usize, c: usize) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::from_f64(0.0); b * h2 * w2 * c];
        for bi in 0..b {
            let src_b = &src[bi * h * w * c..(bi + 1) * h * w * c];
            let out_b = &mut out[bi * h2 * w2 * c..(bi + 1) * h2 * w2 * c];
            for y in 0..h {
                for x in 0..w {
                    let s = &src_b[(y * w + x) * c..(y * w + x + 1) * c];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let off = ((2 * y + dy) * w2 + 2 * x + dx) * c;
                        out_b[off..off + c].copy_from_slice(s);
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Upsample2xCl {
    fn name(&self) -> &'static str {
        "upsample2x_cl"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        if dims.len() != 3 || dims[1] != self.h * self.w || !layout.is_contiguous() {
            candle_core::bail!(
                "upsample2x_cl: expected contiguous (B, {}, C), got {dims:?}",
                self.h * self.w
            );
        }
        let (b, c) = (dims[0], dims[2]);
        let shape = Shape::from_dims(&[b, 4 * self.h * self.w, c]);
        match storage {
            CpuStorage::F16(v) => Ok((CpuStorage::F16(self.fwd_t(v, b, c)), shape)),
            CpuStorage::F32(v) => Ok((CpuStorage::F32(self.fwd_t(v, b, c)), shape)),
            CpuStorage::F64(v) => Ok((CpuStorage::F64(self.fwd_t(v, b, c)), shape)),
            _ => candle_core::bail!("upsample2x_cl: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let op = Downsum2xCl {
            h: self.h,
            w: self.w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

/// Adjoint of [`Upsample2xCl`]: sums each 2x2 block.
/// `(B, 2H*2W, C)` -> `(B, H*W, C)` where (h, w) are the *output* dims.
pub(crate) struct Downsum2xCl {
    pub h: usize,
    pub w: usize,
}

impl Downsum2xCl {
    fn fwd_t<T: WithDType>(&self, src: &[T], b: usize, c: usize) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::from_f64(0.0); b * h * w * c];
        for bi in 0..b {
            let src_b = &src[bi * h2 * w2 * c..(bi + 1) * h2 * w2 * c];
            let out_b = &mut out[bi * h * w * c..(bi + 1) * h * w * c];
            for y in 0..h {
                for x in 0..w {
                    let d = &mut out_b[(y * w + x) * c..(y * w + x + 1) * c];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let off = ((2 * y + dy) * w2 + 2 * x + dx) * c;
                        for i in 0..c {
                            d[i] += src_b[off + i];
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Downsum2xCl {
    fn name(&self) -> &'static str {
        "downsum2x_cl"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        if dims.len() != 3 || dims[1] != 4 * self.h * self.w || !layout.is_contiguous() {
            candle_core::bail!(
                "downsum2x_cl: expected contiguous (B, {}, C), got {dims:?}",
                4 * self.h * self.w
            );
        }
        let (b, c) = (dims[0], dims[2]);
        let shape = Shape::from_dims(&[b, self.h * self.w, c]);
        match storage {
            CpuStorage::F16(v) => Ok((CpuStorage::F16(self.fwd_t(v, b, c)), shape)),
            CpuStorage::F32(v) => Ok((CpuStorage::F32(self.fwd_t(v, b, c)), shape)),
            CpuStorage::F64(v) => Ok((CpuStorage::F64(self.fwd_t(v, b, c)), shape)),
            _ => candle_core::bail!("downsum2x_cl: unsupported dtype"),
        }
    }
}

/// Nearest-neighbor 2x upsample of a channels-last map of known geometry.
pub fn upsample2x_cl(x: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    Ok(x.apply_op1(Upsample2xCl { h, w })?)
}

/// Gradient-transparent clamp: identity inside `[lo, hi]`, constant outside,
/// built from relu so the backward pass needs no dedicated clamp kernel.
pub fn grad_clamp(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    // x - relu(x - hi) + relu(lo - x)
    let over = (x - hi)?.relu()?;
    let under = (lo - x)?.relu()?;
    Ok(((x - over)? + under)?)
}

/// Elementwise `max(x, c)` for scalar `c`, differentiable where `x > c`.
pub fn floor_at(x: &Tensor, c: f64) -> Result<Tensor> {
    Ok(((x - c)?.relu()? + c)?)
}

/// Numerically stable softplus `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // relu(x) + log(1 + exp(-|x|)); |x| = relu(x) + relu(-x)
    let pos = x.relu()?;
    let abs = (&pos + x.neg()?.relu()?)?;
    let tail = (abs.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Deterministic standard-normal tensor from a seed.
pub fn randn_tensor(
    shape: &[usize],
    dtype: DType,
    dev: &Device,
    seed: u64,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = rng_from(seed);
    let vals: Vec<f64> = (0..n)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(Tensor::from_vec(vals, shape, dev)?.to_dtype(dtype)?)
}
