//! Posterior sampling, MMSE estimation, pixel-wise uncertainty maps, and
//! tiled full-frame prediction.

use candle_core::Tensor;

use crate::data::Image2D;
use crate::error::{Result, VsplitError};
use crate::objective::Normalizer;
use crate::rng::derive_seed;
use crate::vse::{SampleMode, VseModel};

/// How a prediction is formed from the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Deterministic decode from posterior means.
    PosteriorMean,
    /// Pixel-wise mean over `k` stochastic decodes.
    Mmse { k: usize },
}

/// Standardize an image into the (1, h·w, 1) input layout.
fn image_to_input(model: &VseModel, norm: &Normalizer, x: &Image2D) -> Result<Tensor> {
    let vals: Vec<f32> = x.pixels().iter().map(|&v| norm.standardize_input(v)).collect();
    let t = Tensor::from_vec(vals, (1, x.height() * x.width(), 1), model.device())?;
    Ok(t.to_dtype(model.param_dtype())?)
}

/// Bring a (1, h·w, 1) network output back to raw intensity units.
fn output_to_image(norm: &Normalizer, t: &Tensor, h: usize, w: usize) -> Result<Image2D> {
    let vals = t
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let pixels = vals
        .iter()
        .map(|&v| (v * norm.std + 0.5 * norm.mean) as f32)
        .collect();
    Image2D::new(h, w, pixels)
}

fn forward_once(
    model: &VseModel,
    norm: &Normalizer,
    x: &Image2D,
    mode: SampleMode,
    seed: u64,
) -> Result<(Image2D, Image2D)> {
    let (h, w) = (x.height(), x.width());
    let input = image_to_input(model, norm, x)?;
    let (c1, c2, _) = model.forward(&input, (h, w), mode, seed)?;
    Ok((
        output_to_image(norm, &c1, h, w)?,
        output_to_image(norm, &c2, h, w)?,
    ))
}

/// Deterministic prediction from posterior means (no sampling).
pub fn posterior_mean_prediction(
    model: &VseModel,
    norm: &Normalizer,
    x: &Image2D,
) -> Result<(Image2D, Image2D)> {
    forward_once(model, norm, x, SampleMode::PosteriorMean, 0)
}

/// `k` independent stochastic decodes of the same input. Sample `i` uses
/// seed `seed + i`, so any subset of indices is reproducible on its own.
pub fn sample_predictions(
    model: &VseModel,
    norm: &Normalizer,
    x: &Image2D,
    k: usize,
    seed: u64,
) -> Result<Vec<(Image2D, Image2D)>> {
    if k < 1 {
        return Err(VsplitError::Invalid(format!(
            "sample_predictions requires k >= 1, got {k}"
        )));
    }
    (0..k)
        .map(|i| {
            forward_once(
                model,
                norm,
                x,
                SampleMode::Stochastic,
                seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

fn check_samples(samples: &[(Image2D, Image2D)]) -> Result<(usize, usize)> {
    let Some(first) = samples.first() else {
        return Err(VsplitError::Invalid("no samples to aggregate".into()));
    };
    let (h, w) = (first.0.height(), first.0.width());
    for (a, b) in samples {
        if a.height() != h || a.width() != w || b.height() != h || b.width() != w {
            return Err(VsplitError::Invalid(
                "samples disagree on image shape".into(),
            ));
        }
    }
    Ok((h, w))
}

/// Pixel-wise mean over samples, per channel (the approximate MMSE estimate).
pub fn mmse(samples: &[(Image2D, Image2D)]) -> Result<(Image2D, Image2D)> {
    let (h, w) = check_samples(samples)?;
    let k = samples.len() as f64;
    let mut acc1 = vec![0f64; h * w];
    let mut acc2 = vec![0f64; h * w];
    for (s1, s2) in samples {
        for (a, &v) in acc1.iter_mut().zip(s1.pixels()) {
            *a += v as f64;
        }
        for (a, &v) in acc2.iter_mut().zip(s2.pixels()) {
            *a += v as f64;
        }
    }
    let img = |acc: Vec<f64>| Image2D::new(h, w, acc.iter().map(|&v| (v / k) as f32).collect());
    Ok((img(acc1)?, img(acc2)?))
}

/// Pixel-wise population standard deviation (divide by k) over samples.
pub fn pixelwise_std(samples: &[(Image2D, Image2D)]) -> Result<(Image2D, Image2D)> {
    let (h, w) = check_samples(samples)?;
    let k = samples.len() as f64;
    let (m1, m2) = mmse(samples)?;
    let mut acc1 = vec![0f64; h * w];
    let mut acc2 = vec![0f64; h * w];
    for (s1, s2) in samples {
        for ((a, &v), &m) in acc1.iter_mut().zip(s1.pixels()).zip(m1.pixels()) {
            let d = v as f64 - m as f64;
            *a += d * d;
        }
        for ((a, &v), &m) in acc2.iter_mut().zip(s2.pixels()).zip(m2.pixels()) {
            let d = v as f64 - m as f64;
            *a += d * d;
        }
    }
    let img = |acc: Vec<f64>| {
        Image2D::new(h, w, acc.iter().map(|&v| ((v / k).sqrt()) as f32).collect())
    };
    Ok((img(acc1)?, img(acc2)?))
}

/// Mirror-reflected crop: indices outside the frame reflect off the borders
/// (without repeating the border pixel).
fn mirror_crop(img: &Image2D, top: isize, left: isize, size: usize) -> Image2D {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let refl = |mut i: isize, n: isize| -> usize {
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * n - 2 - i };
        }
        i as usize
    };
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size as isize {
        let sy = refl(top + y, h);
        for x in 0..size as isize {
            pixels.push(img.get(sy, refl(left + x, w)));
        }
    }
    Image2D::new(size, size, pixels).expect("size is positive")
}

/// Full-frame prediction by stitching overlapping tiles.
///
/// Tiles of side `tile` advance with stride `tile − 2·pad`; only the inner
/// stride-sized region of each tile's prediction is written to the output
/// (each output pixel is owned by exactly one tile). Frame borders are
/// mirror-padded. `tile` and `pad` must be multiples of 2^levels so every
/// tile sees the same downsampling grid as the full frame — that is what
/// makes interior tile predictions agree with untiled ones.
pub fn predict_tiled(
    model: &VseModel,
    norm: &Normalizer,
    x: &Image2D,
    tile: usize,
    pad: usize,
    mode: PredictMode,
    seed: u64,
) -> Result<(Image2D, Image2D)> {
    let (p1, p2, _) = predict_tiled_full(model, norm, x, tile, pad, mode, seed)?;
    Ok((p1, p2))
}

/// [`predict_tiled`] that also stitches pixel-wise posterior std maps when
/// sampling (`Mmse` mode); `PosteriorMean` yields no std maps.
pub fn predict_tiled_full(
    model: &VseModel,
    norm: &Normalizer,
    x: &Image2D,
    tile: usize,
    pad: usize,
    mode: PredictMode,
    seed: u64,
) -> Result<(Image2D, Image2D, Option<(Image2D, Image2D)>)> {
    let (hh, ww) = (x.height(), x.width());
    if tile == 0 || tile > hh.min(ww) {
        return Err(VsplitError::Invalid(format!(
            "tile {tile} must satisfy 0 < tile <= min(H, W) = {}",
            hh.min(ww)
        )));
    }
    if 2 * pad >= tile {
        return Err(VsplitError::Invalid(format!(
            "pad {pad} must be less than tile/2 = {}",
            tile / 2
        )));
    }
    let unit = 1usize << model.config.levels;
    if tile % unit != 0 || pad % unit != 0 {
        return Err(VsplitError::Invalid(format!(
            "tile and pad must be multiples of 2^levels = {unit}, got tile {tile} pad {pad}"
        )));
    }
    if let PredictMode::Mmse { k } = mode {
        if k < 1 {
            return Err(VsplitError::Invalid("mmse requires k >= 1".into()));
        }
    }
    let stride = tile - 2 * pad;
    let ny = hh.div_ceil(stride);
    let nx = ww.div_ceil(stride);
    // One tile covering the frame exactly: keep the caller's seed so the
    // result matches untiled prediction bit-for-bit.
    let single = ny == 1 && nx == 1 && pad == 0;
    let mut out1 = Image2D::zeros(hh, ww);
    let mut out2 = Image2D::zeros(hh, ww);
    let mut stds = match mode {
        PredictMode::Mmse { .. } => Some((Image2D::zeros(hh, ww), Image2D::zeros(hh, ww))),
        PredictMode::PosteriorMean => None,
    };
    for ty in 0..ny {
        for tx in 0..nx {
            let oy0 = ty * stride;
            let oy1 = ((ty + 1) * stride).min(hh);
            let ox0 = tx * stride;
            let ox1 = ((tx + 1) * stride).min(ww);
            let wy = oy0 as isize - pad as isize;
            let wx = ox0 as isize - pad as isize;
            let win = mirror_crop(x, wy, wx, tile);
            let tile_seed = if single {
                seed
            } else {
                derive_seed(seed, &[0x711e, ty as u64, tx as u64])
            };
            let (p1, p2, s) = match mode {
                PredictMode::PosteriorMean => {
                    let (p1, p2) = posterior_mean_prediction(model, norm, &win)?;
                    (p1, p2, None)
                }
                PredictMode::Mmse { k } => {
                    let samples = sample_predictions(model, norm, &win, k, tile_seed)?;
                    let (p1, p2) = mmse(&samples)?;
                    (p1, p2, Some(pixelwise_std(&samples)?))
                }
            };
            for y in oy0..oy1 {
                for xx in ox0..ox1 {
                    let py = (y as isize - wy) as usize;
                    let px = (xx as isize - wx) as usize;
                    out1.set(y, xx, p1.get(py, px));
                    out2.set(y, xx, p2.get(py, px));
                    if let (Some((o1, o2)), Some((s1, s2))) = (stds.as_mut(), s.as_ref()) {
                        o1.set(y, xx, s1.get(py, px));
                        o2.set(y, xx, s2.get(py, px));
                    }
                }
            }
        }
    }
    Ok((out1, out2, stds))
}
