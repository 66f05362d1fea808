//! Evaluation metrics: range-invariant PSNR and multi-scale SSIM.

use crate::data::Image2D;
use crate::error::{Result, VsplitError};

/// PSNR cap returned for a (near-)perfect affine fit, keeping CSVs finite.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Range-invariant PSNR in dB.
///
/// Fits scalars (a, b) minimizing Σ(a·pred + b − gt)² in closed form, then
/// returns 10·log10(range(gt)² / MSE) of the fitted residual, capped at
/// 100 dB. Invariant to any affine transform of `pred` with a ≠ 0.
pub fn ri_psnr(pred: &Image2D, gt: &Image2D) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(VsplitError::Invalid("ri_psnr: shape mismatch".into()));
    }
    let n = gt.pixels().len() as f64;
    let mut gmin = f64::INFINITY;
    let mut gmax = f64::NEG_INFINITY;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels().iter()) {
        let (p, g) = (p as f64, g as f64);
        gmin = gmin.min(g);
        gmax = gmax.max(g);
        sum_p += p;
        sum_g += g;
    }
    let range = gmax - gmin;
    if !(range > 0.0) {
        return Err(VsplitError::Invalid(
            "ri_psnr: constant ground truth has no range".into(),
        ));
    }
    let (mp, mg) = (sum_p / n, sum_g / n);
    let mut var_p = 0.0;
    let mut cov = 0.0;
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels().iter()) {
        let dp = p as f64 - mp;
        var_p += dp * dp;
        cov += dp * (g as f64 - mg);
    }
    let a = if var_p > 0.0 { cov / var_p } else { 0.0 };
    let b = mg - a * mp;
    let mut mse = 0.0;
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels().iter()) {
        let r = a * p as f64 + b - g as f64;
        mse += r * r;
    }
    mse /= n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB))
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Standard per-scale weights; renormalized to sum 1 over the scales in use.
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gauss_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let mut sum = 0.0;
    for (i, gi) in g.iter_mut().enumerate() {
        let d = i as f64 - (WINDOW as f64 - 1.0) / 2.0;
        *gi = (-(d * d) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *gi;
    }
    for gi in &mut g {
        *gi /= sum;
    }
    g
}

/// Separable valid convolution with the Gaussian window; output is
/// (h−10) x (w−10).
fn valid_filter(src: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let wo = w - WINDOW + 1;
    let ho = h - WINDOW + 1;
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += src[y * w + x + k] * gk;
            }
            rows[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += rows[(y + k) * wo + x] * gk;
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term over the valid region.
fn ssim_cs(x: &[f64], y: &[f64], h: usize, w: usize, c1: f64, c2: f64) -> (f64, f64) {
    let g = gauss_window();
    let n = x.len();
    let mut xx = vec![0.0; n];
    let mut yy = vec![0.0; n];
    let mut xy = vec![0.0; n];
    for i in 0..n {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    let mu_x = valid_filter(x, h, w, &g);
    let mu_y = valid_filter(y, h, w, &g);
    let sxx = valid_filter(&xx, h, w, &g);
    let syy = valid_filter(&yy, h, w, &g);
    let sxy = valid_filter(&xy, h, w, &g);
    let m = mu_x.len() as f64;
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = sxx[i] - mx * mx;
        let vy = syy[i] - my * my;
        let vxy = sxy[i] - mx * my;
        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let cs = (2.0 * vxy + c2) / (vx + vy + c2);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    (ssim_sum / m, cs_sum / m)
}

/// 2x2 mean pooling, dropping trailing odd row/column.
fn downsample(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            let base = 2 * y * w + 2 * x;
            out[y * w2 + x] = (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) / 4.0;
        }
    }
    (out, h2, w2)
}

/// Multi-scale SSIM: 11x11 Gaussian window (σ 1.5), valid convolution,
/// dynamic range = range(gt), 2x2 mean-pool between scales, standard weights
/// (0.0448, 0.2856, 0.3001, 0.2363, 0.1333). The scale count is
/// min(5, scales where the downsampled side still fits the window), with the
/// weights of the scales in use renormalized; per-scale means are clamped at
/// 0 before the weighted geometric mean, so the result lies in [0, 1].
pub fn ms_ssim(pred: &Image2D, gt: &Image2D) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(VsplitError::Invalid("ms_ssim: shape mismatch".into()));
    }
    let (h, w) = (gt.height(), gt.width());
    let side = h.min(w);
    let mut scales = 0usize;
    while scales < 5 && side / (1 << scales) >= WINDOW {
        scales += 1;
    }
    if scales == 0 {
        return Err(VsplitError::Invalid(format!(
            "ms_ssim: {h}x{w} is smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let gt64: Vec<f64> = gt.pixels().iter().map(|&v| v as f64).collect();
    let pred64: Vec<f64> = pred.pixels().iter().map(|&v| v as f64).collect();
    let gmin = gt64.iter().copied().fold(f64::INFINITY, f64::min);
    let gmax = gt64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = gmax - gmin;
    if !(range > 0.0) {
        return Err(VsplitError::Invalid(
            "ms_ssim: constant ground truth has no range".into(),
        ));
    }
    let c1 = (K1 * range) * (K1 * range);
    let c2 = (K2 * range) * (K2 * range);
    let wsum: f64 = MS_WEIGHTS[..scales].iter().sum();
    let mut x = pred64;
    let mut y = gt64;
    let (mut ch, mut cw) = (h, w);
    let mut out = 1.0;
    for j in 0..scales {
        let (ssim_mean, cs_mean) = ssim_cs(&x, &y, ch, cw, c1, c2);
        let v = if j == scales - 1 { ssim_mean } else { cs_mean };
        out *= v.max(0.0).powf(MS_WEIGHTS[j] / wsum);
        if j + 1 < scales {
            let (nx, nh, nw) = downsample(&x, ch, cw);
            let (ny, _, _) = downsample(&y, ch, cw);
            x = nx;
            y = ny;
            ch = nh;
            cw = nw;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// splitmix64 stream yielding f64 in [0, 1), mirrored by the independent
    /// NumPy oracle that produced the frozen values below.
    struct Stream {
        x: u64,
    }

    impl Stream {
        fn new(seed: u64) -> Self {
            Self { x: seed }
        }
        fn next_f64(&mut self) -> f64 {
            let out = crate::rng::splitmix64(self.x);
            self.x = self.x.wrapping_add(0x9e3779b97f4a7c15);
            (out >> 11) as f64 * (1.0 / 9007199254740992.0)
        }
    }

    fn gen_image(h: usize, w: usize, seed: u64) -> Image2D {
        let mut g = Stream::new(seed);
        let mut px = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let s = ((i * i + 3 * j) % 97) as f64 / 97.0;
                px.push((s + 0.2 * g.next_f64()) as f32);
            }
        }
        Image2D::new(h, w, px).unwrap()
    }

    fn oracle_images() -> (Image2D, Image2D, Image2D, Image2D) {
        let gt = gen_image(192, 192, 1001);
        let mut rng = Stream::new(2002);
        let noise: Vec<f32> = (0..192 * 192).map(|_| rng.next_f64() as f32).collect();
        let pred_b: Vec<f32> = gt
            .pixels()
            .iter()
            .zip(&noise)
            .map(|(&g, &n)| (0.9 * g as f64 + 0.05 + 0.3 * (n as f64 - 0.5)) as f32)
            .collect();
        let gmin = gt.pixels().iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let gmax = gt.pixels().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let range = gmax - gmin;
        let mut rng_c = Stream::new(3003);
        let pred_c: Vec<f32> = gt
            .pixels()
            .iter()
            .map(|&g| (g as f64 + 2.0 * range * (rng_c.next_f64() - 0.5)) as f32)
            .collect();
        let pred_d: Vec<f32> = gt
            .pixels()
            .iter()
            .map(|&g| ((gmax + gmin) - g as f64) as f32)
            .collect();
        (
            gt,
            Image2D::new(192, 192, pred_b).unwrap(),
            Image2D::new(192, 192, pred_c).unwrap(),
            Image2D::new(192, 192, pred_d).unwrap(),
        )
    }

    #[test]
    fn test_images_match_the_oracle_generator_bit_for_bit() {
        let (gt, pred_b, _, _) = oracle_images();
        assert_eq!(gt.get(0, 0), 0.065032974f32);
        assert_eq!(gt.get(10, 7), 0.27758297f32);
        assert_eq!(pred_b.get(3, 4), 0.17830764f32);
        let gmin = gt.pixels().iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let gmax = gt.pixels().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        assert!((gmax - gmin - 1.189657542961868).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_matches_frozen_oracle_values() {
        let (gt, pred_b, pred_c, pred_d) = oracle_images();
        assert_eq!(ms_ssim(&gt, &gt).unwrap(), 1.0);
        let b = ms_ssim(&pred_b, &gt).unwrap();
        assert!((b - 0.972580321242337).abs() < 1e-9, "B: {b}");
        let c = ms_ssim(&pred_c, &gt).unwrap();
        assert!((c - 0.475504304016510).abs() < 1e-9, "C: {c}");
        assert!(c < 0.5, "heavy noise must score below 0.5");
        let d = ms_ssim(&pred_d, &gt).unwrap();
        assert!(d < 1e-12, "inverted image clamps to 0, got {d}");
        assert!(d < 1.0);
    }

    #[test]
    fn ms_ssim_auto_reduces_scales_on_small_images() {
        let (gt, pred_b, _, _) = oracle_images();
        for (side, expect) in [
            (64usize, 0.964866607963583f64), // 3 scales
            (40, 0.957787200964323),         // 2 scales
            (24, 0.973157637701655),         // 2 scales
            (16, 0.930194808853107),         // 1 scale
        ] {
            let g = gt.crop(0, 0, side, side).unwrap();
            let p = pred_b.crop(0, 0, side, side).unwrap();
            let v = ms_ssim(&p, &g).unwrap();
            assert!((v - expect).abs() < 1e-9, "{side}x{side}: {v} vs {expect}");
        }
        // below the window size: rejected
        let g = gt.crop(0, 0, 10, 10).unwrap();
        let p = pred_b.crop(0, 0, 10, 10).unwrap();
        assert!(ms_ssim(&p, &g).is_err());
    }

    #[test]
    fn ms_ssim_identity_is_one_for_any_nonconstant_image() {
        for seed in [4u64, 9, 100] {
            let img = gen_image(48, 31, seed);
            assert_eq!(ms_ssim(&img, &img).unwrap(), 1.0);
        }
        let flat = Image2D::new(32, 32, vec![3.0; 1024]).unwrap();
        assert!(ms_ssim(&flat, &flat).is_err());
    }

    #[test]
    fn ri_psnr_caps_and_affine_invariance() {
        let gt = gen_image(32, 32, 7);
        assert_eq!(ri_psnr(&gt, &gt).unwrap(), 100.0);
        // affine transform of gt → perfect fit
        let scaled: Vec<f32> = gt.pixels().iter().map(|&v| 2.0 * v + 5.0).collect();
        let scaled = Image2D::new(32, 32, scaled).unwrap();
        assert_eq!(ri_psnr(&scaled, &gt).unwrap(), 100.0);
        // invariance of an imperfect prediction under affine maps; the base
        // prediction is quantized to multiples of 2^-10 so the affine-mapped
        // pixels below stay exactly representable in f32
        let mut rng = Stream::new(12);
        let noisy: Vec<f32> = gt
            .pixels()
            .iter()
            .map(|&v| {
                let x = v + 0.1 * (rng.next_f64() as f32 - 0.5);
                (x * 1024.0).round() / 1024.0
            })
            .collect();
        let noisy = Image2D::new(32, 32, noisy).unwrap();
        let base = ri_psnr(&noisy, &gt).unwrap();
        for (a, b) in [(2.0f32, 1.5f32), (-4.0, 0.25), (0.5, -2.0)] {
            let t: Vec<f32> = noisy.pixels().iter().map(|&v| a * v + b).collect();
            let t = Image2D::new(32, 32, t).unwrap();
            let v = ri_psnr(&t, &gt).unwrap();
            assert!((v - base).abs() <= 1e-9, "a={a} b={b}: {v} vs {base}");
        }
        // not symmetric in its arguments
        let fwd = ri_psnr(&noisy, &gt).unwrap();
        let rev = ri_psnr(&gt, &noisy).unwrap();
        assert!((fwd - rev).abs() > 1e-12);
    }

    #[test]
    fn ri_psnr_arithmetic_example() {
        // gt range 2, residual MSE 0.01 → 10·log10(4/0.01) ≈ 26.0206
        // residual r satisfies Σr = 0 and Σ gt·r = −Σr², making the OLS fit
        // exactly the identity
        let c = 0.0098f64.sqrt();
        let gt = vec![0.0f32, 2.0, 1.0, 1.0];
        let r = [0.02 - c, -0.02 - c, c, c];
        let pred: Vec<f32> = gt.iter().zip(&r).map(|(&g, &e)| (g as f64 + e) as f32).collect();
        let gt = Image2D::new(2, 2, gt).unwrap();
        let pred = Image2D::new(2, 2, pred).unwrap();
        let v = ri_psnr(&pred, &gt).unwrap();
        let expect = 10.0 * (4.0f64 / 0.01).log10();
        assert!((v - expect).abs() < 1e-4, "{v} vs {expect}");
    }

    #[test]
    fn ri_psnr_rejects_degenerate_inputs() {
        let gt = Image2D::new(2, 2, vec![1.0; 4]).unwrap();
        let p = Image2D::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let err = ri_psnr(&p, &gt).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let small = Image2D::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(ri_psnr(&small, &gt).is_err());
        // constant pred against varying gt: fit degenerates to a=0, finite result
        let flat = Image2D::new(2, 2, vec![5.0; 4]).unwrap();
        let v = ri_psnr(&flat, &p).unwrap();
        assert!(v.is_finite());
    }
}
