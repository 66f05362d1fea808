//! Synthetic structure generators for the two-channel decomposition task.
//!
//! Three structurally distinct families: `dots` (Gaussian blobs), `curves`
//! (smooth random polylines with a Gaussian cross-profile), and `mesh`
//! (overlapping closed loops). Intensities are rescaled so the brightest
//! pixel equals a configurable peak (default 1000); background is 0.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Image2D;
use crate::error::{Result, VsplitError};
use crate::rng::rng_from;

/// Default peak intensity of generated structures.
pub const DEFAULT_PEAK: f64 = 1000.0;

/// Structure family rendered by [`generate_channel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Dots,
    Curves,
    Mesh,
}

impl FromStr for ChannelKind {
    type Err = VsplitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dots" => Ok(ChannelKind::Dots),
            "curves" => Ok(ChannelKind::Curves),
            "mesh" => Ok(ChannelKind::Mesh),
            other => Err(VsplitError::Invalid(format!(
                "unknown channel kind {other:?}; expected one of dots, curves, mesh"
            ))),
        }
    }
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Dots => write!(f, "dots"),
            ChannelKind::Curves => write!(f, "curves"),
            ChannelKind::Mesh => write!(f, "mesh"),
        }
    }
}

/// Generate one synthetic channel with the default peak intensity.
pub fn generate_channel(
    kind: ChannelKind,
    height: usize,
    width: usize,
    density: f64,
    seed: u64,
) -> Result<Image2D> {
    generate_channel_with_peak(kind, height, width, density, DEFAULT_PEAK, seed)
}

/// Generate one synthetic channel scaled to the given peak intensity.
pub fn generate_channel_with_peak(
    kind: ChannelKind,
    height: usize,
    width: usize,
    density: f64,
    peak: f64,
    seed: u64,
) -> Result<Image2D> {
    if height < 32 || width < 32 {
        return Err(VsplitError::Invalid(format!(
            "generated images must be at least 32x32, got {height}x{width}"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(VsplitError::Invalid(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    if !(peak > 0.0) {
        return Err(VsplitError::Invalid(format!("peak must be > 0, got {peak}")));
    }

    let mut buf = vec![0f64; height * width];
    let mut rng = rng_from(seed);
    match kind {
        ChannelKind::Dots => render_dots(&mut buf, height, width, density, &mut rng),
        ChannelKind::Curves => render_curves(&mut buf, height, width, density, &mut rng),
        ChannelKind::Mesh => render_mesh(&mut buf, height, width, density, &mut rng),
    }

    let max = buf.iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { peak / max } else { 0.0 };
    let pixels = buf.iter().map(|&v| (v * scale) as f32).collect();
    Image2D::new(height, width, pixels)
}

/// Add `amp * exp(-r^2 / (2 sigma^2))` around a (possibly off-grid) center.
fn stamp_gaussian(buf: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, sigma: f64, amp: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let iy = cy.round() as isize;
    let ix = cx.round() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in (iy - r).max(0)..=(iy + r).min(h as isize - 1) {
        for x in (ix - r).max(0)..=(ix + r).min(w as isize - 1) {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            buf[y as usize * w + x as usize] += amp * (-(dy * dy + dx * dx) * inv).exp();
        }
    }
}

fn render_dots(buf: &mut [f64], h: usize, w: usize, density: f64, rng: &mut impl Rng) {
    let n = ((density * (h * w) as f64 / 64.0).round() as usize).max(1);
    for _ in 0..n {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let radius = rng.gen_range(2.0..5.0);
        let amp = rng.gen_range(0.4..1.0);
        // sigma = radius / 2 keeps the visually bright core near `radius` px.
        stamp_gaussian(buf, h, w, cy, cx, radius / 2.0, amp);
    }
}

fn render_curves(buf: &mut [f64], h: usize, w: usize, density: f64, rng: &mut impl Rng) {
    let n = ((density * (h * w) as f64 / 300.0).round() as usize).max(1);
    let turn = Normal::new(0.0, 0.08).expect("valid normal");
    let side = h.min(w) as f64;
    for _ in 0..n {
        let mut y = rng.gen_range(0.0..h as f64);
        let mut x = rng.gen_range(0.0..w as f64);
        let mut theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let length = rng.gen_range(0.5..1.2) * side;
        let sigma = rng.gen_range(0.8..1.6);
        let amp = rng.gen_range(0.4..1.0);
        let step = 0.5;
        let steps = (length / step).round() as usize;
        for _ in 0..steps {
            stamp_gaussian(buf, h, w, y, x, sigma, amp * 0.2);
            theta += turn.sample(rng);
            y += step * theta.sin();
            x += step * theta.cos();
        }
    }
}

fn render_mesh(buf: &mut [f64], h: usize, w: usize, density: f64, rng: &mut impl Rng) {
    let n = ((density * (h * w) as f64 / 800.0).round() as usize).max(1);
    let side = h.min(w) as f64;
    for _ in 0..n {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let a = rng.gen_range(0.10..0.35) * side;
        let b = rng.gen_range(0.10..0.35) * side;
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let sigma = rng.gen_range(0.8..1.4);
        let amp = rng.gen_range(0.4..1.0);
        let (sin_p, cos_p) = phi.sin_cos();
        // Arc-length-ish parameter step so stamps stay ~0.5 px apart.
        let dt = 0.5 / a.max(b);
        let steps = (std::f64::consts::TAU / dt).ceil() as usize;
        for i in 0..steps {
            let t = i as f64 * dt;
            let (sin_t, cos_t) = t.sin_cos();
            let ey = a * cos_t * sin_p + b * sin_t * cos_p;
            let ex = a * cos_t * cos_p - b * sin_t * sin_p;
            stamp_gaussian(buf, h, w, cy + ey, cx + ex, sigma, amp * 0.2);
        }
    }
}
