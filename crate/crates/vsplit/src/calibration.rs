//! Per-channel uncertainty recalibration: a single scalar fitted by
//! likelihood on held-out data, plus RMV-vs-RMSE calibration curves.
//!
//! Calibration never alters predictions; it only scales the reported
//! uncertainty maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Image2D;
use crate::error::{Result, VsplitError};

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

/// Result of fitting one channel's scalar.
#[derive(Debug, Clone, Copy)]
pub struct ScalarFit {
    pub scalar: f64,
    /// Pixels with σ = 0 (collapsed posterior), excluded from the fit.
    pub excluded_zero_sigma: usize,
    pub pixels_used: usize,
}

/// Collect (σ, residual) pairs over matching images, dropping σ = 0 pixels.
fn collect_pairs(
    sigmas: &[&Image2D],
    preds: &[&Image2D],
    targets: &[&Image2D],
) -> Result<(Vec<(f64, f64)>, usize)> {
    if sigmas.len() != preds.len() || sigmas.len() != targets.len() || sigmas.is_empty() {
        return Err(VsplitError::Invalid(
            "calibration requires equal, non-empty σ/prediction/target lists".into(),
        ));
    }
    let mut pairs = Vec::new();
    let mut excluded = 0usize;
    for ((s, p), t) in sigmas.iter().zip(preds).zip(targets) {
        if s.height() != p.height()
            || s.width() != p.width()
            || s.height() != t.height()
            || s.width() != t.width()
        {
            return Err(VsplitError::Invalid(
                "calibration images disagree on shape".into(),
            ));
        }
        for ((&sv, &pv), &tv) in s.pixels().iter().zip(p.pixels()).zip(t.pixels()) {
            if sv < 0.0 || !sv.is_finite() {
                return Err(VsplitError::Invalid(format!(
                    "σ maps must be finite and nonnegative, got {sv}"
                )));
            }
            if sv == 0.0 {
                excluded += 1;
            } else {
                pairs.push((sv as f64, tv as f64 - pv as f64));
            }
        }
    }
    Ok((pairs, excluded))
}

/// Closed-form scalar minimizing Σ_p [log(s·σ_p) + r_p²/(2 s² σ_p²)]:
/// s² = mean_p (r_p/σ_p)².
pub fn fit_scalar(
    sigmas: &[&Image2D],
    preds: &[&Image2D],
    targets: &[&Image2D],
) -> Result<ScalarFit> {
    let (pairs, excluded) = collect_pairs(sigmas, preds, targets)?;
    if pairs.is_empty() {
        return Err(VsplitError::Invalid(
            "all σ values are zero; nothing to calibrate".into(),
        ));
    }
    let mean_sq = pairs
        .iter()
        .map(|&(s, r)| (r / s) * (r / s))
        .sum::<f64>()
        / pairs.len() as f64;
    let scalar = mean_sq.sqrt();
    if !(scalar > 0.0) {
        return Err(VsplitError::Invalid(
            "residuals are identically zero; calibration scalar would be 0".into(),
        ));
    }
    Ok(ScalarFit {
        scalar,
        excluded_zero_sigma: excluded,
        pixels_used: pairs.len(),
    })
}

/// Gradient descent on log s for the same objective; cross-checks the
/// closed form (they must agree within 0.1%).
pub fn fit_scalar_gd(
    sigmas: &[&Image2D],
    preds: &[&Image2D],
    targets: &[&Image2D],
    iterations: usize,
    lr: f64,
) -> Result<f64> {
    let (pairs, _) = collect_pairs(sigmas, preds, targets)?;
    if pairs.is_empty() {
        return Err(VsplitError::Invalid(
            "all σ values are zero; nothing to calibrate".into(),
        ));
    }
    // objective per pixel: log s + (r/σ)²/(2 s²);  with u = log s and
    // b = mean (r/σ)²:  f(u) = u + (b/2)·e^(−2u),  f'(u) = 1 − b·e^(−2u)
    let b = pairs
        .iter()
        .map(|&(s, r)| (r / s) * (r / s))
        .sum::<f64>()
        / pairs.len() as f64;
    let mut u = 0.0f64;
    for _ in 0..iterations {
        let grad = 1.0 - b * (-2.0 * u).exp();
        u -= lr * grad;
    }
    Ok(u.exp())
}

/// How calibration-curve bins partition the sorted scaled-σ axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStrategy {
    /// Equal pixel counts per bin (remainder goes to the first bins).
    EqualCount,
    /// Equal-width intervals of scaled σ; empty bins are dropped.
    EqualWidth,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveBin {
    pub rmv: f64,
    pub rmse: f64,
    pub count: usize,
}

/// RMV-vs-RMSE calibration curve: pixels sorted by scaled σ, partitioned
/// into `bins` bins; per bin RMV = √mean (s·σ)², RMSE = √mean (c−ĉ)².
pub fn calibration_curve(
    sigmas: &[&Image2D],
    preds: &[&Image2D],
    targets: &[&Image2D],
    scalar: f64,
    bins: usize,
    strategy: BinStrategy,
) -> Result<Vec<CurveBin>> {
    if bins < 2 {
        return Err(VsplitError::Invalid(format!(
            "calibration curve needs at least 2 bins, got {bins}"
        )));
    }
    if !(scalar > 0.0 && scalar.is_finite()) {
        return Err(VsplitError::Invalid(format!(
            "calibration scalar must be positive, got {scalar}"
        )));
    }
    let (mut pairs, _) = collect_pairs(sigmas, preds, targets)?;
    if pairs.len() < bins {
        return Err(VsplitError::Invalid(format!(
            "{} usable pixels is fewer than {bins} bins",
            pairs.len()
        )));
    }
    for p in &mut pairs {
        p.0 *= scalar;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let make_bin = |slice: &[(f64, f64)]| -> CurveBin {
        let n = slice.len() as f64;
        let rmv = (slice.iter().map(|&(v, _)| v * v).sum::<f64>() / n).sqrt();
        let rmse = (slice.iter().map(|&(_, r)| r * r).sum::<f64>() / n).sqrt();
        CurveBin {
            rmv,
            rmse,
            count: slice.len(),
        }
    };

    let mut curve = Vec::with_capacity(bins);
    match strategy {
        BinStrategy::EqualCount => {
            let base = pairs.len() / bins;
            let rem = pairs.len() % bins;
            let mut start = 0usize;
            for j in 0..bins {
                let size = base + usize::from(j < rem);
                curve.push(make_bin(&pairs[start..start + size]));
                start += size;
            }
        }
        BinStrategy::EqualWidth => {
            let lo = pairs.first().expect("non-empty").0;
            let hi = pairs.last().expect("non-empty").0;
            let width = (hi - lo) / bins as f64;
            if width <= 0.0 {
                // all scaled σ identical: a single bin carries everything
                curve.push(make_bin(&pairs));
            } else {
                let mut start = 0usize;
                for j in 0..bins {
                    let upper = if j + 1 == bins {
                        f64::INFINITY
                    } else {
                        lo + width * (j + 1) as f64
                    };
                    let mut end = start;
                    while end < pairs.len() && pairs[end].0 < upper {
                        end += 1;
                    }
                    if end > start {
                        curve.push(make_bin(&pairs[start..end]));
                    }
                    start = end;
                }
            }
        }
    }
    Ok(curve)
}

/// Persisted calibration artifact (`calib.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationState {
    pub schema_version: u32,
    pub calib_scalar1: f64,
    pub calib_scalar2: f64,
    pub bins: usize,
    pub excluded_zero_sigma1: usize,
    pub excluded_zero_sigma2: usize,
    pub pixels_used1: usize,
    pub pixels_used2: usize,
}

impl CalibrationState {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(VsplitError::Config(format!(
                "unsupported calibration schema_version {}",
                self.schema_version
            )));
        }
        for (name, s) in [("calib_scalar1", self.calib_scalar1), ("calib_scalar2", self.calib_scalar2)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(VsplitError::Config(format!(
                    "{name} must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VsplitError::Config(format!("{}: {e}", path.display())))?;
        let state: Self = serde_json::from_str(&text)
            .map_err(|e| VsplitError::Config(format!("{}: {e}", path.display())))?;
        state.validate()?;
        Ok(state)
    }
}

/// Write a per-channel calibration curve as `curve.csv`.
pub fn write_curve_csv(path: &Path, curve1: &[CurveBin], curve2: &[CurveBin]) -> Result<()> {
    let mut out = String::from("channel,bin,rmv,rmse,count\n");
    for (ch, curve) in [(1, curve1), (2, curve2)] {
        for (j, b) in curve.iter().enumerate() {
            out.push_str(&format!("{ch},{j},{},{},{}\n", b.rmv, b.rmse, b.count));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand_distr::{Distribution, Normal};

    fn img(vals: Vec<f32>) -> Image2D {
        let n = vals.len();
        Image2D::new(1, n, vals).unwrap()
    }

    #[test]
    fn residuals_equal_to_sigma_give_scalar_one() {
        let sigma = img(vec![0.5, 1.0, 2.0, 4.0]);
        let pred = img(vec![0.0, 0.0, 0.0, 0.0]);
        let target = img(vec![0.5, 1.0, 2.0, 4.0]); // residual == σ everywhere
        let fit = fit_scalar(&[&sigma], &[&pred], &[&target]).unwrap();
        assert_eq!(fit.scalar, 1.0);
        assert_eq!(fit.pixels_used, 4);
        assert_eq!(fit.excluded_zero_sigma, 0);
    }

    #[test]
    fn doubling_sigma_halves_the_scalar_exactly() {
        let sigma = img(vec![0.3, 0.7, 1.3, 2.9]);
        let doubled = img(sigma.pixels().iter().map(|v| v * 2.0).collect());
        let pred = img(vec![0.0; 4]);
        let target = img(vec![0.21, -0.95, 1.1, 3.4]);
        let a = fit_scalar(&[&sigma], &[&pred], &[&target]).unwrap().scalar;
        let b = fit_scalar(&[&doubled], &[&pred], &[&target]).unwrap().scalar;
        assert!((a - 2.0 * b).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn recovers_a_known_miscalibration_factor() {
        // residual = 2.5·σ·ε over 10^6 pixels → s ≈ 2.5 within 2%
        let mut rng = rng_from(0x5ca1a);
        let unit = Normal::new(0.0f64, 1.0).unwrap();
        let n = 1_000_000usize;
        let mut sigma = Vec::with_capacity(n);
        let mut target = Vec::with_capacity(n);
        for _ in 0..n {
            let s = 0.5 + 1.5 * unit.sample(&mut rng).abs();
            let r = 2.5 * s * unit.sample(&mut rng);
            sigma.push(s as f32);
            target.push(r as f32);
        }
        let sigma = Image2D::new(1000, 1000, sigma).unwrap();
        let target = Image2D::new(1000, 1000, target).unwrap();
        let pred = Image2D::zeros(1000, 1000);
        let fit = fit_scalar(&[&sigma], &[&pred], &[&target]).unwrap();
        assert!(
            (fit.scalar - 2.5).abs() < 0.05,
            "expected ≈2.5, got {}",
            fit.scalar
        );
    }

    #[test]
    fn gradient_descent_agrees_with_closed_form() {
        let mut rng = rng_from(0x9d);
        let unit = Normal::new(0.0f64, 1.0).unwrap();
        let n = 4096usize;
        let sigma = img((0..n).map(|_| (0.2 + unit.sample(&mut rng).abs()) as f32).collect());
        let target = img((0..n).map(|_| (3.0 * unit.sample(&mut rng)) as f32).collect());
        let pred = img(vec![0.0; n]);
        let cf = fit_scalar(&[&sigma], &[&pred], &[&target]).unwrap().scalar;
        let gd = fit_scalar_gd(&[&sigma], &[&pred], &[&target], 500, 0.1).unwrap();
        assert!(
            (gd - cf).abs() / cf < 1e-3,
            "gd {gd} vs closed form {cf}"
        );
    }

    #[test]
    fn zero_sigma_pixels_are_excluded_and_counted() {
        let sigma = img(vec![0.0, 1.0, 0.0, 2.0]);
        let pred = img(vec![0.0; 4]);
        let target = img(vec![9.0, 1.0, 9.0, 2.0]);
        let fit = fit_scalar(&[&sigma], &[&pred], &[&target]).unwrap();
        assert_eq!(fit.excluded_zero_sigma, 2);
        assert_eq!(fit.pixels_used, 2);
        assert_eq!(fit.scalar, 1.0); // both survivors have r == σ

        let all_zero = img(vec![0.0; 4]);
        assert!(fit_scalar(&[&all_zero], &[&pred], &[&target]).is_err());
    }

    #[test]
    fn two_bin_arithmetic_example() {
        // σ {1,2,3,4}, s=1, l=2 → RMVs √((1+4)/2) and √((9+16)/2)
        let sigma = img(vec![1.0, 2.0, 3.0, 4.0]);
        let pred = img(vec![0.0; 4]);
        let target = img(vec![1.0, 1.0, 1.0, 1.0]);
        let curve = calibration_curve(
            &[&sigma],
            &[&pred],
            &[&target],
            1.0,
            2,
            BinStrategy::EqualCount,
        )
        .unwrap();
        assert_eq!(curve.len(), 2);
        assert!((curve[0].rmv - (2.5f64).sqrt()).abs() < 1e-12);
        assert!((curve[1].rmv - (12.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(curve[0].count, 2);
        assert_eq!(curve[1].count, 2);
        // residuals are all 1 → RMSE 1 in both bins
        assert!((curve[0].rmse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_sigma_gives_constant_rmv_bins() {
        let v = 0.75f32;
        let sigma = img(vec![v; 12]);
        let pred = img(vec![0.0; 12]);
        let target = img((0..12).map(|i| i as f32 * 0.1).collect());
        let s = 2.0;
        let curve = calibration_curve(
            &[&sigma],
            &[&pred],
            &[&target],
            s,
            3,
            BinStrategy::EqualCount,
        )
        .unwrap();
        for b in &curve {
            assert!((b.rmv - s * v as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn remainder_pixels_go_to_the_first_bins() {
        let sigma = img((1..=7).map(|i| i as f32).collect());
        let pred = img(vec![0.0; 7]);
        let target = img(vec![1.0; 7]);
        let curve = calibration_curve(
            &[&sigma],
            &[&pred],
            &[&target],
            1.0,
            3,
            BinStrategy::EqualCount,
        )
        .unwrap();
        let counts: Vec<usize> = curve.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![3, 2, 2]);
        assert_eq!(counts.iter().sum::<usize>(), 7);
        // RMV non-decreasing by construction
        for w in curve.windows(2) {
            assert!(w[1].rmv >= w[0].rmv);
        }
        // fewer pixels than bins rejected
        assert!(calibration_curve(
            &[&sigma],
            &[&pred],
            &[&target],
            1.0,
            8,
            BinStrategy::EqualCount
        )
        .is_err());
    }

    #[test]
    fn well_calibrated_synthetic_data_lies_on_the_diagonal() {
        // residual = s·σ·ε with s = 1: RMSE ≈ RMV in every bin
        let mut rng = rng_from(31);
        let unit = Normal::new(0.0f64, 1.0).unwrap();
        let n = 200_000usize;
        let mut sigma = Vec::with_capacity(n);
        let mut target = Vec::with_capacity(n);
        for _ in 0..n {
            let s = 0.3 + unit.sample(&mut rng).abs();
            sigma.push(s as f32);
            target.push((s * unit.sample(&mut rng)) as f32);
        }
        let sigma = Image2D::new(200, 1000, sigma).unwrap();
        let target = Image2D::new(200, 1000, target).unwrap();
        let pred = Image2D::zeros(200, 1000);
        let curve = calibration_curve(
            &[&sigma],
            &[&pred],
            &[&target],
            1.0,
            30,
            BinStrategy::EqualCount,
        )
        .unwrap();
        assert_eq!(curve.len(), 30);
        assert_eq!(curve.iter().map(|b| b.count).sum::<usize>(), n);
        // least-squares slope of RMSE against RMV
        let (mx, my) = curve.iter().fold((0.0, 0.0), |(a, b), c| {
            (a + c.rmv / 30.0, b + c.rmse / 30.0)
        });
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for b in &curve {
            sxy += (b.rmv - mx) * (b.rmse - my);
            sxx += (b.rmv - mx) * (b.rmv - mx);
            syy += (b.rmse - my) * (b.rmse - my);
        }
        let slope = sxy / sxx;
        let r2 = (sxy * sxy) / (sxx * syy);
        assert!((0.97..=1.03).contains(&slope), "slope {slope}");
        assert!(r2 >= 0.99, "R² {r2}");
    }

    #[test]
    fn equal_width_bins_partition_the_value_axis() {
        let sigma = img(vec![1.0, 1.1, 1.2, 4.0, 4.1, 9.9]);
        let pred = img(vec![0.0; 6]);
        let target = img(vec![1.0; 6]);
        let curve = calibration_curve(
            &[&sigma],
            &[&pred],
            &[&target],
            1.0,
            3,
            BinStrategy::EqualWidth,
        )
        .unwrap();
        // widths ≈ [1, 3.966), [3.966, 6.933), [6.933, ∞) → counts 3, 2, 1
        let counts: Vec<usize> = curve.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![3, 2, 1]);
        for w in curve.windows(2) {
            assert!(w[1].rmv >= w[0].rmv);
        }
    }

    #[test]
    fn calibration_state_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.json");
        let state = CalibrationState {
            schema_version: CALIBRATION_SCHEMA_VERSION,
            calib_scalar1: 1.5,
            calib_scalar2: 0.7,
            bins: 30,
            excluded_zero_sigma1: 3,
            excluded_zero_sigma2: 0,
            pixels_used1: 1000,
            pixels_used2: 1003,
        };
        state.save(&p).unwrap();
        let back = CalibrationState::load(&p).unwrap();
        assert_eq!(back.calib_scalar1, 1.5);
        assert_eq!(back.excluded_zero_sigma1, 3);

        let mut bad = state.clone();
        bad.calib_scalar2 = 0.0;
        bad.save(&p).unwrap();
        assert_eq!(CalibrationState::load(&p).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn curve_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        let bin = CurveBin { rmv: 0.5, rmse: 0.625, count: 10 };
        write_curve_csv(&p, &[bin], &[bin, bin]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "channel,bin,rmv,rmse,count");
        assert_eq!(lines[1], "1,0,0.5,0.625,10");
        assert_eq!(lines[2], "2,0,0.5,0.625,10");
        assert_eq!(lines[3], "2,1,0.5,0.625,10");
    }
}
