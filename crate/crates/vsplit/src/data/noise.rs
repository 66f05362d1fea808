//! Synthetic noise injection: scaled Poisson (shot noise) and additive
//! Gaussian (readout noise).
//!
//! Protocol: Poisson first — each pixel is replaced by
//! `factor * Poisson(pixel / factor)` — then Gaussian with a standard
//! deviation expressed as `scale * reference_std`, where the reference is the
//! standard deviation of the clean mixed inputs of the whole dataset.

use rand_distr::{Distribution, Normal, Poisson};

use super::Image2D;
use crate::error::{Result, VsplitError};
use crate::rng::rng_from;

/// Scaled Poisson shot noise: `out[p] = factor * PoissonSample(img[p] / factor)`,
/// so `E[out] = img` and `Var[out] = factor * img`.
pub fn add_poisson_noise(img: &Image2D, factor: f64, seed: u64) -> Result<Image2D> {
    if !(factor > 0.0) {
        return Err(VsplitError::Invalid(format!(
            "poisson factor must be > 0, got {factor}"
        )));
    }
    if let Some(&bad) = img.pixels().iter().find(|&&v| v < 0.0) {
        return Err(VsplitError::Invalid(format!(
            "poisson noise requires nonnegative pixels, found {bad}"
        )));
    }
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(img.pixels().len());
    for &v in img.pixels() {
        let rate = v as f64 / factor;
        let sample = if rate > 0.0 {
            let dist = Poisson::new(rate).map_err(|e| {
                VsplitError::Invalid(format!("invalid poisson rate {rate}: {e:?}"))
            })?;
            dist.sample(&mut rng)
        } else {
            0.0
        };
        out.push((sample * factor) as f32);
    }
    Image2D::new(img.height(), img.width(), out)
}

/// Additive zero-mean Gaussian noise with std `scale * reference_std`.
/// `scale == 0` returns the input bit-exactly.
pub fn add_gaussian_noise(
    img: &Image2D,
    scale: f64,
    reference_std: f64,
    seed: u64,
) -> Result<Image2D> {
    if scale < 0.0 {
        return Err(VsplitError::Invalid(format!(
            "gaussian scale must be >= 0, got {scale}"
        )));
    }
    if !(reference_std > 0.0) {
        return Err(VsplitError::Invalid(format!(
            "reference_std must be > 0, got {reference_std}"
        )));
    }
    if scale == 0.0 {
        return Ok(img.clone());
    }
    let std = scale * reference_std;
    let normal = Normal::new(0.0, std)
        .map_err(|e| VsplitError::Invalid(format!("invalid gaussian std {std}: {e:?}")))?;
    let mut rng = rng_from(seed);
    let out = img
        .pixels()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Image2D::new(img.height(), img.width(), out)
}

/// Population standard deviation over all pixels of all given images,
/// computed in f64. Used as the Gaussian-noise reference on the clean mixed
/// inputs of a dataset.
pub fn reference_std(images: &[&Image2D]) -> Result<f64> {
    let n: usize = images.iter().map(|i| i.pixels().len()).sum();
    if n == 0 {
        return Err(VsplitError::Invalid(
            "reference_std over an empty pixel set".into(),
        ));
    }
    let mean = images
        .iter()
        .flat_map(|i| i.pixels())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n as f64;
    let var = images
        .iter()
        .flat_map(|i| i.pixels())
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    Ok(var.sqrt())
}

/// Sample-moment summary used by the noise tests.
#[cfg(test)]
fn moments(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let vals: Vec<f64> = values.collect();
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_of_zero_image_is_zero() {
        let img = Image2D::zeros(8, 8);
        let out = add_poisson_noise(&img, 1000.0, 3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn poisson_rejects_bad_inputs() {
        let img = Image2D::zeros(8, 8);
        assert!(add_poisson_noise(&img, 0.0, 0).is_err());
        let neg = Image2D::new(1, 1, vec![-1.0]).unwrap();
        assert!(add_poisson_noise(&neg, 1000.0, 0).is_err());
    }

    #[test]
    fn poisson_samples_live_on_the_factor_lattice_with_correct_moments() {
        // pixel 2000, factor 1000: samples in {0, 1000, 2000, ...}; the
        // empirical mean over 10^6 draws must sit within 3 standard errors
        // of 2000 (se = sqrt(factor * value / n)).
        let n = 1_000_000usize;
        let h = 1000;
        let w = n / h;
        let img = Image2D::new(h, w, vec![2000.0; n]).unwrap();
        let out = add_poisson_noise(&img, 1000.0, 11).unwrap();
        for &v in out.pixels().iter().take(1000) {
            assert_eq!(v % 1000.0, 0.0, "sample {v} not on the factor lattice");
        }
        let (mean, var, n) = moments(out.pixels().iter().map(|&v| v as f64));
        let se_mean = (2000.0f64 * 1000.0 / n as f64).sqrt();
        assert!(
            (mean - 2000.0).abs() < 3.0 * se_mean,
            "mean {mean} vs 2000 +- {}",
            3.0 * se_mean
        );
        // Var(S^2) ~= (mu4 - sigma^4)/n with mu4 = factor^4 * (lambda + 3 lambda^2)
        // for the scaled Poisson at lambda = 2.
        let sigma2 = 2000.0f64 * 1000.0;
        let mu4 = 1000.0f64.powi(4) * (2.0 + 3.0 * 4.0);
        let se_var = ((mu4 - sigma2 * sigma2) / n as f64).sqrt();
        assert!(
            (var - sigma2).abs() < 3.0 * se_var,
            "var {var} vs {sigma2} +- {}",
            3.0 * se_var
        );
    }

    #[test]
    fn poisson_is_deterministic() {
        let img = Image2D::new(4, 4, vec![500.0; 16]).unwrap();
        let a = add_poisson_noise(&img, 1000.0, 5).unwrap();
        let b = add_poisson_noise(&img, 1000.0, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_scale_zero_is_bit_exact_identity() {
        let img = Image2D::new(2, 2, vec![1.5, -2.25, 0.0, 7.0]).unwrap();
        let out = add_gaussian_noise(&img, 0.0, 100.0, 9).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn gaussian_noise_matches_requested_std() {
        let n = 1_000_000usize;
        let img = Image2D::new(1000, n / 1000, vec![0.0; n]).unwrap();
        for (scale, reference, tol) in [(1.0, 100.0, 0.5), (4.0, 50.0, 1.0)] {
            let out = add_gaussian_noise(&img, scale, reference, 13).unwrap();
            let (_, var, _) = moments(out.pixels().iter().map(|&v| v as f64));
            let std = var.sqrt();
            let expect = scale * reference;
            assert!(
                (std - expect).abs() < tol,
                "std {std} vs {expect} +- {tol}"
            );
        }
    }

    #[test]
    fn gaussian_rejects_nonpositive_reference() {
        let img = Image2D::zeros(4, 4);
        assert!(add_gaussian_noise(&img, 1.0, 0.0, 0).is_err());
        assert!(add_gaussian_noise(&img, -1.0, 10.0, 0).is_err());
    }

    #[test]
    fn reference_std_matches_population_formula() {
        let a = Image2D::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = reference_std(&[&a]).unwrap();
        // population std of {1,2,3,4} = sqrt(5/4)
        assert!((s - (1.25f64).sqrt()).abs() < 1e-12);
    }
}
