//! Pixel-wise noise models: the probability of a noisy observation given the
//! underlying clean signal, used as the likelihood head during training and
//! for evaluating reconstruction quality in probabilistic terms.

mod gmm;
mod histogram;

pub use gmm::{fit_gmm, GmmFitOptions, GmmNoiseModel, DENSITY_FLOOR};
pub use histogram::{fit_histogram, HistogramNoiseModel, SMOOTHING_EPS};

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::Image2D;
use crate::error::{Result, VsplitError};
use crate::rng::rng_from;

pub const NOISE_MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    Gmm(GmmNoiseModel),
    Histogram(HistogramNoiseModel),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseModelFile {
    schema_version: u32,
    model: NoiseModel,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::Gmm(m) => m.validate(),
            NoiseModel::Histogram(m) => m.validate(),
        }
    }

    /// Log density of a noisy pixel given its clean value.
    pub fn log_density(&self, noisy: f64, clean: f64) -> f64 {
        match self {
            NoiseModel::Gmm(m) => m.log_density(noisy, clean),
            NoiseModel::Histogram(m) => m.log_density(noisy, clean),
        }
    }

    /// Draw one noisy observation for a clean value.
    pub fn sample(&self, clean: f64, rng: &mut impl rand::Rng) -> f64 {
        match self {
            NoiseModel::Gmm(m) => m.sample(clean, rng),
            NoiseModel::Histogram(m) => m.sample(clean, rng),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = NoiseModelFile {
            schema_version: NOISE_MODEL_SCHEMA_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: NoiseModelFile = serde_json::from_str(&text)
            .map_err(|e| VsplitError::Config(format!("noise model {}: {e}", path.display())))?;
        if file.schema_version != NOISE_MODEL_SCHEMA_VERSION {
            return Err(VsplitError::Config(format!(
                "noise model {}: unsupported schema_version {}",
                path.display(),
                file.schema_version
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }
}

/// Per-pixel log densities of `noisy` under the model given `clean`, plus the
/// total summed in f64.
pub fn log_likelihood_map(
    model: &NoiseModel,
    noisy: &Image2D,
    clean: &Image2D,
) -> Result<(Image2D, f64)> {
    if noisy.height() != clean.height() || noisy.width() != clean.width() {
        return Err(VsplitError::Invalid(
            "log_likelihood_map: shape mismatch".into(),
        ));
    }
    let mut map = Vec::with_capacity(noisy.pixels().len());
    let mut total = 0.0f64;
    for (&x, &c) in noisy.pixels().iter().zip(clean.pixels().iter()) {
        let ld = model.log_density(x as f64, c as f64);
        total += ld;
        map.push(ld as f32);
    }
    Ok((Image2D::new(noisy.height(), noisy.width(), map)?, total))
}

/// Draw a noisy image from a clean one, pixel by pixel, deterministically in
/// the seed.
pub fn sample_noisy(model: &NoiseModel, clean: &Image2D, seed: u64) -> Result<Image2D> {
    let mut rng = rng_from(seed);
    let pixels = clean
        .pixels()
        .iter()
        .map(|&c| model.sample(c as f64, &mut rng) as f32)
        .collect();
    Image2D::new(clean.height(), clean.width(), pixels)
}

/// Mean negative log density over all pixels of a set of (clean, noisy) pairs.
pub fn mean_nll(model: &NoiseModel, pairs: &[(Image2D, Image2D)]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (clean, noisy) in pairs {
        let (_, s) = log_likelihood_map(model, noisy, clean)?;
        total += s;
        count += noisy.pixels().len();
    }
    if count == 0 {
        return Err(VsplitError::Invalid("mean_nll: no pixels".into()));
    }
    Ok(-total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_gmm() -> NoiseModel {
        NoiseModel::Gmm(GmmNoiseModel {
            components: 2,
            degree: 1,
            weight_coeffs: vec![vec![0.4, -0.1], vec![-0.4, 0.1]],
            mean_offset_coeffs: vec![vec![2.0, 1.0], vec![-2.0, -1.0]],
            std_coeffs: vec![vec![3.0, 0.5], vec![4.0, -0.5]],
            signal_min: 0.0,
            signal_max: 800.0,
            std_floor: 0.8,
        })
    }

    #[test]
    fn json_round_trip_preserves_log_densities() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nm.json");
        let m = test_gmm();
        m.save(&path).unwrap();
        let back = NoiseModel::load(&path).unwrap();
        let mut rng = rng_from(2);
        for _ in 0..200 {
            let c = rng.gen_range(0.0..800.0);
            let x = c + rng.gen_range(-30.0..30.0);
            let a = m.log_density(x, c);
            let b = back.log_density(x, c);
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn histogram_round_trip_preserves_log_densities() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nm.json");
        let mut rng = rng_from(3);
        let clean: Vec<f32> = (0..4096).map(|_| rng.gen_range(0.0..50.0)).collect();
        let noisy: Vec<f32> = clean.iter().map(|&c| c + rng.gen_range(-2.0..2.0)).collect();
        let m = NoiseModel::Histogram(
            fit_histogram(
                &[(
                    Image2D::new(64, 64, clean).unwrap(),
                    Image2D::new(64, 64, noisy).unwrap(),
                )],
                32,
            )
            .unwrap(),
        );
        m.save(&path).unwrap();
        let back = NoiseModel::load(&path).unwrap();
        for i in 0..100 {
            let c = i as f64 * 0.5;
            let x = c + 1.0;
            assert!((m.log_density(x, c) - back.log_density(x, c)).abs() <= 1e-9);
        }
    }

    #[test]
    fn load_rejects_unknown_fields_and_bad_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nm.json");
        std::fs::write(
            &path,
            r#"{"schema_version":1,"model":{"kind":"histogram","bins":1,"range_min":0.0,"range_max":1.0,"table":[[1.0]]},"extra":2}"#,
        )
        .unwrap();
        let err = NoiseModel::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        std::fs::write(
            &path,
            r#"{"schema_version":99,"model":{"kind":"histogram","bins":1,"range_min":0.0,"range_max":1.0,"table":[[1.0]]}}"#,
        )
        .unwrap();
        let err = NoiseModel::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn log_likelihood_map_sums_pixel_terms() {
        let m = test_gmm();
        let clean = Image2D::new(2, 2, vec![100.0, 200.0, 300.0, 400.0]).unwrap();
        let noisy = Image2D::new(2, 2, vec![105.0, 195.0, 290.0, 410.0]).unwrap();
        let (map, total) = log_likelihood_map(&m, &noisy, &clean).unwrap();
        let mut expect = 0.0;
        for i in 0..4 {
            let ld = m.log_density(noisy.pixels()[i] as f64, clean.pixels()[i] as f64);
            assert!((map.pixels()[i] as f64 - ld).abs() < 1e-6);
            expect += ld;
        }
        assert!((total - expect).abs() < 1e-9);
    }

    #[test]
    fn sample_noisy_round_trip_refit_matches_generator_nll() {
        // draw pairs from a known model, refit, and compare held-out NLL
        let generator = NoiseModel::Gmm(GmmNoiseModel {
            components: 1,
            degree: 0,
            weight_coeffs: vec![vec![0.0]],
            mean_offset_coeffs: vec![vec![0.0]],
            std_coeffs: vec![vec![60.0]], // softplus(60) ~= 60
            signal_min: 0.0,
            signal_max: 1000.0,
            std_floor: 1.0,
        });
        let mut clean_pixels = Vec::new();
        let mut rng = rng_from(31);
        let side = 360usize;
        for _ in 0..side * side {
            clean_pixels.push(rng.gen_range(0.0f32..1000.0));
        }
        let clean = Image2D::new(side, side, clean_pixels).unwrap();
        let noisy = sample_noisy(&generator, &clean, 77).unwrap();
        let opts = GmmFitOptions {
            components: 1,
            degree: 0,
            iterations: 500,
            batch_pixels: 8192,
            lr: 0.05,
            seed: 9,
        };
        let refit = NoiseModel::Gmm(fit_gmm(&[(clean.clone(), noisy.clone())], &opts).unwrap());

        // held-out pairs from the same generator
        let held_clean = {
            let mut v = Vec::new();
            for _ in 0..256 * 256 {
                v.push(rng.gen_range(0.0f32..1000.0));
            }
            Image2D::new(256, 256, v).unwrap()
        };
        let held_noisy = sample_noisy(&generator, &held_clean, 78).unwrap();
        let pairs = vec![(held_clean, held_noisy)];
        let nll_gen = mean_nll(&generator, &pairs).unwrap();
        let nll_fit = mean_nll(&refit, &pairs).unwrap();
        assert!(
            (nll_fit - nll_gen).abs() / nll_gen.abs() < 0.02,
            "refit NLL {nll_fit} vs generator {nll_gen}"
        );
    }
}
