//! Training objective: two-channel reconstruction log-likelihood (Gaussian
//! or noise-model head) minus the weighted hierarchical KL.
//!
//! Intensity convention: network inputs are standardized as (x − m)/s and
//! channel targets as (t − m/2)/s, where (m, s) are the mean/std of the mixed
//! input over the training split. Halving m keeps the identity "channels sum
//! to the input" intact in standardized space. Noise-model likelihoods are
//! evaluated in raw intensity units, so predictions are un-standardized
//! (ĉ·s + m/2) before being handed to the noise model.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Image2D, SplitSample};
use crate::error::{Result, VsplitError};
use crate::noisemodel::NoiseModel;
use crate::vse::{kl_loss, kl_tensors, LikelihoodHead, SampleMode, VseModel};

/// Intensity standardization constants, fit on the training split's mixed
/// inputs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Population mean/std over all pixels of the given (mixed input) images.
    pub fn fit(inputs: &[&Image2D]) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = 0.0f64;
        for img in inputs {
            n += img.pixels().len();
            sum += img.pixels().iter().map(|&v| v as f64).sum::<f64>();
        }
        if n == 0 {
            return Err(VsplitError::Invalid("normalizer: no pixels".into()));
        }
        let mean = sum / n as f64;
        let mut ss = 0.0f64;
        for img in inputs {
            ss += img
                .pixels()
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let std = (ss / n as f64).sqrt();
        if !(std > 0.0) {
            return Err(VsplitError::Invalid(
                "normalizer: input intensities are constant (std = 0)".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn standardize_input(&self, v: f32) -> f32 {
        ((v as f64 - self.mean) / self.std) as f32
    }

    pub fn standardize_target(&self, v: f32) -> f32 {
        ((v as f64 - 0.5 * self.mean) / self.std) as f32
    }

    /// Map a standardized channel prediction back to raw intensity units.
    pub fn denorm_pred(&self, v: f32) -> f32 {
        (v as f64 * self.std + 0.5 * self.mean) as f32
    }

    /// Tensor version of [`Self::denorm_pred`]; differentiable.
    pub fn denorm_pred_tensor(&self, t: &Tensor) -> Result<Tensor> {
        t.affine(self.std, 0.5 * self.mean).map_err(Into::into)
    }
}

/// A training batch in standardized intensity space, channels-last.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x: Tensor,
    pub t1: Tensor,
    pub t2: Tensor,
    pub h: usize,
    pub w: usize,
    pub batch: usize,
}

/// Assemble a batch from samples of identical spatial size.
pub fn make_batch(
    samples: &[&SplitSample],
    norm: &Normalizer,
    dtype: DType,
    dev: &Device,
) -> Result<TrainBatch> {
    if samples.is_empty() {
        return Err(VsplitError::Invalid("make_batch: empty batch".into()));
    }
    let (h, w) = (samples[0].input.height(), samples[0].input.width());
    let hw = h * w;
    let b = samples.len();
    let mut x = Vec::with_capacity(b * hw);
    let mut t1 = Vec::with_capacity(b * hw);
    let mut t2 = Vec::with_capacity(b * hw);
    for s in samples {
        if s.input.height() != h || s.input.width() != w {
            return Err(VsplitError::Invalid(
                "make_batch: samples must share spatial dims".into(),
            ));
        }
        x.extend(s.input.pixels().iter().map(|&v| norm.standardize_input(v)));
        t1.extend(s.target1.pixels().iter().map(|&v| norm.standardize_target(v)));
        t2.extend(s.target2.pixels().iter().map(|&v| norm.standardize_target(v)));
    }
    let to = |v: Vec<f32>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, (b, hw, 1), dev)?.to_dtype(dtype)?)
    };
    Ok(TrainBatch {
        x: to(x)?,
        t1: to(t1)?,
        t2: to(t2)?,
        h,
        w,
        batch: b,
    })
}

/// Batch-mean over samples of the pixel-summed unit-variance Gaussian
/// log-likelihood: Σ_p [−½log(2π) − ½(pred−target)²].
pub fn gaussian_log_likelihood(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let dims = pred.dims3()?;
    if dims != target.dims3()? {
        return Err(VsplitError::Invalid(
            "gaussian_log_likelihood: shape mismatch".into(),
        ));
    }
    let (b, hw, c) = dims;
    let sq = (pred - target)?.sqr()?.sum_all()?;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    sq.affine(-0.5 / b as f64, -half_log_2pi * (hw * c) as f64)
        .map_err(Into::into)
}

/// Scalar loss components, extracted in f64 for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub recon1: f64,
    pub recon2: f64,
    pub kl: f64,
}

fn nm_recon(
    nm: &NoiseModel,
    pred_std: &Tensor,
    target_std: &Tensor,
    norm: &Normalizer,
) -> Result<Tensor> {
    let gmm = match nm {
        NoiseModel::Gmm(g) => g,
        NoiseModel::Histogram(_) => {
            return Err(VsplitError::Invalid(
                "histogram noise models are not differentiable; fit a GMM for training".into(),
            ))
        }
    };
    let pred_raw = norm.denorm_pred_tensor(pred_std)?;
    let target_raw = norm.denorm_pred_tensor(&target_std.detach())?;
    let ll = gmm.log_density_tensor(&target_raw, &pred_raw)?;
    let b = ll.dims3()?.0;
    ll.sum_all()?.affine(1.0 / b as f64, 0.0).map_err(Into::into)
}

/// One-sample ELBO loss: −[recon1 + recon2] + kl. The latent sample is drawn
/// stochastically from the given seed, so a (seed, parameters, batch) triple
/// fully determines the result.
pub fn total_loss(
    model: &VseModel,
    batch: &TrainBatch,
    norm: &Normalizer,
    nm1: Option<&NoiseModel>,
    nm2: Option<&NoiseModel>,
    seed: u64,
) -> Result<(Tensor, LossParts)> {
    total_loss_with_mode(model, batch, norm, nm1, nm2, seed, SampleMode::Stochastic)
}

/// [`total_loss`] with an explicit latent sampling mode; validation uses
/// posterior means for a sampling-free, deterministic signal.
pub fn total_loss_with_mode(
    model: &VseModel,
    batch: &TrainBatch,
    norm: &Normalizer,
    nm1: Option<&NoiseModel>,
    nm2: Option<&NoiseModel>,
    seed: u64,
    mode: SampleMode,
) -> Result<(Tensor, LossParts)> {
    let head = model.config.likelihood_head;
    if head == LikelihoodHead::NoiseModel && (nm1.is_none() || nm2.is_none()) {
        return Err(VsplitError::Invalid(
            "noise_model likelihood head requires both channel noise models".into(),
        ));
    }
    let master = batch.x.dtype();
    let (c1, c2, hier) = model.forward(&batch.x, (batch.h, batch.w), mode, seed)?;
    let c1 = if c1.dtype() == master { c1 } else { c1.to_dtype(master)? };
    let c2 = if c2.dtype() == master { c2 } else { c2.to_dtype(master)? };
    let (recon1, recon2) = match head {
        LikelihoodHead::Gaussian => (
            gaussian_log_likelihood(&c1, &batch.t1)?,
            gaussian_log_likelihood(&c2, &batch.t2)?,
        ),
        LikelihoodHead::NoiseModel => (
            nm_recon(nm1.expect("checked"), &c1, &batch.t1, norm)?,
            nm_recon(nm2.expect("checked"), &c2, &batch.t2, norm)?,
        ),
    };
    let maps = kl_tensors(&hier)?;
    let kl = kl_loss(
        &maps,
        model.config.kl_mode,
        model.config.kl_weight,
        model.config.free_bits,
    )?;
    let kl = if kl.dtype() == master { kl } else { kl.to_dtype(master)? };
    let loss = ((recon1.clone() + recon2.clone())?.neg()? + kl.clone())?;
    let scalar = |t: &Tensor| -> Result<f64> {
        Ok(t.to_dtype(DType::F64)?.reshape(())?.to_scalar::<f64>()?)
    };
    let parts = LossParts {
        total: scalar(&loss)?,
        recon1: scalar(&recon1)?,
        recon2: scalar(&recon2)?,
        kl: scalar(&kl)?,
    };
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn_tensor;
    use crate::noisemodel::GmmNoiseModel;
    use crate::vse::{KlMode, VseConfig};

    fn tiny_model(dev: &Device, dtype: DType) -> VseModel {
        let cfg = VseConfig {
            levels: 2,
            latent_channels: 2,
            base_filters: 8,
            patch: 16,
            kl_mode: KlMode::Denoisplit,
            kl_weight: 1.0,
            free_bits: 0.0,
            ..Default::default()
        };
        VseModel::new(&cfg, dtype, dev, 7).unwrap()
    }

    fn tiny_batch(dev: &Device, dtype: DType, seed: u64) -> TrainBatch {
        // targets that actually sum to the input, all near the normalizer's
        // intensity scale, as in real data
        let mk = |s: u64| -> Vec<f32> {
            let t = randn_tensor(&[256], DType::F32, dev, s).unwrap();
            t.to_vec1::<f32>().unwrap()
        };
        let norm = Normalizer { mean: 100.0, std: 10.0 };
        let imgs: Vec<SplitSample> = (0..2)
            .map(|i| {
                let a = mk(seed + 3 * i);
                let b = mk(seed + 3 * i + 1);
                let input: Vec<f32> = a.iter().map(|x| x * 10.0 + 100.0).collect();
                let t1: Vec<f32> = input
                    .iter()
                    .zip(&b)
                    .map(|(x, n)| 0.5 * x + 3.0 * n)
                    .collect();
                let t2: Vec<f32> = input.iter().zip(&t1).map(|(x, t)| x - t).collect();
                SplitSample {
                    input: Image2D::new(16, 16, input).unwrap(),
                    target1: Image2D::new(16, 16, t1).unwrap(),
                    target2: Image2D::new(16, 16, t2).unwrap(),
                    clean1: None,
                    clean2: None,
                }
            })
            .collect();
        let refs: Vec<&SplitSample> = imgs.iter().collect();
        make_batch(&refs, &norm, dtype, dev).unwrap()
    }

    #[test]
    fn gaussian_log_likelihood_analytic_values() {
        let dev = Device::Cpu;
        let log2pi = (2.0 * std::f64::consts::PI).ln();
        // pred == target, 4 pixels → −2 log(2π)
        let p = Tensor::zeros((1, 4, 1), DType::F64, &dev).unwrap();
        let v = gaussian_log_likelihood(&p, &p).unwrap().to_scalar::<f64>().unwrap();
        assert!((v - (-2.0 * log2pi)).abs() < 1e-12);
        // one pixel diff 1 → −½log2π − ½
        let a = Tensor::zeros((1, 1, 1), DType::F64, &dev).unwrap();
        let b = Tensor::ones((1, 1, 1), DType::F64, &dev).unwrap();
        let v = gaussian_log_likelihood(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        assert!((v - (-0.5 * log2pi - 0.5)).abs() < 1e-12);
        // monotone decrease in |diff|
        let mut last = f64::INFINITY;
        for d in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let b = Tensor::full(d, (1, 1, 1), &dev).unwrap();
            let v = gaussian_log_likelihood(&a, &b).unwrap().to_scalar::<f64>().unwrap();
            assert!(v < last || d == 0.0);
            last = v;
        }
    }

    #[test]
    fn batch_mean_convention() {
        let dev = Device::Cpu;
        // two samples: diffs 1 and 3 on a single pixel
        let p = Tensor::zeros((2, 1, 1), DType::F64, &dev).unwrap();
        let t = Tensor::from_vec(vec![1.0f64, 3.0], (2, 1, 1), &dev).unwrap();
        let v = gaussian_log_likelihood(&p, &t).unwrap().to_scalar::<f64>().unwrap();
        let log2pi = (2.0 * std::f64::consts::PI).ln();
        let expect = -0.5 * log2pi - 0.5 * (1.0 + 9.0) / 2.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn normalizer_round_trips_and_preserves_mixture_identity() {
        let norm = Normalizer { mean: 120.0, std: 40.0 };
        // input standardization differs from target standardization by m/2
        let x = 200.0f32;
        let (c1, c2) = (80.0f32, 120.0f32); // c1 + c2 == x
        let sx = norm.standardize_input(x);
        let s1 = norm.standardize_target(c1);
        let s2 = norm.standardize_target(c2);
        assert!((s1 + s2 - sx).abs() < 1e-6, "identity broken: {s1}+{s2} != {sx}");
        assert!((norm.denorm_pred(s1) - c1).abs() < 1e-4);
    }

    #[test]
    fn normalizer_fit_matches_population_stats() {
        let a = Image2D::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let n = Normalizer::fit(&[&a]).unwrap();
        assert!((n.mean - 2.5).abs() < 1e-12);
        assert!((n.std - (1.25f64).sqrt()).abs() < 1e-12);
        let flat = Image2D::new(1, 4, vec![5.0; 4]).unwrap();
        assert!(Normalizer::fit(&[&flat]).is_err());
    }

    #[test]
    fn zero_kl_weight_reduces_to_negative_reconstruction() {
        let dev = Device::Cpu;
        let mut model = tiny_model(&dev, DType::F64);
        model.config.kl_weight = 0.0; // objective-level override for the test
        let batch = tiny_batch(&dev, DType::F64, 5);
        let norm = Normalizer { mean: 100.0, std: 10.0 };
        let (_, parts) = total_loss(&model, &batch, &norm, None, None, 11).unwrap();
        assert_eq!(parts.kl, 0.0);
        let expect = -(parts.recon1 + parts.recon2);
        assert!((parts.total - expect).abs() < 1e-9, "{} vs {expect}", parts.total);
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let dev = Device::Cpu;
        let model = tiny_model(&dev, DType::F32);
        let batch = tiny_batch(&dev, DType::F32, 5);
        let norm = Normalizer { mean: 100.0, std: 10.0 };
        let (_, a) = total_loss(&model, &batch, &norm, None, None, 42).unwrap();
        let (_, b) = total_loss(&model, &batch, &norm, None, None, 42).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.recon1.to_bits(), b.recon1.to_bits());
        let (_, c) = total_loss(&model, &batch, &norm, None, None, 43).unwrap();
        assert_ne!(a.total.to_bits(), c.total.to_bits());
    }

    #[test]
    fn noise_model_head_requires_both_models() {
        let dev = Device::Cpu;
        let cfg = VseConfig {
            levels: 2,
            latent_channels: 2,
            base_filters: 8,
            patch: 16,
            likelihood_head: LikelihoodHead::NoiseModel,
            free_bits: 0.0,
            ..Default::default()
        };
        let model = VseModel::new(&cfg, DType::F32, &dev, 7).unwrap();
        let batch = tiny_batch(&dev, DType::F32, 5);
        let norm = Normalizer { mean: 100.0, std: 10.0 };
        assert!(total_loss(&model, &batch, &norm, None, None, 1).is_err());

        let gmm = NoiseModel::Gmm(GmmNoiseModel {
            components: 1,
            degree: 0,
            weight_coeffs: vec![vec![0.0]],
            mean_offset_coeffs: vec![vec![0.0]],
            std_coeffs: vec![vec![10.0]],
            signal_min: 0.0,
            signal_max: 200.0,
            std_floor: 0.1,
        });
        let (_, parts) =
            total_loss(&model, &batch, &norm, Some(&gmm), Some(&gmm), 1).unwrap();
        assert!(parts.total.is_finite());
        // histogram head rejected
        let hist = NoiseModel::Histogram(crate::noisemodel::HistogramNoiseModel {
            bins: 2,
            range_min: 0.0,
            range_max: 200.0,
            table: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        });
        assert!(total_loss(&model, &batch, &norm, Some(&hist), Some(&gmm), 1).is_err());
    }

    #[test]
    fn decoder_parameter_gradient_matches_finite_differences() {
        // f64 2-level 16x16 model, a few parameters from a decoder layer
        let dev = Device::Cpu;
        let model = tiny_model(&dev, DType::F64);
        let batch = tiny_batch(&dev, DType::F64, 9);
        let norm = Normalizer { mean: 100.0, std: 10.0 };
        let seed = 4u64;
        let (loss, _) = total_loss(&model, &batch, &norm, None, None, seed).unwrap();
        let grads = loss.backward().unwrap();
        let params = model.params();
        let (name, var) = params
            .iter()
            .find(|(n, _)| n == "out_head.w")
            .expect("decoder layer present");
        let g = grads.get(var).expect("gradient present").flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let dims = var.as_tensor().dims().to_vec();
        let eps = 1e-5;
        let mut checked = 0;
        for idx in [0usize, 7, 19] {
            if g[idx].abs() < 1e-6 {
                continue;
            }
            let run = |delta: f64| -> f64 {
                let mut v = base.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, dims.clone(), &dev).unwrap()).unwrap();
                let (_, parts) = total_loss(&model, &batch, &norm, None, None, seed).unwrap();
                parts.total
            };
            let fd = (run(eps) - run(-eps)) / (2.0 * eps);
            var.set(&Tensor::from_vec(base.clone(), dims.clone(), &dev).unwrap()).unwrap();
            let rel = (fd - g[idx]).abs() / g[idx].abs().max(1e-12);
            assert!(rel < 1e-3, "{name}[{idx}]: fd {fd} vs autodiff {} (rel {rel})", g[idx]);
            checked += 1;
        }
        assert!(checked >= 2, "too few parameters had usable gradients");
    }
}

