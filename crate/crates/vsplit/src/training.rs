//! Optimization loop: per-epoch patch sampling, adaptive-moment updates,
//! posterior-mean validation, early stopping, and deterministic resume.

use std::path::Path;

use candle_core::{DType, Device};
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::data::{extract_patches, DatasetSplit, SplitSample};
use crate::error::{Result, VsplitError};
use crate::expconfig::{ExperimentConfig, Precision};
use crate::inference::posterior_mean_prediction;
use crate::metrics::{ri_psnr, PSNR_CAP_DB};
use crate::nn::{Adam, AdamParams};
use crate::noisemodel::NoiseModel;
use crate::objective::{make_batch, total_loss, total_loss_with_mode, Normalizer};
use crate::rng::{derive_seed, rng_from};
use crate::vse::{SampleMode, VseModel};

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub recon1: f64,
    pub recon2: f64,
    pub kl: f64,
    pub val_ri_psnr_ch1: f64,
    pub val_ri_psnr_ch2: f64,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation loss seen.
    pub best: Checkpoint,
    /// State at the end of the run (resume point).
    pub last: Checkpoint,
    pub log: Vec<EpochRow>,
    /// True when a non-finite loss aborted the run; `best`/`last` then hold
    /// the last good state.
    pub aborted: bool,
    /// Human-readable abort reason, when `aborted`.
    pub diagnostic: Option<String>,
}

/// Write the metrics log as CSV.
pub fn write_metrics_log(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from(
        "epoch,train_loss,val_loss,recon1,recon2,kl,val_ri_psnr_ch1,val_ri_psnr_ch2\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.recon1,
            r.recon2,
            r.kl,
            r.val_ri_psnr_ch1,
            r.val_ri_psnr_ch2
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Crop an image pair-consistent sample to sides divisible by 2^levels so the
/// encoder accepts it.
fn crop_to_grid(s: &SplitSample, unit: usize) -> Result<SplitSample> {
    let h = (s.input.height() / unit) * unit;
    let w = (s.input.width() / unit) * unit;
    if h == 0 || w == 0 {
        return Err(VsplitError::Invalid(format!(
            "sample {}x{} too small for 2^levels = {unit}",
            s.input.height(),
            s.input.width()
        )));
    }
    if h == s.input.height() && w == s.input.width() {
        return Ok(s.clone());
    }
    let c = |img: &crate::data::Image2D| img.crop(0, 0, h, w);
    Ok(SplitSample {
        input: c(&s.input)?,
        target1: c(&s.target1)?,
        target2: c(&s.target2)?,
        clean1: s.clean1.as_ref().map(&c).transpose()?,
        clean2: s.clean2.as_ref().map(&c).transpose()?,
    })
}

/// Posterior-mean validation: mean loss plus per-channel RI-PSNR against the
/// cleanest available channel images (clean if present, else the targets).
pub fn validate(
    model: &VseModel,
    samples: &[SplitSample],
    norm: &Normalizer,
    nm1: Option<&NoiseModel>,
    nm2: Option<&NoiseModel>,
) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(VsplitError::Invalid("validate: no samples".into()));
    }
    let unit = 1usize << model.config.levels;
    let mut loss_sum = 0.0;
    let mut psnr1_sum = 0.0;
    let mut psnr2_sum = 0.0;
    for s in samples {
        let s = crop_to_grid(s, unit)?;
        let batch = make_batch(&[&s], norm, model.param_dtype(), model.device())?;
        let (_, parts) =
            total_loss_with_mode(model, &batch, norm, nm1, nm2, 0, SampleMode::PosteriorMean)?;
        loss_sum += parts.total;
        let (p1, p2) = posterior_mean_prediction(model, norm, &s.input)?;
        let g1 = s.clean1.as_ref().unwrap_or(&s.target1);
        let g2 = s.clean2.as_ref().unwrap_or(&s.target2);
        psnr1_sum += ri_psnr(&p1, g1)?.min(PSNR_CAP_DB);
        psnr2_sum += ri_psnr(&p2, g2)?.min(PSNR_CAP_DB);
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, psnr1_sum / n, psnr2_sum / n))
}

/// Train a model on the split's train partition, validating per epoch.
///
/// Deterministic for a fixed config: patch draws, batch order, and latent
/// noise all derive from `config.training.seed` and the epoch/step indices,
/// so resuming from the `last` checkpoint of an interrupted run continues
/// exactly where an uninterrupted run would be.
pub fn train(
    config: &ExperimentConfig,
    data: &DatasetSplit,
    nm1: Option<&NoiseModel>,
    nm2: Option<&NoiseModel>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(VsplitError::Invalid(
            "training requires non-empty train and val partitions".into(),
        ));
    }
    let dev = Device::Cpu;
    let tc = &config.training;
    let master_seed = tc.seed;

    // determinism mode guarantees bit-reproducible runs; half precision
    // would change results between runs on different BLAS backends
    let compute_dtype = match (tc.determinism, tc.precision) {
        (false, Precision::Mixed16) => DType::F16,
        _ => DType::F32,
    };

    let norm = match resume {
        Some(ck) => ck.normalizer,
        None => Normalizer::fit(&data.train.iter().map(|s| &s.input).collect::<Vec<_>>())?,
    };
    let mut model = match resume {
        Some(ck) => ck.build_model(DType::F32, &dev)?,
        None => VseModel::new(&config.model, DType::F32, &dev, derive_seed(master_seed, &[0xde1]))?,
    };
    model.set_compute_dtype(compute_dtype);
    let mut opt = Adam::new(AdamParams {
        lr: tc.lr,
        ..Default::default()
    });
    let mut step: u64 = 0;
    let mut start_epoch: u64 = 0;
    let mut best_val = f64::INFINITY;
    let mut since_improve: u64 = 0;
    if let Some(ck) = resume {
        if let Some((t, entries)) = ck.adam_state(&model, &dev)? {
            opt.load_state(t, entries)?;
        }
        step = ck.step;
        start_epoch = ck.epoch;
        best_val = ck.best_val_loss.unwrap_or(f64::INFINITY);
        since_improve = ck.epochs_since_improve;
    }

    let snapshot = |model: &VseModel, opt: &Adam, step, epoch, best, since| {
        Checkpoint::from_model(model, &norm, step, epoch, Some(best), since, Some(opt))
    };

    let mut best_ck: Option<Checkpoint> = resume.cloned();
    let mut last_ck: Option<Checkpoint> = resume.cloned();
    let mut log = Vec::new();
    let params = model.params();

    for epoch in start_epoch..tc.epochs as u64 {
        // fresh random crops every epoch, derived from (seed, epoch, sample)
        let mut patches = Vec::new();
        for (i, s) in data.train.iter().enumerate() {
            patches.extend(extract_patches(
                s,
                config.model.patch,
                tc.patches_per_sample,
                derive_seed(master_seed, &[0x9a7c, epoch, i as u64]),
            )?);
        }
        patches.shuffle(&mut rng_from(derive_seed(master_seed, &[0xa11, epoch])));

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in patches.chunks(tc.batch) {
            let refs: Vec<&SplitSample> = chunk.iter().collect();
            let batch = make_batch(&refs, &norm, DType::F32, &dev)?;
            let (loss, parts) = total_loss(
                &model,
                &batch,
                &norm,
                nm1,
                nm2,
                derive_seed(master_seed, &[0x57e9, step]),
            )?;
            if !parts.total.is_finite() {
                let diag = format!(
                    "aborted at epoch {epoch}, step {step}: non-finite loss \
                     (total {}, recon1 {}, recon2 {}, kl {})",
                    parts.total, parts.recon1, parts.recon2, parts.kl
                );
                let fallback = snapshot(&model, &opt, step, epoch, best_val, since_improve)?;
                let last = last_ck.unwrap_or(fallback);
                return Ok(TrainOutcome {
                    best: best_ck.unwrap_or_else(|| last.clone()),
                    last,
                    log,
                    aborted: true,
                    diagnostic: Some(diag),
                });
            }
            let grads = loss.backward()?;
            opt.step(&params, &grads)?;
            step += 1;
            sums.0 += parts.total;
            sums.1 += parts.recon1;
            sums.2 += parts.recon2;
            sums.3 += parts.kl;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let (val_loss, psnr1, psnr2) = validate(&model, &data.val, &norm, nm1, nm2)?;
        log.push(EpochRow {
            epoch: epoch + 1,
            train_loss: sums.0 / nb,
            val_loss,
            recon1: sums.1 / nb,
            recon2: sums.2 / nb,
            kl: sums.3 / nb,
            val_ri_psnr_ch1: psnr1,
            val_ri_psnr_ch2: psnr2,
        });

        if val_loss < best_val {
            best_val = val_loss;
            since_improve = 0;
            best_ck = Some(snapshot(&model, &opt, step, epoch + 1, best_val, 0)?);
        } else {
            since_improve += 1;
        }
        last_ck = Some(snapshot(&model, &opt, step, epoch + 1, best_val, since_improve)?);
        if since_improve >= tc.patience as u64 {
            break;
        }
    }

    let last = match last_ck {
        Some(ck) => ck,
        // epochs already exhausted before this run started
        None => snapshot(&model, &opt, step, start_epoch, best_val, since_improve)?,
    };
    Ok(TrainOutcome {
        best: best_ck.unwrap_or_else(|| last.clone()),
        last,
        log,
        aborted: false,
        diagnostic: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_channel, mix, split_dataset, ChannelKind};
    use crate::vse::VseConfig;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.count = 12;
        cfg.data.height = 32;
        cfg.data.width = 32;
        cfg.model = VseConfig {
            levels: 2,
            latent_channels: 2,
            base_filters: 8,
            patch: 16,
            ..Default::default()
        };
        cfg.training.batch = 8;
        cfg.training.epochs = 2;
        cfg.training.patches_per_sample = 2;
        cfg
    }

    fn tiny_data(n: usize, h: usize, w: usize, seed: u64) -> DatasetSplit {
        let samples = (0..n)
            .map(|i| {
                let c1 =
                    generate_channel(ChannelKind::Dots, h, w, 0.05, seed + 2 * i as u64).unwrap();
                let c2 =
                    generate_channel(ChannelKind::Curves, h, w, 0.08, seed + 2 * i as u64 + 1)
                        .unwrap();
                SplitSample {
                    input: mix(&c1, &c2).unwrap(),
                    target1: c1.clone(),
                    target2: c2.clone(),
                    clean1: Some(c1),
                    clean2: Some(c2),
                }
            })
            .collect();
        split_dataset(samples, 5).unwrap()
    }

    #[test]
    fn one_epoch_produces_one_finite_log_row() {
        let mut cfg = tiny_config();
        cfg.training.epochs = 1;
        let data = tiny_data(12, 32, 32, 0);
        let out = train(&cfg, &data, None, None, None).unwrap();
        assert!(!out.aborted);
        assert_eq!(out.log.len(), 1);
        let r = &out.log[0];
        assert_eq!(r.epoch, 1);
        for v in [r.train_loss, r.val_loss, r.recon1, r.recon2, r.kl] {
            assert!(v.is_finite(), "non-finite log value {v}");
        }
        assert!(r.val_ri_psnr_ch1.is_finite() && r.val_ri_psnr_ch2.is_finite());
    }

    #[test]
    fn runs_are_bit_reproducible_and_seed_sensitive() {
        let cfg = tiny_config();
        let data = tiny_data(12, 32, 32, 0);
        let a = train(&cfg, &data, None, None, None).unwrap();
        let b = train(&cfg, &data, None, None, None).unwrap();
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.val_loss, y.val_loss);
        }
        let mut cfg2 = cfg.clone();
        cfg2.training.seed = 99;
        let c = train(&cfg2, &data, None, None, None).unwrap();
        assert_ne!(a.log[0].train_loss, c.log[0].train_loss);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut cfg = tiny_config();
        cfg.training.epochs = 3;
        let data = tiny_data(12, 32, 32, 3);
        let full = train(&cfg, &data, None, None, None).unwrap();

        let mut cfg_short = cfg.clone();
        cfg_short.training.epochs = 2;
        let part = train(&cfg_short, &data, None, None, None).unwrap();
        let resumed = train(&cfg, &data, None, None, Some(&part.last)).unwrap();
        assert_eq!(resumed.log.len(), 1, "one remaining epoch");
        let full_last = full.log.last().unwrap();
        let res_last = resumed.log.last().unwrap();
        assert_eq!(full_last.epoch, res_last.epoch);
        assert_eq!(full_last.train_loss, res_last.train_loss);
        assert_eq!(full_last.val_loss, res_last.val_loss);
    }

    #[test]
    fn validation_is_deterministic() {
        let cfg = tiny_config();
        let data = tiny_data(12, 32, 32, 1);
        let out = train(&cfg, &data, None, None, None).unwrap();
        let model = out.last.build_model(DType::F32, &Device::Cpu).unwrap();
        let norm = out.last.normalizer;
        let a = validate(&model, &data.val, &norm, None, None).unwrap();
        let b = validate(&model, &data.val, &norm, None, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_predictions_hit_the_psnr_cap() {
        // a "model" predicting the clean channels exactly is simulated by
        // feeding ri_psnr directly; here we check validate()'s plumbing by
        // training nothing and asserting psnrs are finite and ordered later
        // in the acceptance suite. The cap itself:
        let img = generate_channel(ChannelKind::Dots, 32, 32, 0.1, 0).unwrap();
        assert_eq!(ri_psnr(&img, &img).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn metrics_log_round_trips_as_csv() {
        let rows = vec![EpochRow {
            epoch: 1,
            train_loss: 1.5,
            val_loss: 2.5,
            recon1: -3.0,
            recon2: -4.0,
            kl: 0.25,
            val_ri_psnr_ch1: 21.0,
            val_ri_psnr_ch2: 22.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_metrics_log(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_loss,val_loss,recon1,recon2,kl,val_ri_psnr_ch1,val_ri_psnr_ch2"
        );
        assert_eq!(lines.next().unwrap(), "1,1.5,2.5,-3,-4,0.25,21,22");
    }
}
