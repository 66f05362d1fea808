//! Temporary tuning probe for the end-to-end splitting experiment.

use std::time::Instant;

use vsplit::cli::{inject_noise, split_ids_for, split_samples_by_ids, synthesize_samples};
use vsplit::data::{ChannelKind, Image2D};
use vsplit::expconfig::{
    DataConfig, EvaluationConfig, ExperimentConfig, NoiseConfig, Precision, TrainingConfig,
};
use vsplit::inference::{predict_tiled_full, PredictMode};
use vsplit::metrics::ri_psnr;
use vsplit::rng::derive_seed;
use vsplit::training::train;
use vsplit::vse::{KlMode, LikelihoodHead, VseConfig};

fn envf<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(40);
    let k: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let count: usize = envf("COUNT", 40);
    let pps: usize = envf("PPS", 1);
    let lr: f64 = envf("LR", 1e-3);
    let batch: usize = envf("BATCH", 16);
    let fb: f64 = envf("FB", 1.0);

    let data = DataConfig {
        kind1: ChannelKind::Dots,
        kind2: ChannelKind::Curves,
        count,
        height: 64,
        width: 64,
        density1: 0.04,
        density2: 0.08,
        peak: 1000.0,
        seed: 0,
        split_seed: 1,
    };
    let noise = NoiseConfig {
        gaussian_scale: 1.0,
        poisson_factor: 1000.0,
        seed: 2,
    };
    let t0 = Instant::now();
    let clean = synthesize_samples(&data).unwrap();
    let (noisy, _) = inject_noise(&clean, &noise).unwrap();
    let ids: Vec<String> = noisy.iter().map(|(id, _)| id.clone()).collect();
    let split_ids = split_ids_for(&ids, data.split_seed).unwrap();
    let split = split_samples_by_ids(noisy, &split_ids).unwrap();
    println!(
        "data: train {} val {} test {} ({:.1?})",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        t0.elapsed()
    );

    // baseline: x (affine-invariant, so x/2 equivalent)
    let mut base = [0.0f64; 2];
    for s in &split.test {
        base[0] += ri_psnr(&s.input, s.clean1.as_ref().unwrap()).unwrap();
        base[1] += ri_psnr(&s.input, s.clean2.as_ref().unwrap()).unwrap();
    }
    base[0] /= split.test.len() as f64;
    base[1] /= split.test.len() as f64;
    println!("baseline x/2: {:.2}/{:.2} dB", base[0], base[1]);

    for seed in 0..seeds {
        for mode in [KlMode::Denoisplit, KlMode::Musplit] {
            let cfg = ExperimentConfig {
                schema_version: 1,
                data: data.clone(),
                noise: noise.clone(),
                model: VseConfig {
                    levels: 3,
                    latent_channels: 4,
                    base_filters: 16,
                    patch: 64,
                    likelihood_head: LikelihoodHead::Gaussian,
                    kl_mode: mode,
                    kl_weight: 1.0,
                    free_bits: fb,
                },
                training: TrainingConfig {
                    lr,
                    batch,
                    epochs,
                    patience: epochs,
                    precision: Precision::Full,
                    determinism: true,
                    seed,
                    patches_per_sample: pps,
                },
                evaluation: EvaluationConfig {
                    k,
                    tile: 64,
                    pad: 0,
                    bins: 30,
                    seed: 3,
                },
            };
            let t1 = Instant::now();
            let outcome = train(&cfg, &split, None, None, None).unwrap();
            let ttrain = t1.elapsed();
            assert!(!outcome.aborted, "{:?}", outcome.diagnostic);
            // final-epoch val psnrs
            let lastlog = outcome.log.last().unwrap();
            let t2 = Instant::now();
            let dev = candle_core::Device::Cpu;
            let model = outcome
                .best
                .build_model(candle_core::DType::F32, &dev)
                .unwrap();
            let norm = outcome.best.normalizer.clone();
            let mut psnr = [0.0f64; 2];
            for (i, s) in split.test.iter().enumerate() {
                let (p1, p2, _) = predict_tiled_full(
                    &model,
                    &norm,
                    &s.input,
                    64,
                    0,
                    PredictMode::Mmse { k },
                    derive_seed(3, &[0x9ed, i as u64]),
                )
                .unwrap();
                psnr[0] += ri_psnr(&p1, s.clean1.as_ref().unwrap()).unwrap();
                psnr[1] += ri_psnr(&p2, s.clean2.as_ref().unwrap()).unwrap();
                let _ = &p1 as &Image2D;
            }
            psnr[0] /= split.test.len() as f64;
            psnr[1] /= split.test.len() as f64;
            println!(
                "seed {seed} {mode:?}: best-epoch {} val {:.2}/{:.2} | test mmse k={k} {:.2}/{:.2} dB | margins vs base {:+.2}/{:+.2} | train {:.1?} pred {:.1?}",
                outcome.best.epoch,
                lastlog.val_ri_psnr_ch1,
                lastlog.val_ri_psnr_ch2,
                psnr[0],
                psnr[1],
                psnr[0] - base[0],
                psnr[1] - base[1],
                ttrain,
                t2.elapsed()
            );
        }
    }
}
