//! Command-line surface: dataset synthesis, noise injection, noise-model
//! fitting, training, prediction, calibration, evaluation, and the
//! three-method comparison pipeline.
//!
//! Exit codes: 0 success, 2 configuration/usage errors, 3 runtime failures.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calibration::{
    calibration_curve, fit_scalar, write_curve_csv, BinStrategy, CalibrationState,
    CALIBRATION_SCHEMA_VERSION,
};
use crate::checkpoint::{file_sha256, Checkpoint};
use crate::data::{
    add_gaussian_noise, add_poisson_noise, generate_channel_with_peak, mix, read_dataset,
    read_predictions, reference_std, split_dataset, split_indices, write_dataset,
    write_predictions, ChannelKind, DatasetSplit, GeneratorInfo, Image2D, NoiseProvenance,
    Prediction, PredictionProvenance, SplitIds, SplitSample,
};
use crate::error::{Result, VsplitError};
use crate::expconfig::{DataConfig, ExperimentConfig, NoiseConfig, GAUSSIAN_SCALES, POISSON_FACTORS};
use crate::inference::{predict_tiled_full, PredictMode};
use crate::metrics::{ms_ssim, ri_psnr, PSNR_CAP_DB};
use crate::noisemodel::{fit_gmm, fit_histogram, GmmFitOptions, NoiseModel};
use crate::rng::derive_seed;
use crate::training::{train, write_metrics_log};
use crate::vse::{KlMode, LikelihoodHead};

#[derive(Parser)]
#[command(
    name = "vsplit",
    version,
    about = "Joint two-channel image decomposition and unsupervised denoising"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Synthesize a clean two-channel dataset (inputs are channel sums).
    GenData(GenDataArgs),
    /// Inject scaled-Poisson and additive Gaussian pixel noise.
    AddNoise(AddNoiseArgs),
    /// Fit a pixel noise model from a dataset's clean/noisy channel pairs.
    FitNm(FitNmArgs),
    /// Train a splitting model from an experiment config.
    Train(TrainArgs),
    /// Predict channel decompositions with a trained checkpoint.
    Predict(PredictArgs),
    /// Fit per-channel uncertainty calibration scalars from predictions.
    Calibrate(CalibrateArgs),
    /// Write an RMV-vs-RMSE calibration curve CSV.
    CalibCurve(CalibCurveArgs),
    /// Score predictions against ground truth (RI-PSNR, MS-SSIM).
    Eval(EvalArgs),
    /// Run the full three-method comparison pipeline end to end.
    Compare(CompareArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Channel structure pair as "kind1-kind2" (kinds: dots, curves, mesh).
    #[arg(long, default_value = "dots-curves")]
    pub kind: String,
    /// Number of full images to synthesize.
    #[arg(long, default_value_t = 40)]
    pub n: usize,
    /// Square image side; --height/--width override it.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Structure density of channel 1, in (0, 1].
    #[arg(long, default_value_t = 0.04)]
    pub density1: f64,
    /// Structure density of channel 2, in (0, 1].
    #[arg(long, default_value_t = 0.08)]
    pub density2: f64,
    /// Peak intensity of each clean channel.
    #[arg(long, default_value_t = 1000.0)]
    pub peak: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the stored 80/10/10 train/val/test split.
    #[arg(long, default_value_t = 1)]
    pub split_seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AddNoiseArgs {
    /// Input dataset directory (must carry clean channels).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Gaussian noise scale, one of the supported grid values.
    #[arg(long, default_value_t = 1.0)]
    pub gaussian_scale: f64,
    /// Scaled-Poisson factor, one of the supported grid values (0 = off).
    #[arg(long, default_value_t = 1000.0)]
    pub poisson_factor: f64,
    #[arg(long, default_value_t = 2)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NmKind {
    Gmm,
    Histogram,
}

#[derive(Args)]
pub struct FitNmArgs {
    /// Input dataset directory with clean channels and noisy targets.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Which channel's (clean, noisy) pairs to fit.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub channel: u8,
    /// Noise model family.
    #[arg(long, value_enum, default_value_t = NmKind::Gmm)]
    pub kind: NmKind,
    /// GMM mixture components.
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    /// GMM polynomial degree for signal-dependent parameters.
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    /// GMM fitting iterations.
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    /// GMM minibatch size in pixels.
    #[arg(long, default_value_t = 16384)]
    pub batch_pixels: usize,
    /// GMM fitting learning rate.
    #[arg(long, default_value_t = 0.03)]
    pub lr: f64,
    /// Histogram bins per axis.
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output noise-model JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (best.vspl, last.vspl, metrics.csv, config.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Channel 1 noise model (required for the noise_model likelihood head).
    #[arg(long)]
    pub nm1: Option<PathBuf>,
    /// Channel 2 noise model.
    #[arg(long)]
    pub nm2: Option<PathBuf>,
    /// Resume from a `last.vspl` checkpoint of an interrupted run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Average of k posterior samples, with pixel-wise std maps.
    Mmse,
    /// Deterministic posterior-mean decode.
    PosteriorMean,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitSel {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained checkpoint (.vspl).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input dataset directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output prediction directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Mmse)]
    pub mode: ModeArg,
    /// Posterior samples per input in mmse mode.
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    /// Tile side (0 = auto: largest grid-aligned side up to 128).
    #[arg(long, default_value_t = 0)]
    pub tile: usize,
    /// Tile overlap margin (omit for auto: ~tile/4, capped at 24).
    #[arg(long)]
    pub pad: Option<usize>,
    /// Restrict prediction to one stored split partition.
    #[arg(long, value_enum, default_value_t = SplitSel::All)]
    pub split: SplitSel,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Prediction directory (must carry std maps, i.e. mmse mode).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset directory (clean channels when available).
    #[arg(long)]
    pub gt: PathBuf,
    /// Calibration-curve bin count recorded with the scalars.
    #[arg(long, default_value_t = 30)]
    pub bins: usize,
    /// Output calibration JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CalibCurveArgs {
    /// Prediction directory (must carry std maps).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Calibration state JSON from `calibrate`.
    #[arg(long)]
    pub calib: PathBuf,
    /// Bin count (defaults to the one stored in the calibration state).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Bin by equal σ width instead of equal pixel count.
    #[arg(long)]
    pub equal_width: bool,
    /// Output curve CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Prediction directory.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Output per-sample metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Experiment config JSON driving the whole pipeline.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for all pipeline artifacts.
    #[arg(long)]
    pub out: PathBuf,
    /// GMM fitting iterations for the noise-model method.
    #[arg(long, default_value_t = 2000)]
    pub gmm_iterations: usize,
}

/// Entry point returning the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Dispatch one parsed subcommand.
pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::AddNoise(a) => cmd_add_noise(a),
        Cmd::FitNm(a) => cmd_fit_nm(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Calibrate(a) => cmd_calibrate(a),
        Cmd::CalibCurve(a) => cmd_calib_curve(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Compare(a) => cmd_compare(a),
    }
}

/// Record the resolved parameters of an invocation next to its outputs.
fn write_resolved(dir: &Path, command: &str, params: serde_json::Value) -> Result<()> {
    let doc = serde_json::json!({ "command": command, "params": params });
    fs::write(
        dir.join("resolved.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    Ok(())
}

/// Parse a "kind1-kind2" channel pair. The pseudo-kind "none" renders that
/// channel as all zeros, turning the splitting task into single-channel
/// denoising (x = the one noisy channel); at most one side may be "none".
fn parse_kind_pair(s: &str) -> Result<(Option<ChannelKind>, Option<ChannelKind>)> {
    let mut it = s.splitn(2, '-');
    let (Some(a), Some(b)) = (it.next(), it.next()) else {
        return Err(VsplitError::Config(format!(
            "--kind expects \"kind1-kind2\" (e.g. dots-curves), got {s:?}"
        )));
    };
    let parse = |t: &str| -> Result<Option<ChannelKind>> {
        if t == "none" {
            return Ok(None);
        }
        t.parse::<ChannelKind>()
            .map(Some)
            .map_err(|e| VsplitError::Config(format!("--kind: {e}")))
    };
    let (k1, k2) = (parse(a)?, parse(b)?);
    if k1.is_none() && k2.is_none() {
        return Err(VsplitError::Config(
            "--kind: at least one channel must have real structure".into(),
        ));
    }
    Ok((k1, k2))
}

fn kind_name(k: Option<ChannelKind>) -> String {
    k.map(|k| k.to_string()).unwrap_or_else(|| "none".into())
}

/// Synthesize `count` clean samples with explicit per-side kinds; a `None`
/// side is all zeros (denoise-mode building block).
pub fn synthesize_samples_with(
    kind1: Option<ChannelKind>,
    kind2: Option<ChannelKind>,
    cfg: &DataConfig,
) -> Result<Vec<(String, SplitSample)>> {
    let gen_side = |kind: Option<ChannelKind>, density: f64, i: usize, ch: u64| {
        match kind {
            Some(k) => generate_channel_with_peak(
                k,
                cfg.height,
                cfg.width,
                density,
                cfg.peak,
                derive_seed(cfg.seed, &[0xda7a, i as u64, ch]),
            ),
            None => Ok(Image2D::zeros(cfg.height, cfg.width)),
        }
    };
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let c1 = gen_side(kind1, cfg.density1, i, 1)?;
        let c2 = gen_side(kind2, cfg.density2, i, 2)?;
        let input = mix(&c1, &c2)?;
        let sample = SplitSample {
            input,
            target1: c1.clone(),
            target2: c2.clone(),
            clean1: Some(c1),
            clean2: Some(c2),
        };
        out.push((format!("s{i:04}"), sample));
    }
    Ok(out)
}

/// Synthesize `count` clean samples: two structure channels, their sum as the
/// input, and the channels themselves as (clean) targets.
pub fn synthesize_samples(cfg: &DataConfig) -> Result<Vec<(String, SplitSample)>> {
    synthesize_samples_with(Some(cfg.kind1), Some(cfg.kind2), cfg)
}

/// Deterministic 80/10/10 split of the given ids.
pub fn split_ids_for(ids: &[String], seed: u64) -> Result<SplitIds> {
    let (tr, va, te) = split_indices(ids.len(), seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    Ok(SplitIds {
        seed,
        train: pick(&tr),
        val: pick(&va),
        test: pick(&te),
    })
}

/// Partition samples according to a stored id split.
pub fn split_samples_by_ids(
    samples: Vec<(String, SplitSample)>,
    ids: &SplitIds,
) -> Result<DatasetSplit> {
    let mut map: HashMap<String, SplitSample> = samples.into_iter().collect();
    let mut take = |wanted: &[String]| -> Result<Vec<SplitSample>> {
        wanted
            .iter()
            .map(|id| {
                map.remove(id).ok_or_else(|| {
                    VsplitError::Config(format!("split references unknown sample id {id:?}"))
                })
            })
            .collect()
    };
    let train = take(&ids.train)?;
    let val = take(&ids.val)?;
    let test = take(&ids.test)?;
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed: ids.seed,
    })
}

fn require_grid(name: &str, value: f64, grid: &[f64]) -> Result<()> {
    if grid.contains(&value) {
        Ok(())
    } else {
        Err(VsplitError::Config(format!(
            "{name} must be one of {grid:?}, got {value}"
        )))
    }
}

/// Apply the two-stage noise protocol to clean samples: scaled Poisson on
/// each clean channel, then additive Gaussian whose std is `gaussian_scale`
/// times the std of the clean mixed inputs. Inputs become the noisy-channel
/// sums; clean channels are preserved for evaluation.
pub fn inject_noise(
    samples: &[(String, SplitSample)],
    noise: &NoiseConfig,
) -> Result<(Vec<(String, SplitSample)>, NoiseProvenance)> {
    require_grid("gaussian_scale", noise.gaussian_scale, &GAUSSIAN_SCALES)?;
    require_grid("poisson_factor", noise.poisson_factor, &POISSON_FACTORS)?;
    let mut clean_mixes = Vec::with_capacity(samples.len());
    for (id, s) in samples {
        let (Some(c1), Some(c2)) = (&s.clean1, &s.clean2) else {
            return Err(VsplitError::Config(format!(
                "sample {id:?} carries no clean channels; noise injection needs a clean dataset"
            )));
        };
        clean_mixes.push(mix(c1, c2)?);
    }
    let refs: Vec<&Image2D> = clean_mixes.iter().collect();
    let ref_std = reference_std(&refs)?;
    let mut out = Vec::with_capacity(samples.len());
    for (i, (id, s)) in samples.iter().enumerate() {
        let noisy_channel = |clean: &Image2D, ch: u64| -> Result<Image2D> {
            let shot = if noise.poisson_factor > 0.0 {
                add_poisson_noise(
                    clean,
                    noise.poisson_factor,
                    derive_seed(noise.seed, &[0x9015, i as u64, ch, 0]),
                )?
            } else {
                clean.clone()
            };
            add_gaussian_noise(
                &shot,
                noise.gaussian_scale,
                ref_std,
                derive_seed(noise.seed, &[0x9015, i as u64, ch, 1]),
            )
        };
        let n1 = noisy_channel(s.clean1.as_ref().unwrap(), 1)?;
        let n2 = noisy_channel(s.clean2.as_ref().unwrap(), 2)?;
        let input = mix(&n1, &n2)?;
        out.push((
            id.clone(),
            SplitSample {
                input,
                target1: n1,
                target2: n2,
                clean1: s.clean1.clone(),
                clean2: s.clean2.clone(),
            },
        ));
    }
    let provenance = NoiseProvenance {
        poisson_factor: noise.poisson_factor,
        gaussian_scale: noise.gaussian_scale,
        reference_std: ref_std,
        seed: noise.seed,
    };
    Ok((out, provenance))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let (kind1, kind2) = parse_kind_pair(&a.kind)?;
    // Stand-in kinds for the numeric checks; the real (possibly "none") pair
    // is recorded in the generator provenance below.
    let cfg = DataConfig {
        kind1: kind1.unwrap_or(ChannelKind::Dots),
        kind2: kind2.unwrap_or(ChannelKind::Dots),
        count: a.n,
        height: a.height.unwrap_or(a.size),
        width: a.width.unwrap_or(a.size),
        density1: a.density1,
        density2: a.density2,
        peak: a.peak,
        seed: a.seed,
        split_seed: a.split_seed,
    };
    cfg.validate()?;
    let samples = synthesize_samples_with(kind1, kind2, &cfg)?;
    let ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
    let split = split_ids_for(&ids, cfg.split_seed)?;
    let generator = GeneratorInfo {
        kind1: kind_name(kind1),
        kind2: kind_name(kind2),
        density1: cfg.density1,
        density2: cfg.density2,
        peak: cfg.peak,
        seed: cfg.seed,
    };
    write_dataset(&a.out, &samples, Some(generator.clone()), None, Some(split))?;
    write_resolved(
        &a.out,
        "gen-data",
        serde_json::json!({
            "kind1": generator.kind1,
            "kind2": generator.kind2,
            "count": cfg.count,
            "height": cfg.height,
            "width": cfg.width,
            "density1": cfg.density1,
            "density2": cfg.density2,
            "peak": cfg.peak,
            "seed": cfg.seed,
            "split_seed": cfg.split_seed,
        }),
    )?;
    println!(
        "wrote {} clean {}x{} samples to {}",
        samples.len(),
        cfg.height,
        cfg.width,
        a.out.display()
    );
    Ok(())
}

fn cmd_add_noise(a: AddNoiseArgs) -> Result<()> {
    let noise = NoiseConfig {
        gaussian_scale: a.gaussian_scale,
        poisson_factor: a.poisson_factor,
        seed: a.seed,
    };
    let (samples, manifest) = read_dataset(&a.input)?;
    let (noisy, provenance) = inject_noise(&samples, &noise)?;
    write_dataset(
        &a.out,
        &noisy,
        manifest.generator.clone(),
        Some(provenance.clone()),
        manifest.split.clone(),
    )?;
    write_resolved(&a.out, "add-noise", serde_json::to_value(&provenance)?)?;
    println!(
        "wrote {} noisy samples to {} (reference std {:.4})",
        noisy.len(),
        a.out.display(),
        provenance.reference_std
    );
    Ok(())
}

/// Gather per-channel (clean, noisy-target) image pairs for noise-model fits.
fn channel_pairs(
    samples: &[(String, SplitSample)],
    channel: u8,
) -> Result<Vec<(Image2D, Image2D)>> {
    let mut pairs = Vec::with_capacity(samples.len());
    for (id, s) in samples {
        let (clean, noisy) = match channel {
            1 => (&s.clean1, &s.target1),
            2 => (&s.clean2, &s.target2),
            _ => {
                return Err(VsplitError::Config(format!(
                    "channel must be 1 or 2, got {channel}"
                )))
            }
        };
        let Some(clean) = clean else {
            return Err(VsplitError::Config(format!(
                "sample {id:?} carries no clean channel {channel}; noise-model fitting \
                 needs clean references"
            )));
        };
        pairs.push((clean.clone(), noisy.clone()));
    }
    Ok(pairs)
}

fn cmd_fit_nm(a: FitNmArgs) -> Result<()> {
    let (samples, _) = read_dataset(&a.input)?;
    let pairs = channel_pairs(&samples, a.channel)?;
    let model = match a.kind {
        NmKind::Gmm => {
            let opts = GmmFitOptions {
                components: a.components,
                degree: a.degree,
                iterations: a.iterations,
                batch_pixels: a.batch_pixels,
                lr: a.lr,
                seed: a.seed,
            };
            NoiseModel::Gmm(fit_gmm(&pairs, &opts)?)
        }
        NmKind::Histogram => NoiseModel::Histogram(fit_histogram(&pairs, a.bins)?),
    };
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    model.save(&a.out)?;
    println!("wrote noise model to {}", a.out.display());
    Ok(())
}

/// Build the train/val/test partition for a dataset, preferring its stored
/// id split and falling back to a fresh seeded split.
pub fn dataset_split(
    samples: Vec<(String, SplitSample)>,
    stored: Option<&SplitIds>,
    fallback_seed: u64,
) -> Result<DatasetSplit> {
    match stored {
        Some(ids) => split_samples_by_ids(samples, ids),
        None => split_dataset(samples.into_iter().map(|(_, s)| s).collect(), fallback_seed),
    }
}

fn load_nm(path: Option<&PathBuf>) -> Result<Option<NoiseModel>> {
    path.map(|p| NoiseModel::load(p)).transpose()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = ExperimentConfig::load(&a.config)?;
    let (samples, manifest) = read_dataset(&a.data)?;
    let split = dataset_split(samples, manifest.split.as_ref(), config.data.split_seed)?;
    let nm1 = load_nm(a.nm1.as_ref())?;
    let nm2 = load_nm(a.nm2.as_ref())?;
    if config.model.likelihood_head == LikelihoodHead::NoiseModel
        && (nm1.is_none() || nm2.is_none())
    {
        return Err(VsplitError::Config(
            "the noise_model likelihood head needs --nm1 and --nm2".into(),
        ));
    }
    let resume = a.resume.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    fs::create_dir_all(&a.out)?;
    let outcome = train(&config, &split, nm1.as_ref(), nm2.as_ref(), resume.as_ref())?;
    outcome.best.save(&a.out.join("best.vspl"))?;
    outcome.last.save(&a.out.join("last.vspl"))?;
    write_metrics_log(&a.out.join("metrics.csv"), &outcome.log)?;
    config.save(&a.out.join("config.json"))?;
    write_resolved(&a.out, "train", serde_json::to_value(&config)?)?;
    for r in &outcome.log {
        println!(
            "epoch {:>4}  train {:.6}  val {:.6}  val RI-PSNR {:.2}/{:.2} dB",
            r.epoch, r.train_loss, r.val_loss, r.val_ri_psnr_ch1, r.val_ri_psnr_ch2
        );
    }
    if outcome.aborted {
        return Err(VsplitError::Runtime(format!(
            "training aborted on a non-finite loss; last good state saved to {}: {}",
            a.out.display(),
            outcome.diagnostic.unwrap_or_default()
        )));
    }
    println!(
        "done: best val loss {} at epoch {} ({})",
        outcome
            .best
            .best_val_loss
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "n/a".into()),
        outcome.best.epoch,
        a.out.join("best.vspl").display()
    );
    Ok(())
}

/// Largest tile side that keeps the downsampling grid aligned, up to 128.
pub fn auto_tile(height: usize, width: usize, levels: usize) -> Result<usize> {
    let unit = 1usize << levels;
    let tile = (height.min(width).min(128) / unit) * unit;
    if tile == 0 {
        return Err(VsplitError::Invalid(format!(
            "image {height}x{width} smaller than the {unit}-pixel downsampling grid"
        )));
    }
    Ok(tile)
}

/// Default grid-aligned overlap margin: about a quarter tile, at most 24.
pub fn auto_pad(tile: usize, levels: usize) -> usize {
    let unit = 1usize << levels;
    ((tile / 4).min(24) / unit) * unit
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let sha = file_sha256(&a.checkpoint)?;
    let dev = Device::Cpu;
    let model = ckpt.build_model(DType::F32, &dev)?;
    let norm = ckpt.normalizer.clone();
    let (samples, manifest) = read_dataset(&a.input)?;
    let selected: Vec<(String, SplitSample)> = match a.split {
        SplitSel::All => samples,
        sel => {
            let ids = manifest.split.as_ref().ok_or_else(|| {
                VsplitError::Config(
                    "dataset carries no stored split; use --split all".into(),
                )
            })?;
            let want: &[String] = match sel {
                SplitSel::Train => &ids.train,
                SplitSel::Val => &ids.val,
                SplitSel::Test => &ids.test,
                SplitSel::All => unreachable!(),
            };
            let set: HashSet<&str> = want.iter().map(|s| s.as_str()).collect();
            samples
                .into_iter()
                .filter(|(id, _)| set.contains(id.as_str()))
                .collect()
        }
    };
    if selected.is_empty() {
        return Err(VsplitError::Invalid("no samples selected".into()));
    }
    let levels = ckpt.config.levels;
    let first = &selected[0].1.input;
    let tile = if a.tile == 0 {
        auto_tile(first.height(), first.width(), levels)?
    } else {
        a.tile
    };
    let pad = a.pad.unwrap_or_else(|| auto_pad(tile, levels));
    let mode = match a.mode {
        ModeArg::Mmse => {
            if a.k < 1 {
                return Err(VsplitError::Config("--k must be >= 1".into()));
            }
            PredictMode::Mmse { k: a.k }
        }
        ModeArg::PosteriorMean => PredictMode::PosteriorMean,
    };
    let mut preds = Vec::with_capacity(selected.len());
    for (i, (id, s)) in selected.iter().enumerate() {
        let seed_i = derive_seed(a.seed, &[0x9ed, i as u64]);
        let (p1, p2, stds) = predict_tiled_full(&model, &norm, &s.input, tile, pad, mode, seed_i)?;
        let (std1, std2) = match stds {
            Some((s1, s2)) => (Some(s1), Some(s2)),
            None => (None, None),
        };
        preds.push(Prediction {
            id: id.clone(),
            pred1: p1,
            pred2: p2,
            std1,
            std2,
        });
    }
    let provenance = PredictionProvenance {
        checkpoint_sha256: sha,
        mode: match a.mode {
            ModeArg::Mmse => "mmse".into(),
            ModeArg::PosteriorMean => "posterior_mean".into(),
        },
        k: match a.mode {
            ModeArg::Mmse => a.k,
            ModeArg::PosteriorMean => 0,
        },
        seed: a.seed,
        tile,
        pad,
    };
    write_predictions(&a.out, &preds, provenance)?;
    println!(
        "wrote {} predictions to {} (tile {tile}, pad {pad})",
        preds.len(),
        a.out.display()
    );
    Ok(())
}

/// Look up the ground-truth image for one channel: clean when available,
/// otherwise the (noisy) target.
fn gt_channel(s: &SplitSample, channel: u8) -> &Image2D {
    match channel {
        1 => s.clean1.as_ref().unwrap_or(&s.target1),
        _ => s.clean2.as_ref().unwrap_or(&s.target2),
    }
}

/// Pair predictions with their ground-truth samples by id.
fn match_gt<'a>(
    preds: &'a [Prediction],
    gts: &'a [(String, SplitSample)],
) -> Result<Vec<(&'a Prediction, &'a SplitSample)>> {
    let map: HashMap<&str, &SplitSample> = gts.iter().map(|(id, s)| (id.as_str(), s)).collect();
    preds
        .iter()
        .map(|p| {
            map.get(p.id.as_str())
                .map(|s| (p, *s))
                .ok_or_else(|| {
                    VsplitError::Config(format!(
                        "prediction {:?} has no matching ground-truth sample",
                        p.id
                    ))
                })
        })
        .collect()
}

/// Per-channel σ-map/prediction/target triples gathered for calibration.
struct CalibInputs<'a> {
    sigmas: [Vec<&'a Image2D>; 2],
    preds: [Vec<&'a Image2D>; 2],
    targets: [Vec<&'a Image2D>; 2],
}

fn gather_calib_inputs<'a>(
    matched: &[(&'a Prediction, &'a SplitSample)],
) -> Result<CalibInputs<'a>> {
    let mut out = CalibInputs {
        sigmas: [Vec::new(), Vec::new()],
        preds: [Vec::new(), Vec::new()],
        targets: [Vec::new(), Vec::new()],
    };
    for (p, s) in matched {
        let (Some(s1), Some(s2)) = (&p.std1, &p.std2) else {
            return Err(VsplitError::Config(format!(
                "prediction {:?} carries no σ maps; run predict in mmse mode",
                p.id
            )));
        };
        out.sigmas[0].push(s1);
        out.sigmas[1].push(s2);
        out.preds[0].push(&p.pred1);
        out.preds[1].push(&p.pred2);
        out.targets[0].push(gt_channel(s, 1));
        out.targets[1].push(gt_channel(s, 2));
    }
    Ok(out)
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let (preds, _) = read_predictions(&a.pred)?;
    let (gts, _) = read_dataset(&a.gt)?;
    let matched = match_gt(&preds, &gts)?;
    let inputs = gather_calib_inputs(&matched)?;
    let f1 = fit_scalar(&inputs.sigmas[0], &inputs.preds[0], &inputs.targets[0])?;
    let f2 = fit_scalar(&inputs.sigmas[1], &inputs.preds[1], &inputs.targets[1])?;
    let state = CalibrationState {
        schema_version: CALIBRATION_SCHEMA_VERSION,
        calib_scalar1: f1.scalar,
        calib_scalar2: f2.scalar,
        bins: a.bins,
        excluded_zero_sigma1: f1.excluded_zero_sigma,
        excluded_zero_sigma2: f2.excluded_zero_sigma,
        pixels_used1: f1.pixels_used,
        pixels_used2: f2.pixels_used,
    };
    state.validate()?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    state.save(&a.out)?;
    println!(
        "calib_scalar1 {:.6} ({} px), calib_scalar2 {:.6} ({} px)",
        f1.scalar, f1.pixels_used, f2.scalar, f2.pixels_used
    );
    Ok(())
}

fn cmd_calib_curve(a: CalibCurveArgs) -> Result<()> {
    let state = CalibrationState::load(&a.calib)?;
    let bins = a.bins.unwrap_or(state.bins);
    let strategy = if a.equal_width {
        BinStrategy::EqualWidth
    } else {
        BinStrategy::EqualCount
    };
    let (preds, _) = read_predictions(&a.pred)?;
    let (gts, _) = read_dataset(&a.gt)?;
    let matched = match_gt(&preds, &gts)?;
    let inputs = gather_calib_inputs(&matched)?;
    let c1 = calibration_curve(
        &inputs.sigmas[0],
        &inputs.preds[0],
        &inputs.targets[0],
        state.calib_scalar1,
        bins,
        strategy,
    )?;
    let c2 = calibration_curve(
        &inputs.sigmas[1],
        &inputs.preds[1],
        &inputs.targets[1],
        state.calib_scalar2,
        bins,
        strategy,
    )?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_curve_csv(&a.out, &c1, &c2)?;
    println!(
        "wrote {} + {} curve bins to {}",
        c1.len(),
        c2.len(),
        a.out.display()
    );
    Ok(())
}

/// Mean per-channel scores of a prediction set: (RI-PSNR dB, MS-SSIM).
pub struct EvalSummary {
    pub psnr: [f64; 2],
    pub ms_ssim: [f64; 2],
    pub count: usize,
}

/// Score predictions against ground truth and write one CSV row per
/// (sample, channel).
pub fn evaluate_predictions(
    matched: &[(&Prediction, &SplitSample)],
    csv_out: Option<&Path>,
) -> Result<EvalSummary> {
    if matched.is_empty() {
        return Err(VsplitError::Invalid("no predictions to evaluate".into()));
    }
    let mut csv = String::from("sample_id,channel,ri_psnr,ms_ssim\n");
    let mut psnr_sum = [0.0f64; 2];
    let mut ssim_sum = [0.0f64; 2];
    for (p, s) in matched {
        for (ch, pred) in [(1u8, &p.pred1), (2u8, &p.pred2)] {
            let gt = gt_channel(s, ch);
            let psnr = ri_psnr(pred, gt)?.min(PSNR_CAP_DB);
            let ssim = ms_ssim(pred, gt)?;
            csv.push_str(&format!("{},{ch},{psnr},{ssim}\n", p.id));
            psnr_sum[ch as usize - 1] += psnr;
            ssim_sum[ch as usize - 1] += ssim;
        }
    }
    if let Some(path) = csv_out {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, csv)?;
    }
    let n = matched.len() as f64;
    Ok(EvalSummary {
        psnr: [psnr_sum[0] / n, psnr_sum[1] / n],
        ms_ssim: [ssim_sum[0] / n, ssim_sum[1] / n],
        count: matched.len(),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (preds, _) = read_predictions(&a.pred)?;
    let (gts, _) = read_dataset(&a.gt)?;
    let matched = match_gt(&preds, &gts)?;
    let summary = evaluate_predictions(&matched, Some(&a.out))?;
    println!(
        "channel 1: mean RI-PSNR {:.3} dB, mean MS-SSIM {:.4}",
        summary.psnr[0], summary.ms_ssim[0]
    );
    println!(
        "channel 2: mean RI-PSNR {:.3} dB, mean MS-SSIM {:.4}",
        summary.psnr[1], summary.ms_ssim[1]
    );
    Ok(())
}

/// One row of the comparison: a method's mean per-channel scores.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: String,
    pub kl_mode: String,
    pub likelihood: String,
    pub psnr: [f64; 2],
    pub ms_ssim: [f64; 2],
}

/// Predict the test partition with tiled MMSE sampling and score it.
pub fn predict_and_eval_test(
    ckpt: &Checkpoint,
    test_ids: &[String],
    test: &[SplitSample],
    config: &ExperimentConfig,
    pred_dir: Option<&Path>,
    checkpoint_sha256: String,
) -> Result<EvalSummary> {
    let dev = Device::Cpu;
    let model = ckpt.build_model(DType::F32, &dev)?;
    let norm = ckpt.normalizer.clone();
    let k = config.evaluation.k;
    let levels = ckpt.config.levels;
    let first = &test[0].input;
    let tile = config
        .evaluation
        .tile
        .min(auto_tile(first.height(), first.width(), levels)?);
    let pad = auto_pad(tile, levels).min(config.evaluation.pad);
    let mut preds = Vec::with_capacity(test.len());
    for (i, (id, s)) in test_ids.iter().zip(test).enumerate() {
        let seed_i = derive_seed(config.evaluation.seed, &[0x9ed, i as u64]);
        let (p1, p2, stds) = predict_tiled_full(
            &model,
            &norm,
            &s.input,
            tile,
            pad,
            PredictMode::Mmse { k },
            seed_i,
        )?;
        let (std1, std2) = match stds {
            Some((s1, s2)) => (Some(s1), Some(s2)),
            None => (None, None),
        };
        preds.push(Prediction {
            id: id.clone(),
            pred1: p1,
            pred2: p2,
            std1,
            std2,
        });
    }
    if let Some(dir) = pred_dir {
        let provenance = PredictionProvenance {
            checkpoint_sha256,
            mode: "mmse".into(),
            k,
            seed: config.evaluation.seed,
            tile,
            pad,
        };
        write_predictions(dir, &preds, provenance)?;
    }
    let gts: Vec<(String, SplitSample)> = test_ids
        .iter()
        .cloned()
        .zip(test.iter().cloned())
        .collect();
    let matched = match_gt(&preds, &gts)?;
    evaluate_predictions(&matched, pred_dir.map(|d| d.join("eval.csv")).as_deref())
}

/// Score the trivial x/2 baseline (each channel predicted as half the input).
pub fn baseline_half_summary(test: &[SplitSample]) -> Result<EvalSummary> {
    if test.is_empty() {
        return Err(VsplitError::Invalid("no test samples".into()));
    }
    let mut psnr_sum = [0.0f64; 2];
    let mut ssim_sum = [0.0f64; 2];
    for s in test {
        let half = Image2D::new(
            s.input.height(),
            s.input.width(),
            s.input.pixels().iter().map(|&v| v * 0.5).collect(),
        )?;
        for ch in [1u8, 2u8] {
            let gt = gt_channel(s, ch);
            psnr_sum[ch as usize - 1] += ri_psnr(&half, gt)?.min(PSNR_CAP_DB);
            ssim_sum[ch as usize - 1] += ms_ssim(&half, gt)?;
        }
    }
    let n = test.len() as f64;
    Ok(EvalSummary {
        psnr: [psnr_sum[0] / n, psnr_sum[1] / n],
        ms_ssim: [ssim_sum[0] / n, ssim_sum[1] / n],
        count: test.len(),
    })
}

/// The three compared method variants.
pub fn method_specs() -> [(&'static str, KlMode, LikelihoodHead); 3] {
    [
        ("musplit", KlMode::Musplit, LikelihoodHead::Gaussian),
        ("denoisplit", KlMode::Denoisplit, LikelihoodHead::Gaussian),
        (
            "denoisplit-nm",
            KlMode::Denoisplit,
            LikelihoodHead::NoiseModel,
        ),
    ]
}

fn kl_mode_name(m: KlMode) -> &'static str {
    match m {
        KlMode::Musplit => "musplit",
        KlMode::Denoisplit => "denoisplit",
    }
}

fn likelihood_name(l: LikelihoodHead) -> &'static str {
    match l {
        LikelihoodHead::Gaussian => "gaussian",
        LikelihoodHead::NoiseModel => "noise_model",
    }
}

/// Run the full comparison pipeline: synthesize, corrupt, fit noise models,
/// train the three method variants, predict the test split, and score
/// everything against the clean channels (plus the x/2 baseline).
pub fn run_compare(
    config: &ExperimentConfig,
    out: &Path,
    gmm_iterations: usize,
) -> Result<Vec<MethodResult>> {
    config.validate()?;
    fs::create_dir_all(out)?;

    let clean = synthesize_samples(&config.data)?;
    let ids: Vec<String> = clean.iter().map(|(id, _)| id.clone()).collect();
    let split_ids = split_ids_for(&ids, config.data.split_seed)?;
    let generator = GeneratorInfo {
        kind1: config.data.kind1.to_string(),
        kind2: config.data.kind2.to_string(),
        density1: config.data.density1,
        density2: config.data.density2,
        peak: config.data.peak,
        seed: config.data.seed,
    };
    write_dataset(
        &out.join("data"),
        &clean,
        Some(generator.clone()),
        None,
        Some(split_ids.clone()),
    )?;

    let (noisy, provenance) = inject_noise(&clean, &config.noise)?;
    write_dataset(
        &out.join("noisy"),
        &noisy,
        Some(generator),
        Some(provenance),
        Some(split_ids.clone()),
    )?;
    let split = split_samples_by_ids(noisy, &split_ids)?;

    // Noise models are fit on the training partition only.
    let train_pairs = |ch: u8| -> Result<Vec<(Image2D, Image2D)>> {
        Ok(split
            .train
            .iter()
            .map(|s| {
                let clean = match ch {
                    1 => s.clean1.as_ref().unwrap(),
                    _ => s.clean2.as_ref().unwrap(),
                };
                let noisy = match ch {
                    1 => &s.target1,
                    _ => &s.target2,
                };
                (clean.clone(), noisy.clone())
            })
            .collect())
    };
    let gmm_opts = GmmFitOptions {
        iterations: gmm_iterations,
        seed: derive_seed(config.noise.seed, &[0x93b3]),
        ..GmmFitOptions::default()
    };
    println!("fitting channel noise models ({gmm_iterations} iterations each)...");
    let nm1 = NoiseModel::Gmm(fit_gmm(&train_pairs(1)?, &gmm_opts)?);
    let nm2 = NoiseModel::Gmm(fit_gmm(&train_pairs(2)?, &gmm_opts)?);
    nm1.save(&out.join("nm1.json"))?;
    nm2.save(&out.join("nm2.json"))?;

    let mut results = Vec::new();
    for (name, kl_mode, likelihood) in method_specs() {
        let mut cfg = config.clone();
        cfg.model.kl_mode = kl_mode;
        cfg.model.likelihood_head = likelihood;
        let mdir = out.join(name);
        fs::create_dir_all(&mdir)?;
        let uses_nm = likelihood == LikelihoodHead::NoiseModel;
        println!("training {name}...");
        let outcome = train(
            &cfg,
            &split,
            uses_nm.then_some(&nm1),
            uses_nm.then_some(&nm2),
            None,
        )?;
        outcome.best.save(&mdir.join("best.vspl"))?;
        outcome.last.save(&mdir.join("last.vspl"))?;
        write_metrics_log(&mdir.join("metrics.csv"), &outcome.log)?;
        cfg.save(&mdir.join("config.json"))?;
        if outcome.aborted {
            return Err(VsplitError::Runtime(format!(
                "{name} training aborted on a non-finite loss: {}",
                outcome.diagnostic.unwrap_or_default()
            )));
        }
        let sha = file_sha256(&mdir.join("best.vspl"))?;
        let summary = predict_and_eval_test(
            &outcome.best,
            &split_ids.test,
            &split.test,
            &cfg,
            Some(&mdir.join("pred")),
            sha,
        )?;
        println!(
            "{name}: RI-PSNR {:.2}/{:.2} dB, MS-SSIM {:.4}/{:.4}",
            summary.psnr[0], summary.psnr[1], summary.ms_ssim[0], summary.ms_ssim[1]
        );
        results.push(MethodResult {
            method: name.into(),
            kl_mode: kl_mode_name(kl_mode).into(),
            likelihood: likelihood_name(likelihood).into(),
            psnr: summary.psnr,
            ms_ssim: summary.ms_ssim,
        });
    }

    let base = baseline_half_summary(&split.test)?;
    println!(
        "baseline-half: RI-PSNR {:.2}/{:.2} dB, MS-SSIM {:.4}/{:.4}",
        base.psnr[0], base.psnr[1], base.ms_ssim[0], base.ms_ssim[1]
    );
    results.push(MethodResult {
        method: "baseline-half".into(),
        kl_mode: "-".into(),
        likelihood: "-".into(),
        psnr: base.psnr,
        ms_ssim: base.ms_ssim,
    });

    let mut csv =
        String::from("method,kl_mode,likelihood,gaussian_scale,poisson_factor,channel,ri_psnr,ms_ssim\n");
    for r in &results {
        for ch in 0..2usize {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method,
                r.kl_mode,
                r.likelihood,
                config.noise.gaussian_scale,
                config.noise.poisson_factor,
                ch + 1,
                r.psnr[ch],
                r.ms_ssim[ch]
            ));
        }
    }
    fs::write(out.join("results.csv"), csv)?;
    Ok(results)
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let config = ExperimentConfig::load(&a.config)?;
    fs::create_dir_all(&a.out)?;
    write_resolved(&a.out, "compare", serde_json::to_value(&config)?)?;
    let results = run_compare(&config, &a.out, a.gmm_iterations)?;
    println!(
        "wrote {} result rows to {}",
        results.len() * 2,
        a.out.join("results.csv").display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_pair_parses_and_rejects() {
        let (a, b) = parse_kind_pair("dots-curves").unwrap();
        assert_eq!(a, Some(ChannelKind::Dots));
        assert_eq!(b, Some(ChannelKind::Curves));
        let (a, b) = parse_kind_pair("mesh-mesh").unwrap();
        assert_eq!(a, Some(ChannelKind::Mesh));
        assert_eq!(b, Some(ChannelKind::Mesh));
        assert_eq!(parse_kind_pair("curves-none").unwrap().1, None);
        assert!(parse_kind_pair("dots").is_err());
        assert!(parse_kind_pair("dots-blobs").is_err());
        assert!(parse_kind_pair("none-none").is_err());
    }

    #[test]
    fn none_side_renders_zeros_for_denoise_mode() {
        let cfg = DataConfig {
            count: 10,
            height: 32,
            width: 32,
            ..DataConfig::default()
        };
        let samples =
            synthesize_samples_with(Some(ChannelKind::Dots), None, &cfg).unwrap();
        for (_, s) in &samples {
            assert!(s.target2.pixels().iter().all(|&v| v == 0.0));
            assert_eq!(s.input, s.target1, "input reduces to the real channel");
            assert!(s.target1.pixels().iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn auto_tiling_respects_grid_and_caps() {
        assert_eq!(auto_tile(128, 128, 3).unwrap(), 128);
        assert_eq!(auto_tile(200, 300, 3).unwrap(), 128);
        assert_eq!(auto_tile(100, 100, 3).unwrap(), 96);
        assert_eq!(auto_tile(33, 47, 2).unwrap(), 32);
        assert!(auto_tile(7, 7, 3).is_err());
        assert_eq!(auto_pad(128, 3), 24);
        assert_eq!(auto_pad(32, 3), 8);
        assert_eq!(auto_pad(16, 3), 0);
        for (tile, levels) in [(128usize, 3usize), (96, 3), (32, 2), (16, 1)] {
            let pad = auto_pad(tile, levels);
            let unit = 1 << levels;
            assert_eq!(pad % unit, 0);
            assert!(2 * pad < tile);
        }
    }

    #[test]
    fn synthesized_samples_are_clean_mixtures_with_split() {
        let cfg = DataConfig {
            count: 12,
            height: 32,
            width: 32,
            ..DataConfig::default()
        };
        let samples = synthesize_samples(&cfg).unwrap();
        assert_eq!(samples.len(), 12);
        for (id, s) in &samples {
            assert!(id.starts_with('s'));
            let m = mix(s.clean1.as_ref().unwrap(), s.clean2.as_ref().unwrap()).unwrap();
            assert_eq!(s.input, m);
            assert_eq!(&s.target1, s.clean1.as_ref().unwrap());
        }
        let ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
        let split = split_ids_for(&ids, 1).unwrap();
        assert_eq!(split.train.len(), 10);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.test.len(), 1);
        let all: HashSet<_> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .collect();
        assert_eq!(all.len(), 12);
    }

    #[test]
    fn noise_injection_validates_grid_and_preserves_clean() {
        let cfg = DataConfig {
            count: 10,
            height: 32,
            width: 32,
            ..DataConfig::default()
        };
        let samples = synthesize_samples(&cfg).unwrap();
        let bad = NoiseConfig {
            gaussian_scale: 0.7,
            ..NoiseConfig::default()
        };
        let err = inject_noise(&samples, &bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let noise = NoiseConfig {
            gaussian_scale: 1.0,
            poisson_factor: 1000.0,
            seed: 7,
        };
        let (noisy, prov) = inject_noise(&samples, &noise).unwrap();
        assert_eq!(noisy.len(), samples.len());
        assert!(prov.reference_std > 0.0);
        for ((_, n), (_, c)) in noisy.iter().zip(&samples) {
            assert_eq!(n.clean1, c.clean1);
            assert_ne!(n.target1, c.target1, "targets should be corrupted");
            let m = mix(&n.target1, &n.target2).unwrap();
            assert_eq!(n.input, m);
        }
        // identity case: both knobs off reproduces the clean data bit-exactly
        let off = NoiseConfig {
            gaussian_scale: 0.0,
            poisson_factor: 0.0,
            seed: 7,
        };
        let (same, _) = inject_noise(&samples, &off).unwrap();
        for ((_, n), (_, c)) in same.iter().zip(&samples) {
            assert_eq!(n.target1, c.target1);
            assert_eq!(n.input, c.input);
        }
    }

    #[test]
    fn split_by_ids_partitions_exactly_and_rejects_unknown() {
        let cfg = DataConfig {
            count: 10,
            height: 32,
            width: 32,
            ..DataConfig::default()
        };
        let samples = synthesize_samples(&cfg).unwrap();
        let ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
        let split_ids = split_ids_for(&ids, 3).unwrap();
        let split = split_samples_by_ids(samples.clone(), &split_ids).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.test.len(), 1);
        // order matches the id lists
        let by_id: HashMap<&str, &SplitSample> =
            samples.iter().map(|(id, s)| (id.as_str(), s)).collect();
        for (id, s) in split_ids.train.iter().zip(&split.train) {
            assert_eq!(s.input, by_id[id.as_str()].input);
        }
        let mut bad = split_ids.clone();
        bad.test.push("missing".into());
        assert_eq!(
            split_samples_by_ids(samples, &bad).unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn baseline_half_is_psnr_capped_on_a_perfect_setup() {
        // if the clean channels are identical, input/2 is exactly right
        let cfg = DataConfig {
            count: 10,
            height: 32,
            width: 32,
            ..DataConfig::default()
        };
        let samples = synthesize_samples(&cfg).unwrap();
        let test: Vec<SplitSample> = samples
            .iter()
            .map(|(_, s)| {
                let c = s.clean1.clone().unwrap();
                SplitSample {
                    input: mix(&c, &c).unwrap(),
                    target1: c.clone(),
                    target2: c.clone(),
                    clean1: Some(c.clone()),
                    clean2: Some(c),
                }
            })
            .collect();
        let summary = baseline_half_summary(&test).unwrap();
        assert_eq!(summary.psnr[0], PSNR_CAP_DB);
        assert_eq!(summary.psnr[1], PSNR_CAP_DB);
    }

    #[test]
    fn cli_parses_all_subcommands() {
        let cases: &[&[&str]] = &[
            &["vsplit", "gen-data", "--out", "d"],
            &[
                "vsplit",
                "add-noise",
                "--in",
                "a",
                "--gaussian-scale",
                "2",
                "--out",
                "b",
            ],
            &[
                "vsplit", "fit-nm", "--in", "a", "--channel", "1", "--out", "m.json",
            ],
            &[
                "vsplit", "train", "--config", "c.json", "--data", "d", "--out", "o",
            ],
            &[
                "vsplit",
                "predict",
                "--checkpoint",
                "b.vspl",
                "--in",
                "d",
                "--out",
                "p",
                "--mode",
                "posterior-mean",
                "--split",
                "test",
            ],
            &[
                "vsplit",
                "calibrate",
                "--pred",
                "p",
                "--gt",
                "d",
                "--out",
                "c.json",
            ],
            &[
                "vsplit",
                "calib-curve",
                "--pred",
                "p",
                "--gt",
                "d",
                "--calib",
                "c.json",
                "--equal-width",
                "--out",
                "curve.csv",
            ],
            &["vsplit", "eval", "--pred", "p", "--gt", "d", "--out", "e.csv"],
            &[
                "vsplit",
                "compare",
                "--config",
                "c.json",
                "--out",
                "o",
                "--gmm-iterations",
                "50",
            ],
        ];
        for argv in cases {
            Cli::try_parse_from(argv.iter()).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
        assert!(Cli::try_parse_from(["vsplit", "fit-nm", "--in", "a", "--channel", "3"]).is_err());
        assert!(Cli::try_parse_from(["vsplit", "nonsense"]).is_err());
    }
}
