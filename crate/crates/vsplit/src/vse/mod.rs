//! The Variational Splitting Encoder-Decoder: a hierarchical VAE whose
//! decoder emits two channel images instead of reconstructing its input.
//!
//! Layout convention: batched images are channels-last tensors of shape
//! `(B, h*w, channels)`. Latent level 0 is the highest-resolution level
//! (patch/2), level i sits at patch/2^(i+1).

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VsplitError};
use crate::nn::{grad_clamp, randn_tensor, upsample2x_cl, ConvLayer};
use crate::rng::derive_seed;

/// Log-std clamp bounds for posterior and prior heads (keeps σ in a sane
/// range and every KL term finite).
pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    Musplit,
    Denoisplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodHead {
    Gaussian,
    NoiseModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VseConfig {
    /// Number of hierarchy levels n.
    pub levels: usize,
    /// Latent channels c at every level.
    pub latent_channels: usize,
    /// Convolutional feature width of the backbone.
    pub base_filters: usize,
    /// Training patch side; must be divisible by 2^levels.
    pub patch: usize,
    pub likelihood_head: LikelihoodHead,
    pub kl_mode: KlMode,
    /// KL weight α.
    pub kl_weight: f64,
    /// Free-bits floor λ (nats per latent channel).
    pub free_bits: f64,
}

impl Default for VseConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            latent_channels: 8,
            base_filters: 32,
            patch: 64,
            likelihood_head: LikelihoodHead::Gaussian,
            kl_mode: KlMode::Denoisplit,
            kl_weight: 1.0,
            free_bits: 1.0,
        }
    }
}

impl VseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(VsplitError::Config("model.levels must be >= 1".into()));
        }
        if self.levels > 16 {
            return Err(VsplitError::Config("model.levels must be <= 16".into()));
        }
        if self.latent_channels < 1 {
            return Err(VsplitError::Config(
                "model.latent_channels must be >= 1".into(),
            ));
        }
        if self.base_filters < 2 || self.base_filters % 2 != 0 {
            return Err(VsplitError::Config(
                "model.base_filters must be an even number >= 2".into(),
            ));
        }
        let div = 1usize << self.levels;
        if self.patch == 0 || self.patch % div != 0 {
            return Err(VsplitError::Config(format!(
                "model.patch {} must be divisible by 2^levels = {div}",
                self.patch
            )));
        }
        if !(self.kl_weight > 0.0) || !self.kl_weight.is_finite() {
            return Err(VsplitError::Config("model.kl_weight must be > 0".into()));
        }
        if self.free_bits < 0.0 || !self.free_bits.is_finite() {
            return Err(VsplitError::Config("model.free_bits must be >= 0".into()));
        }
        Ok(())
    }

    /// Latent shapes (c, h_i, w_i) for the configured patch size.
    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.levels)
            .map(|i| {
                let s = self.patch >> (i + 1);
                (self.latent_channels, s, s)
            })
            .collect()
    }
}

/// One hierarchy level: Gaussian posterior, top-down conditional prior (once
/// decoded) and the drawn latent. Tensors are `(B, h*w, c)`.
#[derive(Debug, Clone)]
pub struct LatentLevel {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub post_mu: Tensor,
    pub post_logs: Tensor,
    pub prior_mu: Option<Tensor>,
    pub prior_logs: Option<Tensor>,
    pub z: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LatentHierarchy {
    pub batch: usize,
    pub levels: Vec<LatentLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    PosteriorMean,
}

/// Fill `z` at every level: reparameterized draw (stochastic) or the
/// posterior mean. Per-level noise seeds derive from `seed`, so any call is
/// reproducible.
pub fn sample_latents(hier: &mut LatentHierarchy, mode: SampleMode, seed: u64) -> Result<()> {
    for (i, level) in hier.levels.iter_mut().enumerate() {
        let z = match mode {
            SampleMode::PosteriorMean => level.post_mu.clone(),
            SampleMode::Stochastic => {
                let eps = randn_tensor(
                    level.post_mu.dims(),
                    level.post_mu.dtype(),
                    level.post_mu.device(),
                    derive_seed(seed, &[0x5a, i as u64]),
                )?;
                (&level.post_mu + (level.post_logs.exp()? * eps)?)?
            }
        };
        level.z = Some(z);
    }
    Ok(())
}

/// Per-element closed-form Gaussian KL maps, one `(B, h_i*w_i, c)` tensor per
/// level: ½(log σp²/σq² + (σq² + (μq−μp)²)/σp² − 1). Requires priors, i.e.
/// `decode` must already have run on this hierarchy.
pub fn kl_tensors(hier: &LatentHierarchy) -> Result<Vec<Tensor>> {
    let mut maps = Vec::with_capacity(hier.levels.len());
    for (i, level) in hier.levels.iter().enumerate() {
        let (pm, pl) = match (&level.prior_mu, &level.prior_logs) {
            (Some(m), Some(l)) => (m, l),
            _ => {
                return Err(VsplitError::Invalid(format!(
                    "kl_tensors: level {i} has no prior; decode the hierarchy first"
                )))
            }
        };
        let d_logs = (pl - &level.post_logs)?;
        let var_q = (&level.post_logs * 2.0)?.exp()?;
        let inv_var_p = (pl * -2.0)?.exp()?;
        let dmu = (&level.post_mu - pm)?;
        let kl = (d_logs + (((var_q + dmu.sqr()?)? * inv_var_p)? * 0.5)?)?;
        maps.push((kl - 0.5)?);
    }
    Ok(maps)
}

/// Aggregate per-level KL maps into the scalar KL loss term.
///
/// Per level: per-channel mean a_j over batch and space, free-bits clamp
/// a'_j = max(a_j, λ), then α·Σ_j a'_j (musplit) or α·h_i·w_i·Σ_j a'_j
/// (denoisplit); levels are summed.
pub fn kl_loss(maps: &[Tensor], mode: KlMode, alpha: f64, lambda: f64) -> Result<Tensor> {
    if alpha < 0.0 || lambda < 0.0 {
        return Err(VsplitError::Invalid(
            "kl_loss: alpha and lambda must be nonnegative".into(),
        ));
    }
    if maps.is_empty() {
        return Err(VsplitError::Invalid("kl_loss: no KL maps".into()));
    }
    let mut total: Option<Tensor> = None;
    for map in maps {
        let (_b, hw, _c) = map.dims3()?;
        // per-channel mean over space then batch
        let a = map.mean(1)?.mean(0)?;
        let clamped = crate::nn::floor_at(&a, lambda)?;
        let mut term = (clamped.sum_all()? * alpha)?;
        if mode == KlMode::Denoisplit {
            term = (term * hw as f64)?;
        }
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// The full model: encoder (bottom-up) and decoder (top-down) parameters.
#[derive(Debug)]
pub struct VseModel {
    pub config: VseConfig,
    device: Device,
    compute_dtype: DType,
    stem: ConvLayer,
    enc_down: Vec<ConvLayer>,
    enc_res: Vec<ConvLayer>,
    q_head: Vec<ConvLayer>,
    prior_head: Vec<ConvLayer>,
    merge: Vec<ConvLayer>,
    td_up: Vec<ConvLayer>,
    dec_narrow: ConvLayer,
    out_head: ConvLayer,
    h_init: Var,
}

impl VseModel {
    pub fn new(config: &VseConfig, dtype: DType, dev: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.levels;
        let f = config.base_filters;
        let c = config.latent_channels;
        let layer = |name: String, cin, cout, k, pad, stride, tag: u64, idx: u64| {
            ConvLayer::new(
                &name,
                cin,
                cout,
                k,
                pad,
                stride,
                dtype,
                dev,
                derive_seed(seed, &[tag, idx]),
            )
        };
        let stem = layer("stem.w".into(), 1, f, 3, 1, 1, 1, 0)?;
        let mut enc_down = Vec::new();
        let mut enc_res = Vec::new();
        let mut q_head = Vec::new();
        let mut prior_head = Vec::new();
        let mut merge = Vec::new();
        let mut td_up = Vec::new();
        for i in 0..n {
            enc_down.push(layer(format!("enc_down.{i}.w"), f, f, 3, 1, 2, 2, i as u64)?);
            enc_res.push(layer(format!("enc_res.{i}.w"), f, f, 3, 1, 1, 3, i as u64)?);
            q_head.push(layer(format!("q_head.{i}.w"), f, 2 * c, 1, 0, 1, 4, i as u64)?);
            prior_head.push(layer(format!("prior_head.{i}.w"), f, 2 * c, 1, 0, 1, 5, i as u64)?);
            // near-zero heads: a fresh model starts from ~N(0,1) posteriors
            // and priors, keeping the initial KL small and training stable
            q_head[i].scale_weights(0.01)?;
            prior_head[i].scale_weights(0.01)?;
            merge.push(layer(format!("merge.{i}.w"), f + c, f, 1, 0, 1, 6, i as u64)?);
            if i + 1 < n {
                td_up.push(layer(format!("td_up.{i}.w"), f, f, 3, 1, 1, 7, i as u64)?);
            }
        }
        let dec_narrow = layer("dec_narrow.w".into(), f, f / 2, 1, 0, 1, 8, 0)?;
        let out_head = layer("out_head.w".into(), f / 2, 2, 3, 1, 1, 9, 0)?;
        let h_init = Var::from_tensor(
            &(randn_tensor(&[f], dtype, dev, derive_seed(seed, &[10, 0]))? * 0.01)?,
        )?;
        Ok(Self {
            config: config.clone(),
            device: dev.clone(),
            compute_dtype: dtype,
            stem,
            enc_down,
            enc_res,
            q_head,
            prior_head,
            merge,
            td_up,
            dec_narrow,
            out_head,
            h_init,
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param_dtype(&self) -> DType {
        self.h_init.dtype()
    }

    pub fn compute_dtype(&self) -> DType {
        self.compute_dtype
    }

    /// Switch the forward-pass dtype (parameters stay in their own dtype and
    /// are cast inside the graph — mixed precision).
    pub fn set_compute_dtype(&mut self, dtype: DType) {
        self.compute_dtype = dtype;
    }

    /// All trainable parameters in a fixed, documented order.
    pub fn params(&self) -> Vec<(String, Var)> {
        let mut out = vec![self.stem.param()];
        for l in &self.enc_down {
            out.push(l.param());
        }
        for l in &self.enc_res {
            out.push(l.param());
        }
        for l in &self.q_head {
            out.push(l.param());
        }
        for l in &self.prior_head {
            out.push(l.param());
        }
        for l in &self.merge {
            out.push(l.param());
        }
        for l in &self.td_up {
            out.push(l.param());
        }
        out.push(self.dec_narrow.param());
        out.push(self.out_head.param());
        out.push(("h_init".to_string(), self.h_init.clone()));
        out
    }

    /// Radius (in input pixels) of the receptive field of one output pixel:
    /// a symmetric bound covering both sides and all downsampling-grid
    /// phases.
    pub fn receptive_field_radius(&self) -> usize {
        let n = self.config.levels as u32;
        let mut r = 1usize; // stem
        for i in 0..n {
            r += 1 << i; // enc_down at input jump 2^i
            r += 1 << (i + 1); // enc_res at jump 2^(i+1)
        }
        for i in 0..n.saturating_sub(1) {
            r += 1 << (i + 1); // td_up into level i
        }
        r += 1; // out_head at full resolution
        // nearest-neighbor upsampling rounds coarse positions down, skewing
        // the field by up to one coarse pixel per level on one side
        r + ((1 << n) - 1)
    }

    fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.config.levels;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(VsplitError::Invalid(format!(
                "input {h}x{w} must have both sides divisible by 2^levels = {div}"
            )));
        }
        Ok(())
    }

    /// Bottom-up pass: per-level Gaussian posterior parameters from the
    /// encoder features. Deterministic given parameters and input.
    pub fn encode(&self, x: &Tensor, (h, w): (usize, usize)) -> Result<LatentHierarchy> {
        self.check_input_dims(h, w)?;
        let (b, hw, cin) = x.dims3()?;
        if hw != h * w || cin != 1 {
            return Err(VsplitError::Invalid(format!(
                "encode: expected (B, {}, 1) input, got (B, {hw}, {cin})",
                h * w
            )));
        }
        let ct = self.compute_dtype;
        let x = if x.dtype() == ct { x.clone() } else { x.to_dtype(ct)? };
        let mut feat = self.stem.forward(&x, (h, w), ct)?.relu()?;
        let mut dims = (h, w);
        let c = self.config.latent_channels;
        let mut levels = Vec::with_capacity(self.config.levels);
        for i in 0..self.config.levels {
            feat = self.enc_down[i].forward(&feat, dims, ct)?.relu()?;
            dims = (dims.0 / 2, dims.1 / 2);
            feat = self.enc_res[i].forward(&feat, dims, ct)?.relu()?;
            let q = self.q_head[i].forward(&feat, dims, ct)?;
            let mu = q.narrow(2, 0, c)?;
            let logs = grad_clamp(&q.narrow(2, c, c)?, LOG_STD_MIN, LOG_STD_MAX)?;
            levels.push(LatentLevel {
                h: dims.0,
                w: dims.1,
                c,
                post_mu: mu,
                post_logs: logs,
                prior_mu: None,
                prior_logs: None,
                z: None,
            });
        }
        Ok(LatentHierarchy { batch: b, levels })
    }

    /// Top-down pass: computes the conditional prior at every level (stored
    /// into the hierarchy) and returns the two channel predictions, each
    /// `(B, h*w, 1)` at the input resolution.
    pub fn decode(&self, hier: &mut LatentHierarchy) -> Result<(Tensor, Tensor)> {
        let n = self.config.levels;
        if hier.levels.len() != n {
            return Err(VsplitError::Invalid(format!(
                "decode: hierarchy has {} levels, model expects {n}",
                hier.levels.len()
            )));
        }
        for (i, level) in hier.levels.iter().enumerate() {
            if level.z.is_none() {
                return Err(VsplitError::Invalid(format!(
                    "decode: level {i} has no sampled latent"
                )));
            }
            if level.c != self.config.latent_channels {
                return Err(VsplitError::Invalid(format!(
                    "decode: level {i} has {} channels, model expects {}",
                    level.c, self.config.latent_channels
                )));
            }
            if i > 0
                && (hier.levels[i - 1].h != 2 * level.h || hier.levels[i - 1].w != 2 * level.w)
            {
                return Err(VsplitError::Invalid(
                    "decode: hierarchy level shapes must halve per level".into(),
                ));
            }
        }
        let ct = self.compute_dtype;
        let f = self.config.base_filters;
        let b = hier.batch;
        let c = self.config.latent_channels;
        let deep = &hier.levels[n - 1];
        let mut dims = (deep.h, deep.w);
        let h0 = self.h_init.as_tensor().to_dtype(ct)?.reshape((1, 1, f))?;
        let mut td = Tensor::zeros((b, dims.0 * dims.1, f), ct, &self.device)?
            .broadcast_add(&h0)?;
        for i in (0..n).rev() {
            if i < n - 1 {
                td = upsample2x_cl(&td, dims)?;
                dims = (dims.0 * 2, dims.1 * 2);
                td = self.td_up[i].forward(&td, dims, ct)?.relu()?;
            }
            let p = self.prior_head[i].forward(&td, dims, ct)?;
            let level = &mut hier.levels[i];
            level.prior_mu = Some(p.narrow(2, 0, c)?);
            level.prior_logs = Some(grad_clamp(&p.narrow(2, c, c)?, LOG_STD_MIN, LOG_STD_MAX)?);
            let z = level.z.as_ref().expect("checked above");
            let z = if z.dtype() == ct { z.clone() } else { z.to_dtype(ct)? };
            let merged = Tensor::cat(&[&td, &z], 2)?;
            td = self.merge[i].forward(&merged, dims, ct)?.relu()?;
        }
        let y = self.dec_narrow.forward(&td, dims, ct)?.relu()?;
        let y = upsample2x_cl(&y, dims)?;
        dims = (dims.0 * 2, dims.1 * 2);
        let y = self.out_head.forward(&y, dims, ct)?;
        Ok((y.narrow(2, 0, 1)?, y.narrow(2, 1, 1)?))
    }

    /// Convenience pipeline: encode, sample, decode. Returns predictions and
    /// the hierarchy (with priors filled, ready for `kl_tensors`).
    pub fn forward(
        &self,
        x: &Tensor,
        dims: (usize, usize),
        mode: SampleMode,
        seed: u64,
    ) -> Result<(Tensor, Tensor, LatentHierarchy)> {
        let mut hier = self.encode(x, dims)?;
        sample_latents(&mut hier, mode, seed)?;
        let (c1, c2) = self.decode(&mut hier)?;
        Ok((c1, c2, hier))
    }
}
