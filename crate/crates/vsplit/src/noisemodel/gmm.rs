//! Signal-conditioned Gaussian-mixture noise model.
//!
//! For a clean signal s (normalized to s~ inside [signal_min, signal_max])
//! each of K components gets polynomial functions of s~ for its weight logit,
//! mean offset and pre-softplus std:
//!
//! * weights  = softmax_k(poly_wk(s~))
//! * mean_k   = s + poly_bk(s~)
//! * std_k    = softplus(poly_ck(s~)) + std_floor
//!
//! The density of a noisy observation x given s is sum_k w_k N(x; mean_k,
//! std_k^2), floored at 1e-10 before taking logs.

use candle_core::{Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VsplitError};
use crate::nn::{floor_at, grad_clamp, softplus, Adam, AdamParams};
use crate::rng::{derive_seed, rng_from};

/// Density floor applied before `log`.
pub const DENSITY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmNoiseModel {
    /// Number of mixture components K.
    pub components: usize,
    /// Polynomial degree D of the signal-dependent parameters.
    pub degree: usize,
    /// K x (D+1) weight-logit polynomial coefficients (low degree first).
    pub weight_coeffs: Vec<Vec<f64>>,
    /// K x (D+1) mean-offset polynomial coefficients.
    pub mean_offset_coeffs: Vec<Vec<f64>>,
    /// K x (D+1) pre-softplus std polynomial coefficients.
    pub std_coeffs: Vec<Vec<f64>>,
    pub signal_min: f64,
    pub signal_max: f64,
    /// Lower bound added to every component std.
    pub std_floor: f64,
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus for y > 0.
fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).max(1e-300).ln()
    }
}

impl GmmNoiseModel {
    /// Validate structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(VsplitError::Invalid("gmm: components must be >= 1".into()));
        }
        if !(self.signal_max > self.signal_min) {
            return Err(VsplitError::Invalid(format!(
                "gmm: signal range [{}, {}] is empty",
                self.signal_min, self.signal_max
            )));
        }
        if !(self.std_floor > 0.0) {
            return Err(VsplitError::Invalid("gmm: std_floor must be > 0".into()));
        }
        for (name, c) in [
            ("weight_coeffs", &self.weight_coeffs),
            ("mean_offset_coeffs", &self.mean_offset_coeffs),
            ("std_coeffs", &self.std_coeffs),
        ] {
            if c.len() != self.components || c.iter().any(|row| row.len() != self.degree + 1) {
                return Err(VsplitError::Invalid(format!(
                    "gmm: {name} must be {} x {}",
                    self.components,
                    self.degree + 1
                )));
            }
        }
        Ok(())
    }

    /// Clean signal normalized into [0, 1] over the model's range.
    fn normalized(&self, s: f64) -> f64 {
        ((s - self.signal_min) / (self.signal_max - self.signal_min)).clamp(0.0, 1.0)
    }

    /// Mixture parameters (weight, mean, std) at a clean signal level.
    pub fn params_at(&self, clean: f64) -> Vec<(f64, f64, f64)> {
        let st = self.normalized(clean);
        let logits: Vec<f64> = self.weight_coeffs.iter().map(|c| poly(c, st)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        (0..self.components)
            .map(|k| {
                let w = exps[k] / z;
                let mu = clean + poly(&self.mean_offset_coeffs[k], st);
                let sd = softplus_scalar(poly(&self.std_coeffs[k], st)) + self.std_floor;
                (w, mu, sd)
            })
            .collect()
    }

    /// Density of a noisy observation given the clean signal (not floored).
    pub fn density(&self, noisy: f64, clean: f64) -> f64 {
        self.params_at(clean)
            .iter()
            .map(|&(w, mu, sd)| {
                let z = (noisy - mu) / sd;
                w * (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    }

    /// Log density with the 1e-10 floor.
    pub fn log_density(&self, noisy: f64, clean: f64) -> f64 {
        self.density(noisy, clean).max(DENSITY_FLOOR).ln()
    }

    /// Ancestral sample: pick a component by weight, then draw its Gaussian.
    pub fn sample(&self, clean: f64, rng: &mut impl Rng) -> f64 {
        let params = self.params_at(clean);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = params.len() - 1;
        for (k, &(w, _, _)) in params.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        let (_, mu, sd) = params[pick];
        Normal::new(mu, sd).expect("std > 0").sample(rng)
    }

    /// Differentiable log density for batched tensors (any shared shape).
    /// The gradient flows through `clean` (the network's signal estimate);
    /// `noisy` is treated as data.
    pub fn log_density_tensor(&self, noisy: &Tensor, clean: &Tensor) -> Result<Tensor> {
        let range = self.signal_max - self.signal_min;
        let st = grad_clamp(&((clean - self.signal_min)? / range)?, 0.0, 1.0)?;
        // s~ powers 0..=D
        let mut pows: Vec<Tensor> = vec![st.ones_like()?];
        for d in 1..=self.degree {
            pows.push((&pows[d - 1] * &st)?);
        }
        let eval_poly = |coeffs: &[f64]| -> Result<Tensor> {
            let mut acc = (&pows[0] * coeffs[0])?;
            for (d, &c) in coeffs.iter().enumerate().skip(1) {
                acc = (acc + (&pows[d] * c)?)?;
            }
            Ok(acc)
        };
        let logits: Vec<Tensor> = self
            .weight_coeffs
            .iter()
            .map(|c| eval_poly(c))
            .collect::<Result<_>>()?;
        // stable softmax with a detached max (exact: softmax is shift-invariant)
        let mut m = logits[0].clone();
        for l in &logits[1..] {
            m = (&m + (l - &m)?.relu()?)?;
        }
        let m = m.detach();
        let exps: Vec<Tensor> = logits
            .iter()
            .map(|l| Ok((l - &m)?.exp()?))
            .collect::<Result<_>>()?;
        let mut z = exps[0].clone();
        for e in &exps[1..] {
            z = (&z + e)?;
        }
        let inv_sqrt_tau = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let mut density: Option<Tensor> = None;
        for k in 0..self.components {
            let w = (&exps[k] / &z)?;
            let mu = (clean + eval_poly(&self.mean_offset_coeffs[k])?)?;
            let sd = (softplus(&eval_poly(&self.std_coeffs[k])?)? + self.std_floor)?;
            let zscore = ((noisy - mu)? / &sd)?;
            let comp = ((zscore.sqr()? * -0.5)?.exp()? / &sd)?;
            let term = ((w * comp)? * inv_sqrt_tau)?;
            density = Some(match density {
                None => term,
                Some(d) => (d + term)?,
            });
        }
        floor_at(&density.expect("components >= 1"), DENSITY_FLOOR)?
            .log()
            .map_err(Into::into)
    }
}

/// Options for [`fit_gmm`].
#[derive(Debug, Clone)]
pub struct GmmFitOptions {
    pub components: usize,
    pub degree: usize,
    pub iterations: usize,
    pub batch_pixels: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GmmFitOptions {
    fn default() -> Self {
        Self {
            components: 3,
            degree: 2,
            iterations: 2000,
            batch_pixels: 16384,
            lr: 0.03,
            seed: 0,
        }
    }
}

/// Fit a GMM noise model on (clean, noisy) pixel pairs by minimizing the
/// average negative log density with Adam (in f64).
pub fn fit_gmm(pairs: &[(crate::data::Image2D, crate::data::Image2D)], opts: &GmmFitOptions) -> Result<GmmNoiseModel> {
    let mut clean_vals = Vec::new();
    let mut noisy_vals = Vec::new();
    for (clean, noisy) in pairs {
        if clean.height() != noisy.height() || clean.width() != noisy.width() {
            return Err(VsplitError::Invalid(
                "fit_gmm: clean/noisy shape mismatch".into(),
            ));
        }
        clean_vals.extend(clean.pixels().iter().map(|&v| v as f64));
        noisy_vals.extend(noisy.pixels().iter().map(|&v| v as f64));
    }
    let n = clean_vals.len();
    if n < 100_000 {
        return Err(VsplitError::Invalid(format!(
            "fit_gmm requires at least 1e5 pixel pairs, got {n}"
        )));
    }
    if opts.components == 0 || opts.iterations == 0 || opts.batch_pixels == 0 {
        return Err(VsplitError::Invalid(
            "fit_gmm: components, iterations and batch_pixels must be positive".into(),
        ));
    }

    // signal range from the observed clean range, expanded by 5%
    let cmin = clean_vals.iter().copied().fold(f64::INFINITY, f64::min);
    let cmax = clean_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = (cmax - cmin).max(1e-6);
    let signal_min = cmin - 0.05 * spread;
    let signal_max = cmax + 0.05 * spread;
    let std_floor = 1e-3 * (signal_max - signal_min);

    // residual std estimate for initialization
    let mean_res = clean_vals
        .iter()
        .zip(&noisy_vals)
        .map(|(c, x)| x - c)
        .sum::<f64>()
        / n as f64;
    let var_res = clean_vals
        .iter()
        .zip(&noisy_vals)
        .map(|(c, x)| {
            let d = x - c - mean_res;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let sd0 = var_res.sqrt().max(std_floor * 2.0);

    let dev = Device::Cpu;
    let (kk, dd) = (opts.components, opts.degree + 1);
    let mut rng = rng_from(derive_seed(opts.seed, &[0xf17]));
    let jitter = |rng: &mut rand_chacha::ChaCha12Rng, scale: f64| -> Vec<f64> {
        (0..kk * dd).map(|_| (rng.gen::<f64>() - 0.5) * scale).collect()
    };
    let wc = Var::from_tensor(&Tensor::from_vec(jitter(&mut rng, 1e-3), (kk, dd), &dev)?)?;
    let oc = Var::from_tensor(&Tensor::from_vec(jitter(&mut rng, 1e-3), (kk, dd), &dev)?)?;
    // constant-term init spreads component stds around the residual estimate
    let mut sc0 = jitter(&mut rng, 1e-3);
    for k in 0..kk {
        let spread_k = if kk == 1 {
            1.0
        } else {
            0.5 + k as f64 / (kk - 1) as f64
        };
        sc0[k * dd] = inv_softplus((sd0 * spread_k - std_floor).max(std_floor));
    }
    let sc = Var::from_tensor(&Tensor::from_vec(sc0, (kk, dd), &dev)?)?;

    let vars = vec![
        ("weight".to_string(), wc.clone()),
        ("offset".to_string(), oc.clone()),
        ("std".to_string(), sc.clone()),
    ];
    let mut opt = Adam::new(AdamParams {
        lr: opts.lr,
        ..Default::default()
    });

    let coeffs_of = |v: &Var| -> Result<Vec<Vec<f64>>> { Ok(v.as_tensor().to_vec2::<f64>()?) };
    let mut model = GmmNoiseModel {
        components: kk,
        degree: opts.degree,
        weight_coeffs: coeffs_of(&wc)?,
        mean_offset_coeffs: coeffs_of(&oc)?,
        std_coeffs: coeffs_of(&sc)?,
        signal_min,
        signal_max,
        std_floor,
    };

    for it in 0..opts.iterations {
        let mut brng = rng_from(derive_seed(opts.seed, &[1, it as u64]));
        let (mut cb, mut xb) = (
            Vec::with_capacity(opts.batch_pixels),
            Vec::with_capacity(opts.batch_pixels),
        );
        for _ in 0..opts.batch_pixels {
            let i = brng.gen_range(0..n);
            cb.push(clean_vals[i]);
            xb.push(noisy_vals[i]);
        }
        let ct = Tensor::from_vec(cb, (opts.batch_pixels,), &dev)?;
        let xt = Tensor::from_vec(xb, (opts.batch_pixels,), &dev)?;
        // refresh the model's coefficient views for this iteration
        model.weight_coeffs = coeffs_of(&wc)?;
        model.mean_offset_coeffs = coeffs_of(&oc)?;
        model.std_coeffs = coeffs_of(&sc)?;
        let nll = model.log_density_tensor(&xt, &ct)?.mean_all()?.neg()?;
        let val = nll.to_scalar::<f64>()?;
        if !val.is_finite() {
            return Err(VsplitError::Runtime(format!(
                "fit_gmm: non-finite loss {val} at iteration {it}"
            )));
        }
        let grads = nll.backward()?;
        opt.step(&vars, &grads)?;
    }

    model.weight_coeffs = coeffs_of(&wc)?;
    model.mean_offset_coeffs = coeffs_of(&oc)?;
    model.std_coeffs = coeffs_of(&sc)?;
    model.validate()?;
    Ok(model)
}
