//! Histogram-based noise model: a B x B table of P(noisy bin | clean bin)
//! over a shared intensity range, with Laplace smoothing. Continuous density
//! queries divide the bin probability by the bin width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VsplitError};

/// Laplace smoothing constant added to every cell before row normalization.
pub const SMOOTHING_EPS: f64 = 1e-10;
/// Density floor applied before `log`.
pub const DENSITY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramNoiseModel {
    pub bins: usize,
    pub range_min: f64,
    pub range_max: f64,
    /// `bins` rows (clean bin) x `bins` columns (noisy bin); each row sums to 1.
    pub table: Vec<Vec<f64>>,
}

impl HistogramNoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(VsplitError::Invalid("histogram: bins must be >= 1".into()));
        }
        if !(self.range_max > self.range_min) {
            return Err(VsplitError::Invalid(format!(
                "histogram: range [{}, {}] is empty",
                self.range_min, self.range_max
            )));
        }
        if self.table.len() != self.bins || self.table.iter().any(|r| r.len() != self.bins) {
            return Err(VsplitError::Invalid(format!(
                "histogram: table must be {0} x {0}",
                self.bins
            )));
        }
        for (i, row) in self.table.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(VsplitError::Invalid(format!(
                    "histogram: row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.range_max - self.range_min) / self.bins as f64
    }

    /// Bin index of a value; out-of-range values clamp to the edge bins.
    pub fn bin_of(&self, v: f64) -> usize {
        let b = ((v - self.range_min) / self.bin_width()).floor();
        (b.max(0.0) as usize).min(self.bins - 1)
    }

    /// Probability of the noisy bin given the clean bin.
    pub fn bin_prob(&self, noisy: f64, clean: f64) -> f64 {
        self.table[self.bin_of(clean)][self.bin_of(noisy)]
    }

    /// Log of the continuous density (bin probability / bin width), floored.
    pub fn log_density(&self, noisy: f64, clean: f64) -> f64 {
        (self.bin_prob(noisy, clean) / self.bin_width())
            .max(DENSITY_FLOOR)
            .ln()
    }

    /// Sample a noisy value: pick a noisy bin from the clean bin's row, then
    /// draw uniformly inside that bin.
    pub fn sample(&self, clean: f64, rng: &mut impl Rng) -> f64 {
        let row = &self.table[self.bin_of(clean)];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.bins - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        let w = self.bin_width();
        self.range_min + (pick as f64 + rng.gen::<f64>()) * w
    }
}

/// Fit a histogram noise model from (clean, noisy) image pairs. Both axes
/// share a single range covering clean and noisy observations.
pub fn fit_histogram(
    pairs: &[(crate::data::Image2D, crate::data::Image2D)],
    bins: usize,
) -> Result<HistogramNoiseModel> {
    if bins == 0 {
        return Err(VsplitError::Invalid("fit_histogram: bins must be >= 1".into()));
    }
    if pairs.is_empty() {
        return Err(VsplitError::Invalid("fit_histogram: no pairs given".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (clean, noisy) in pairs {
        if clean.height() != noisy.height() || clean.width() != noisy.width() {
            return Err(VsplitError::Invalid(
                "fit_histogram: clean/noisy shape mismatch".into(),
            ));
        }
        for &v in clean.pixels().iter().chain(noisy.pixels().iter()) {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    if !(hi > lo) {
        // constant data: widen so the shared value lands inside one bin
        lo -= 0.5;
        hi += 0.5;
    }
    let mut model = HistogramNoiseModel {
        bins,
        range_min: lo,
        range_max: hi,
        table: vec![vec![0.0; bins]; bins],
    };
    for (clean, noisy) in pairs {
        for (&c, &x) in clean.pixels().iter().zip(noisy.pixels().iter()) {
            let (i, j) = (model.bin_of(c as f64), model.bin_of(x as f64));
            model.table[i][j] += 1.0;
        }
    }
    for row in &mut model.table {
        let total: f64 = row.iter().sum::<f64>() + bins as f64 * SMOOTHING_EPS;
        for cell in row.iter_mut() {
            *cell = (*cell + SMOOTHING_EPS) / total;
        }
    }
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image2D;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn constant_identical_pair_concentrates_on_the_diagonal() {
        let img = Image2D::new(8, 8, vec![7.5; 64]).unwrap();
        let m = fit_histogram(&[(img.clone(), img)], 16).unwrap();
        // the single occupied clean row puts all mass in the matching noisy bin
        let b = m.bin_of(7.5);
        assert!((m.table[b][b] - 1.0).abs() < 1e-6);
        assert!(m.log_density(7.5, 7.5) > 0.0); // density 1/binwidth = 16 here
        // unoccupied rows are uniform
        let other = (b + 1) % 16;
        for j in 0..16 {
            assert!((m.table[other][j] - 1.0 / 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = rng_from(11);
        let clean: Vec<f32> = (0..4096).map(|_| rng.gen_range(0.0..100.0)).collect();
        let noisy: Vec<f32> = clean.iter().map(|&c| c + rng.gen_range(-5.0..5.0)).collect();
        let m = fit_histogram(
            &[(
                Image2D::new(64, 64, clean).unwrap(),
                Image2D::new(64, 64, noisy).unwrap(),
            )],
            32,
        )
        .unwrap();
        for row in &m.table {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_queries_clamp_to_edge_bins() {
        let m = HistogramNoiseModel {
            bins: 4,
            range_min: 0.0,
            range_max: 4.0,
            table: vec![vec![0.25; 4]; 4],
        };
        assert_eq!(m.bin_of(-3.0), 0);
        assert_eq!(m.bin_of(99.0), 3);
        assert_eq!(m.bin_of(3.9999), 3);
        assert_eq!(m.bin_of(4.0), 3); // top edge folds into the last bin
    }

    #[test]
    fn density_uses_bin_width() {
        let m = HistogramNoiseModel {
            bins: 2,
            range_min: 0.0,
            range_max: 10.0, // width 5
            table: vec![vec![0.8, 0.2], vec![0.1, 0.9]],
        };
        assert!((m.log_density(2.0, 2.0) - (0.8f64 / 5.0).ln()).abs() < 1e-12);
        assert!((m.log_density(7.0, 2.0) - (0.2f64 / 5.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn sampling_follows_the_row_distribution() {
        let m = HistogramNoiseModel {
            bins: 3,
            range_min: 0.0,
            range_max: 3.0,
            table: vec![
                vec![0.6, 0.3, 0.1],
                vec![0.2, 0.5, 0.3],
                vec![0.1, 0.1, 0.8],
            ],
        };
        let mut rng = rng_from(13);
        let n = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let x = m.sample(0.5, &mut rng); // clean bin 0
            counts[m.bin_of(x)] += 1;
        }
        for (j, &target) in [0.6, 0.3, 0.1].iter().enumerate() {
            let p = counts[j] as f64 / n as f64;
            let se = (target * (1.0 - target) / n as f64).sqrt();
            assert!(
                (p - target).abs() < 4.0 * se,
                "bin {j}: {p} vs {target} (se {se})"
            );
        }
    }

    #[test]
    fn gaussian_pairs_give_a_banded_table() {
        let mut rng = rng_from(17);
        let n = 160_000usize;
        let clean: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0f32..100.0)).collect();
        let normal = rand_distr::Normal::new(0.0f32, 3.0).unwrap();
        let noisy: Vec<f32> = clean
            .iter()
            .map(|&c| c + rand_distr::Distribution::sample(&normal, &mut rng))
            .collect();
        let m = fit_histogram(
            &[(
                Image2D::new(400, 400, clean).unwrap(),
                Image2D::new(400, 400, noisy).unwrap(),
            )],
            64,
        )
        .unwrap();
        // at mid-range, density near the clean value should be close to the
        // Gaussian density and much larger than far away
        let near = m.log_density(50.0, 50.0);
        let far = m.log_density(90.0, 50.0);
        let gauss = -0.5 * (2.0 * std::f64::consts::PI * 9.0).ln();
        assert!((near - gauss).abs() < 0.35, "near {near} vs gaussian {gauss}");
        assert!(far < near - 5.0);
    }
}
