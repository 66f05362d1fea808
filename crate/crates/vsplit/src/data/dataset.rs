//! Dataset partitioning and patch extraction.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Image2D, SplitSample};
use crate::error::{Result, VsplitError};
use crate::rng::{derive_seed, rng_from};

/// Deterministic 80/10/10 partition of a sample list.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SplitSample>,
    pub val: Vec<SplitSample>,
    pub test: Vec<SplitSample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffle then partition samples 80/10/10 (val and test get floor(n/10)
/// each; remainders stay in train).
pub fn split_dataset(samples: Vec<SplitSample>, seed: u64) -> Result<DatasetSplit> {
    split_indices(samples.len(), seed).map(|(tr, va, te)| {
        let mut pool: Vec<Option<SplitSample>> = samples.into_iter().map(Some).collect();
        let mut take = |ids: Vec<usize>| -> Vec<SplitSample> {
            ids.into_iter()
                .map(|i| pool[i].take().expect("index used twice"))
                .collect()
        };
        DatasetSplit {
            train: take(tr),
            val: take(va),
            test: take(te),
            seed,
        }
    })
}

/// Index-level variant of [`split_dataset`]; used when the split must be
/// recorded in a manifest.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(VsplitError::Invalid(format!(
            "dataset split requires at least 10 samples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Extract `count` random square crops, applying the identical window to the
/// input, both targets and any clean channels of the sample.
pub fn extract_patches(
    sample: &SplitSample,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<SplitSample>> {
    sample.validate()?;
    let (h, w) = (sample.input.height(), sample.input.width());
    if patch == 0 || patch > h.min(w) {
        return Err(VsplitError::Invalid(format!(
            "patch size {patch} exceeds image {h}x{w}"
        )));
    }
    let mut rng = rng_from(derive_seed(seed, &[h as u64, w as u64, patch as u64]));
    let crop_all = |top: usize, left: usize| -> Result<SplitSample> {
        let c = |img: &Image2D| img.crop(top, left, patch, patch);
        Ok(SplitSample {
            input: c(&sample.input)?,
            target1: c(&sample.target1)?,
            target2: c(&sample.target2)?,
            clean1: sample.clean1.as_ref().map(&c).transpose()?,
            clean2: sample.clean2.as_ref().map(&c).transpose()?,
        })
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let top = if h == patch { 0 } else { rng.gen_range(0..=h - patch) };
        let left = if w == patch { 0 } else { rng.gen_range(0..=w - patch) };
        out.push(crop_all(top, left)?);
    }
    Ok(out)
}
