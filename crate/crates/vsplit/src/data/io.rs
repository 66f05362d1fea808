//! Dataset and prediction directories: `manifest.json` plus one raw
//! float32 little-endian (C row-major) file per image.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Image2D, SplitSample};
use crate::error::{Result, VsplitError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RAW_DTYPE: &str = "float32le";

/// Provenance of the synthetic generator that produced a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub kind1: String,
    pub kind2: String,
    pub density1: f64,
    pub density2: f64,
    pub peak: f64,
    pub seed: u64,
}

/// Provenance of noise injection applied to a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseProvenance {
    pub poisson_factor: f64,
    pub gaussian_scale: f64,
    /// Std of the clean mixed inputs the Gaussian scale multiplies.
    pub reference_std: f64,
    pub seed: u64,
}

/// Train/val/test membership by sample id, with the seed that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIds {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub input: String,
    pub target1: String,
    pub target2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean2: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dtype: String,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseProvenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitIds>,
}

/// Provenance of a prediction run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionProvenance {
    pub checkpoint_sha256: String,
    pub mode: String,
    pub k: usize,
    pub seed: u64,
    pub tile: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pred1: String,
    pub pred2: String,
    /// Pixel-wise posterior std maps, present for sampled (MMSE) predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std2: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionManifest {
    pub schema_version: u32,
    pub dtype: String,
    pub samples: Vec<PredEntry>,
    pub provenance: PredictionProvenance,
}

/// Write one raw float32-LE row-major raster.
pub fn write_raw(path: &Path, img: &Image2D) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.pixels().len() * 4);
    for &v in img.pixels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read one raw float32-LE raster of known shape.
pub fn read_raw(path: &Path, height: usize, width: usize) -> Result<Image2D> {
    let bytes = fs::read(path)?;
    let expect = height * width * 4;
    if bytes.len() != expect {
        return Err(VsplitError::Invalid(format!(
            "{}: expected {expect} bytes for {height}x{width} float32, got {}",
            path.display(),
            bytes.len()
        )));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Image2D::new(height, width, pixels)
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Write a dataset directory: manifest + per-image raw files.
pub fn write_dataset(
    dir: &Path,
    samples: &[(String, SplitSample)],
    generator: Option<GeneratorInfo>,
    noise: Option<NoiseProvenance>,
    split: Option<SplitIds>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (id, s) in samples {
        s.validate()?;
        let file = |suffix: &str| format!("{id}_{suffix}.raw");
        write_raw(&dir.join(file("input")), &s.input)?;
        write_raw(&dir.join(file("target1")), &s.target1)?;
        write_raw(&dir.join(file("target2")), &s.target2)?;
        if let Some(c) = &s.clean1 {
            write_raw(&dir.join(file("clean1")), c)?;
        }
        if let Some(c) = &s.clean2 {
            write_raw(&dir.join(file("clean2")), c)?;
        }
        entries.push(SampleEntry {
            id: id.clone(),
            height: s.input.height(),
            width: s.input.width(),
            input: file("input"),
            target1: file("target1"),
            target2: file("target2"),
            clean1: s.clean1.as_ref().map(|_| file("clean1")),
            clean2: s.clean2.as_ref().map(|_| file("clean2")),
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dtype: RAW_DTYPE.into(),
        samples: entries,
        generator,
        noise,
        split,
    };
    fs::write(
        manifest_path(dir),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

/// Read a dataset directory back into (id, sample) pairs plus its manifest.
pub fn read_dataset(dir: &Path) -> Result<(Vec<(String, SplitSample)>, DatasetManifest)> {
    let mp = manifest_path(dir);
    let text = fs::read_to_string(&mp)
        .map_err(|e| VsplitError::Invalid(format!("{}: {e}", mp.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| VsplitError::Config(format!("{}: {e}", mp.display())))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(VsplitError::Config(format!(
            "{}: unsupported schema_version {}",
            mp.display(),
            manifest.schema_version
        )));
    }
    if manifest.dtype != RAW_DTYPE {
        return Err(VsplitError::Config(format!(
            "{}: unsupported dtype {:?}",
            mp.display(),
            manifest.dtype
        )));
    }
    let mut out = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let rd = |name: &str| read_raw(&dir.join(name), e.height, e.width);
        let sample = SplitSample {
            input: rd(&e.input)?,
            target1: rd(&e.target1)?,
            target2: rd(&e.target2)?,
            clean1: e.clean1.as_deref().map(rd).transpose()?,
            clean2: e.clean2.as_deref().map(rd).transpose()?,
        };
        out.push((e.id.clone(), sample));
    }
    Ok((out, manifest))
}

/// One sample's prediction artifacts: MMSE/posterior-mean channel estimates
/// plus optional pixel-wise posterior std maps.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub id: String,
    pub pred1: Image2D,
    pub pred2: Image2D,
    pub std1: Option<Image2D>,
    pub std2: Option<Image2D>,
}

/// Write a prediction directory: per-sample predicted channel pairs.
pub fn write_predictions(
    dir: &Path,
    preds: &[Prediction],
    provenance: PredictionProvenance,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(preds.len());
    for p in preds {
        let id = &p.id;
        let f1 = format!("{id}_pred1.raw");
        let f2 = format!("{id}_pred2.raw");
        write_raw(&dir.join(&f1), &p.pred1)?;
        write_raw(&dir.join(&f2), &p.pred2)?;
        let std_name = |img: &Option<Image2D>, suffix: &str| -> Result<Option<String>> {
            match img {
                None => Ok(None),
                Some(s) => {
                    let f = format!("{id}_{suffix}.raw");
                    write_raw(&dir.join(&f), s)?;
                    Ok(Some(f))
                }
            }
        };
        entries.push(PredEntry {
            id: id.clone(),
            height: p.pred1.height(),
            width: p.pred1.width(),
            pred1: f1,
            pred2: f2,
            std1: std_name(&p.std1, "std1")?,
            std2: std_name(&p.std2, "std2")?,
        });
    }
    let manifest = PredictionManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dtype: RAW_DTYPE.into(),
        samples: entries,
        provenance,
    };
    fs::write(
        manifest_path(dir),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

/// Read a prediction directory.
pub fn read_predictions(dir: &Path) -> Result<(Vec<Prediction>, PredictionManifest)> {
    let mp = manifest_path(dir);
    let text = fs::read_to_string(&mp)
        .map_err(|e| VsplitError::Invalid(format!("{}: {e}", mp.display())))?;
    let manifest: PredictionManifest = serde_json::from_str(&text)
        .map_err(|e| VsplitError::Config(format!("{}: {e}", mp.display())))?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let rd = |name: &str| read_raw(&dir.join(name), e.height, e.width);
        out.push(Prediction {
            id: e.id.clone(),
            pred1: rd(&e.pred1)?,
            pred2: rd(&e.pred2)?,
            std1: e.std1.as_deref().map(rd).transpose()?,
            std2: e.std2.as_deref().map(rd).transpose()?,
        });
    }
    Ok((out, manifest))
}
