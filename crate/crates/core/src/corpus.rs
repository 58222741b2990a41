//! On-disk corpus: `manifest.json` plus a raw little-endian `f32` tensor
//! block `spectrograms.f32` of shape `[n_samples, n_mels, n_frames]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Real, Tensor};
use crate::error::{Error, Result};
use crate::features::{NormalizationStats, SpectrogramConfig};
use crate::synthesis::{FactorLabel, SynthConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPECTROGRAM_FILE: &str = "spectrograms.f32";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorBlock {
    pub file: String,
    pub dtype: String,
    pub byte_order: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub n_samples: usize,
    /// Samples `0..n_train_samples` form the training split, the rest the test split.
    pub n_train_samples: usize,
    pub sample_rate_hz: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub bin_edges: Vec<f64>,
    /// Computed over the training split only.
    pub normalization_stats: NormalizationStats,
    pub rng_seed: u64,
    pub synth: SynthConfig,
    pub features: SpectrogramConfig,
    pub spectrograms: TensorBlock,
    pub factors: Vec<FactorLabel>,
    /// Training pairs first, then test pairs; no pair crosses the split.
    pub pair_index: Vec<(usize, usize)>,
}

impl DatasetManifest {
    pub fn is_train_sample(&self, i: usize) -> bool {
        i < self.n_train_samples
    }

    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.pair_index
            .iter()
            .copied()
            .filter(|&(i, _)| self.is_train_sample(i))
            .collect()
    }

    pub fn test_pairs(&self) -> Vec<(usize, usize)> {
        self.pair_index
            .iter()
            .copied()
            .filter(|&(i, _)| !self.is_train_sample(i))
            .collect()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.spectrograms.shape[1], self.spectrograms.shape[2])
    }
}

/// A loaded corpus: manifest plus normalized spectrograms in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub spectrograms: Vec<f32>,
}

impl Corpus {
    pub fn image_len(&self) -> usize {
        let (h, w) = self.manifest.image_shape();
        h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.spectrograms[i * n..(i + 1) * n]
    }

    /// Stacks images `indices` into a `[len, 1, h, w]` tensor.
    pub fn batch<T: Real>(&self, indices: impl IntoIterator<Item = usize>) -> Tensor<T> {
        let (h, w) = self.manifest.image_shape();
        let mut data = Vec::new();
        let mut n = 0;
        for i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
            n += 1;
        }
        Tensor::from_vec(&[n, 1, h, w], data).expect("image sizes agree")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(4 * self.spectrograms.len());
        for v in &self.spectrograms {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&dir.join(SPECTROGRAM_FILE), &bytes)?;
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn read(dir: &Path) -> Result<Corpus> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&text)?;
        let bad = |reason: String| Error::Format {
            path: mpath.clone(),
            reason,
        };
        if manifest.version != CORPUS_VERSION {
            return Err(bad(format!(
                "unsupported corpus version {}",
                manifest.version
            )));
        }
        let block = &manifest.spectrograms;
        if block.dtype != "f32" || block.byte_order != "little" || block.shape.len() != 3 {
            return Err(bad(format!("unsupported tensor block {block:?}")));
        }
        if block.shape[0] != manifest.n_samples || manifest.factors.len() != manifest.n_samples {
            return Err(bad("sample counts disagree".into()));
        }
        let tpath = dir.join(&block.file);
        let raw = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let expected: usize = block.shape.iter().product();
        if raw.len() != 4 * expected {
            return Err(Error::Format {
                path: tpath,
                reason: format!("expected {} bytes, found {}", 4 * expected, raw.len()),
            });
        }
        let spectrograms = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Corpus {
            manifest,
            spectrograms,
        })
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        path.with_file_name(name)
    };
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
