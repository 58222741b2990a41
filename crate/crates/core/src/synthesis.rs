//! Synthetic tone corpus: four waveform classes (the timbre factor) at
//! uniformly drawn fundamentals (the frequency factor), quantized frequency
//! labels, and same-timbre/different-frequency pairing.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::map_chunks;
use crate::corpus::{Corpus, DatasetManifest, TensorBlock, CORPUS_VERSION, SPECTROGRAM_FILE};
use crate::error::{Error, Result};
use crate::features::{FrontEnd, NormalizationStats, SpectrogramConfig};

/// Waveform class. The discriminant is the class id used in labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timbre {
    Sine = 0,
    Square = 1,
    Sawtooth = 2,
    Triangle = 3,
}

impl Timbre {
    pub const ALL: [Timbre; 4] = [
        Timbre::Sine,
        Timbre::Square,
        Timbre::Sawtooth,
        Timbre::Triangle,
    ];
    pub const COUNT: usize = 4;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Timbre> {
        Timbre::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Timbre::Sine => "sine",
            Timbre::Square => "square",
            Timbre::Sawtooth => "sawtooth",
            Timbre::Triangle => "triangle",
        }
    }

    /// Unit-amplitude waveform at `cycles = f·t` (phase in periods).
    pub fn shape(self, cycles: f64) -> f64 {
        match self {
            Timbre::Sine => (2.0 * PI * cycles).sin(),
            Timbre::Square => {
                if (2.0 * PI * cycles).sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Timbre::Sawtooth => 2.0 * (cycles - (cycles + 0.5).floor()),
            Timbre::Triangle => (2.0 / PI) * (2.0 * PI * cycles).sin().asin(),
        }
    }
}

impl std::fmt::Display for Timbre {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    pub timbre: Timbre,
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
}

impl WaveformSpec {
    pub fn value_at(&self, t: f64) -> f64 {
        self.amplitude * self.timbre.shape(self.frequency_hz * t)
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz as f64).round() as usize
    }
}

/// Samples `spec` at `k / sample_rate` for `k` in `0..duration·sample_rate`.
pub fn render_waveform(spec: &WaveformSpec) -> Result<Vec<f32>> {
    let nyquist = spec.sample_rate_hz as f64 / 2.0;
    if !(spec.frequency_hz > 0.0 && spec.frequency_hz <= nyquist) {
        return Err(Error::Range {
            what: "frequency_hz",
            value: spec.frequency_hz,
            min: 0.0,
            max: nyquist,
        });
    }
    if !(spec.duration_s > 0.0 && spec.duration_s.is_finite()) {
        return Err(Error::Range {
            what: "duration_s",
            value: spec.duration_s,
            min: 0.0,
            max: f64::INFINITY,
        });
    }
    if !(spec.amplitude > 0.0 && spec.amplitude <= 1.0) {
        return Err(Error::Range {
            what: "amplitude",
            value: spec.amplitude,
            min: 0.0,
            max: 1.0,
        });
    }
    let sr = spec.sample_rate_hz as f64;
    Ok((0..spec.n_samples())
        .map(|k| spec.value_at(k as f64 / sr) as f32)
        .collect())
}

/// `n_bins + 1` equal-width edges spanning `[f_min, f_max]`.
pub fn uniform_bin_edges(f_min: f64, f_max: f64, n_bins: usize) -> Vec<f64> {
    let width = (f_max - f_min) / n_bins as f64;
    let mut edges: Vec<f64> = (0..=n_bins).map(|k| f_min + k as f64 * width).collect();
    edges[n_bins] = f_max;
    edges
}

/// Index `k` with `edges[k] ≤ f < edges[k + 1]`; `f` equal to the last edge
/// maps to the last bin.
pub fn quantize_frequency(f: f64, edges: &[f64]) -> Result<usize> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "bin edges must be strictly increasing with at least two entries".into(),
        ));
    }
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    if !(f >= lo && f <= hi) {
        return Err(Error::Range {
            what: "frequency_hz",
            value: f,
            min: lo,
            max: hi,
        });
    }
    let n_bins = edges.len() - 1;
    Ok((edges.partition_point(|&e| e <= f) - 1).min(n_bins - 1))
}

/// Ground-truth generative factors of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorLabel {
    pub timbre_class: usize,
    pub frequency_hz: f64,
    pub frequency_bin: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub n_frequency_bins: usize,
    pub amplitude: f64,
    /// Trailing fraction of sample indices held out for evaluation.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 32_000,
            seed: 0,
            sample_rate_hz: 16_000,
            duration_s: 1.0,
            f_min: 220.0,
            f_max: 2200.0,
            n_frequency_bins: 21,
            amplitude: 1.0,
            test_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 * Timbre::COUNT {
            return Err(Error::Config(format!(
                "n_samples = {} cannot form pairs (need at least {})",
                self.n_samples,
                2 * Timbre::COUNT
            )));
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max) {
            return Err(Error::Config(format!(
                "need 0 < f_min < f_max, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if (self.sample_rate_hz as f64) < 2.0 * self.f_max {
            return Err(Error::Range {
                what: "f_max",
                value: self.f_max,
                min: 0.0,
                max: self.sample_rate_hz as f64 / 2.0,
            });
        }
        if self.n_frequency_bins < 2 {
            return Err(Error::Config("n_frequency_bins must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} not in [0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        uniform_bin_edges(self.f_min, self.f_max, self.n_frequency_bins)
    }

    /// Number of leading sample indices in the training split.
    pub fn n_train(&self) -> usize {
        self.n_samples - (self.n_samples as f64 * self.test_fraction).round() as usize
    }

    pub fn waveform(&self, label: &FactorLabel) -> WaveformSpec {
        WaveformSpec {
            timbre: Timbre::from_id(label.timbre_class).expect("valid timbre id"),
            frequency_hz: label.frequency_hz,
            amplitude: self.amplitude,
            duration_s: self.duration_s,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Factors of sample `index`, drawn from its own RNG stream so any
    /// subset of samples can be regenerated independently.
    pub fn draw_factors(&self, index: usize) -> FactorLabel {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let timbre_class = rng.random_range(0..Timbre::COUNT);
        let frequency_hz = rng.random_range(self.f_min..self.f_max);
        let frequency_bin =
            quantize_frequency(frequency_hz, &self.bin_edges()).expect("drawn inside range");
        FactorLabel {
            timbre_class,
            frequency_hz,
            frequency_bin,
        }
    }
}

/// Forms same-timbre/different-bin pairs within each index range of
/// `splits`, so pairs never cross a split boundary.
///
/// Within a split each class is shuffled and greedily matched to the next
/// unmatched member in a different frequency bin; members left without a
/// partner are paired with a random classmate from a different bin. Every
/// sample therefore appears in at least one pair.
pub fn pair_samples(
    labels: &[FactorLabel],
    splits: &[std::ops::Range<usize>],
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6972);
    let mut pairs = Vec::new();
    for split in splits {
        for timbre in Timbre::ALL {
            let mut members: Vec<usize> = split
                .clone()
                .filter(|&i| labels[i].timbre_class == timbre.id())
                .collect();
            if members.is_empty() {
                continue;
            }
            let first_bin = labels[members[0]].frequency_bin;
            if members
                .iter()
                .all(|&i| labels[i].frequency_bin == first_bin)
            {
                return Err(Error::Pairing {
                    class: timbre.name().to_string(),
                    reason: format!(
                        "all {} samples in {split:?} share frequency bin {first_bin}",
                        members.len()
                    ),
                });
            }
            members.shuffle(&mut rng);
            let mut used = vec![false; members.len()];
            let mut leftovers = Vec::new();
            for a in 0..members.len() {
                if used[a] {
                    continue;
                }
                used[a] = true;
                let bin_a = labels[members[a]].frequency_bin;
                let partner = (a + 1..members.len())
                    .find(|&b| !used[b] && labels[members[b]].frequency_bin != bin_a);
                match partner {
                    Some(b) => {
                        used[b] = true;
                        pairs.push((members[a], members[b]));
                    }
                    None => leftovers.push(members[a]),
                }
            }
            for i in leftovers {
                let bin = labels[i].frequency_bin;
                let candidates: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&j| labels[j].frequency_bin != bin)
                    .collect();
                let j = candidates[rng.random_range(0..candidates.len())];
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs)
}

/// Exhaustive post-hoc check that every pair shares timbre and differs in
/// frequency bin. Returns the first offending pair.
pub fn validate_pairs(labels: &[FactorLabel], pairs: &[(usize, usize)]) -> Result<()> {
    for &(i, j) in pairs {
        let (a, b) = (labels.get(i), labels.get(j));
        let ok = matches!((a, b), (Some(a), Some(b)) if a.timbre_class == b.timbre_class && a.frequency_bin != b.frequency_bin);
        if !ok {
            let class = a
                .and_then(|l| Timbre::from_id(l.timbre_class))
                .map(|t| t.name().to_string())
                .unwrap_or_else(|| "?".into());
            return Err(Error::Pairing {
                class,
                reason: format!("pair ({i}, {j}) violates same-timbre/different-bin"),
            });
        }
    }
    Ok(())
}

/// Renders the full corpus: factors, waveforms, log-mel images normalized
/// with training-split statistics, and within-split pairs.
pub fn build_dataset(synth: &SynthConfig, features: &SpectrogramConfig) -> Result<Corpus> {
    synth.validate()?;
    features.validate()?;
    if synth.sample_rate_hz != features.sample_rate_hz {
        return Err(Error::Config(format!(
            "synthesis rate {} Hz differs from front-end rate {} Hz",
            synth.sample_rate_hz, features.sample_rate_hz
        )));
    }
    let front = FrontEnd::new(features.clone())?;
    let n = synth.n_samples;
    let factors: Vec<FactorLabel> = (0..n).map(|i| synth.draw_factors(i)).collect();
    let chunks = map_chunks(n, 64, |range| -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for i in range {
            let wave = render_waveform(&synth.waveform(&factors[i]))?;
            out.extend(front.raw_log_mel(&wave)?);
        }
        Ok(out)
    });
    let mut raw = Vec::new();
    for c in chunks {
        raw.extend(c?);
    }
    let (rows, cols) = features.target_shape();
    let n_train = synth.n_train();
    let stats = NormalizationStats::from_values(&raw[..n_train * rows * cols])
        .ok_or_else(|| Error::Config("empty training split".into()))?;
    stats.validate()?;
    let spectrograms = raw
        .iter()
        .map(|&v| stats.normalize(v as f64) as f32)
        .collect();
    let pair_index = pair_samples(&factors, &[0..n_train, n_train..n], synth.seed)?;
    validate_pairs(&factors, &pair_index)?;
    Ok(Corpus {
        manifest: DatasetManifest {
            version: CORPUS_VERSION,
            n_samples: n,
            n_train_samples: n_train,
            sample_rate_hz: synth.sample_rate_hz,
            f_min: synth.f_min,
            f_max: synth.f_max,
            bin_edges: synth.bin_edges(),
            normalization_stats: stats,
            rng_seed: synth.seed,
            synth: synth.clone(),
            features: features.clone(),
            spectrograms: TensorBlock {
                file: SPECTROGRAM_FILE.into(),
                dtype: "f32".into(),
                byte_order: "little".into(),
                shape: vec![n, rows, cols],
            },
            factors,
            pair_index,
        },
        spectrograms,
    })
}
