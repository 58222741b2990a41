//! Waveform → normalized log-mel spectrogram front end.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_mel: f64,
    pub fmax_mel: f64,
    pub log_floor: f64,
    /// Frames kept after crop/edge-repeat padding.
    pub n_frames: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate_hz: 16_000,
            n_fft: 1024,
            hop: 251,
            n_mels: 64,
            fmin_mel: 0.0,
            fmax_mel: 8_000.0,
            log_floor: 1e-5,
            n_frames: 64,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_fft = {} is not a power of two",
                self.n_fft
            )));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "hop = {} must be in 1..={}",
                self.hop, self.n_fft
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if self.n_mels == 0 || self.n_frames == 0 {
            return Err(Error::Config("n_mels and n_frames must be positive".into()));
        }
        if !(self.fmin_mel >= 0.0
            && self.fmin_mel < self.fmax_mel
            && self.fmax_mel <= self.sample_rate_hz as f64 / 2.0)
        {
            return Err(Error::Config(format!(
                "mel range [{}, {}] must satisfy 0 ≤ fmin < fmax ≤ sr/2",
                self.fmin_mel, self.fmax_mel
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn target_shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }
}

/// Row-major `rows × cols` real matrix (rows are frequency channels,
/// columns are frames).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.get(r, c))
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable STFT plan (window + FFT); cheap to share across threads.
#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &SpectrogramConfig) -> Self {
        Stft {
            n_fft: cfg.n_fft,
            hop: cfg.hop,
            window: hann_window(cfg.n_fft),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        }
    }

    /// `|STFT|²`, `(n_fft/2 + 1) × n_frames`; a trailing partial frame is dropped.
    pub fn power(&self, samples: &[f32]) -> Result<Spectrogram> {
        if samples.len() < self.n_fft {
            return Err(Error::dim(
                "stft",
                format!("at least {} samples", self.n_fft),
                samples.len(),
            ));
        }
        let n_frames = (samples.len() - self.n_fft) / self.hop + 1;
        let n_bins = self.n_fft / 2 + 1;
        let mut data = vec![0.0; n_bins * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for frame in 0..n_frames {
            let start = frame * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(samples[start + i] as f64 * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, b) in buf.iter().take(n_bins).enumerate() {
                data[k * n_frames + frame] = b.norm_sqr();
            }
        }
        Ok(Spectrogram {
            rows: n_bins,
            cols: n_frames,
            data,
        })
    }
}

pub fn stft_power(samples: &[f32], cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    Stft::new(cfg).power(samples)
}

/// Triangular HTK-mel filterbank, `n_mels × (n_fft/2 + 1)`, peak weight 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Half-open support `[first, last)` of each row, in FFT bins.
    pub support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// `filterbank · power`, `n_mels × n_frames`.
    pub fn apply(&self, power: &Spectrogram) -> Result<Spectrogram> {
        if power.rows != self.n_bins {
            return Err(Error::dim(
                "mel filterbank",
                format!("{} FFT bins", self.n_bins),
                power.rows,
            ));
        }
        let mut data = vec![0.0; self.n_mels * power.cols];
        for m in 0..self.n_mels {
            let row = self.row(m);
            let (lo, hi) = self.support[m];
            let out = &mut data[m * power.cols..(m + 1) * power.cols];
            for (k, &w) in row.iter().enumerate().take(hi).skip(lo) {
                let src = &power.data[k * power.cols..(k + 1) * power.cols];
                for (o, &p) in out.iter_mut().zip(src) {
                    *o += w * p;
                }
            }
        }
        Ok(Spectrogram {
            rows: self.n_mels,
            cols: power.cols,
            data,
        })
    }
}

pub fn mel_filterbank(cfg: &SpectrogramConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let (m_lo, m_hi) = (hz_to_mel(cfg.fmin_mel), hz_to_mel(cfg.fmax_mel));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    let mut support = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, centre, hi) = (points[m], points[m + 1], points[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = bin_hz(k);
            let rise = (f - lo) / (centre - lo);
            let fall = (hi - f) / (hi - centre);
            *w = rise.min(fall).max(0.0);
        }
        let first = row.iter().position(|&w| w > 0.0);
        let last = row.iter().rposition(|&w| w > 0.0);
        match (first, last) {
            (Some(a), Some(b)) => support.push((a, b + 1)),
            _ => {
                return Err(Error::Config(format!(
                    "mel filter {m} ({lo:.1}–{hi:.1} Hz) contains no FFT bin; reduce n_mels or raise n_fft"
                )))
            }
        }
    }
    Ok(MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        support,
    })
}

/// Global min/max of raw log-mel values over the training corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub global_min: f64,
    pub global_max: f64,
}

impl NormalizationStats {
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a f32>) -> Option<Self> {
        let mut it = values.into_iter().map(|&v| v as f64);
        let first = it.next()?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(NormalizationStats {
            global_min: lo,
            global_max: hi,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.global_max > self.global_min) {
            return Err(Error::Normalization(self.global_min));
        }
        Ok(())
    }

    pub fn normalize(&self, log_value: f64) -> f64 {
        ((log_value - self.global_min) / (self.global_max - self.global_min)).clamp(0.0, 1.0)
    }
}

/// `ln(mel_power + floor)` cropped or edge-padded to `n_frames` columns.
pub fn log_mel(
    power: &Spectrogram,
    filterbank: &MelFilterbank,
    cfg: &SpectrogramConfig,
) -> Result<Spectrogram> {
    let mel = filterbank.apply(power)?;
    let cols = cfg.n_frames;
    let mut data = vec![0.0; mel.rows * cols];
    for r in 0..mel.rows {
        for c in 0..cols {
            let src = c.min(mel.cols - 1);
            data[r * cols + c] = (mel.get(r, src) + cfg.log_floor).ln();
        }
    }
    Ok(Spectrogram {
        rows: mel.rows,
        cols,
        data,
    })
}

/// Normalized log-mel image in `[0, 1]`, row-major `n_mels × n_frames`.
pub fn log_mel_normalize(
    power: &Spectrogram,
    filterbank: &MelFilterbank,
    stats: &NormalizationStats,
    cfg: &SpectrogramConfig,
) -> Result<Vec<f32>> {
    stats.validate()?;
    let raw = log_mel(power, filterbank, cfg)?;
    Ok(raw
        .data
        .iter()
        .map(|&v| stats.normalize(v) as f32)
        .collect())
}

/// Shared, precomputed front end: waveform → raw log-mel image.
#[derive(Clone)]
pub struct FrontEnd {
    pub config: SpectrogramConfig,
    stft: Stft,
    filterbank: MelFilterbank,
}

impl FrontEnd {
    pub fn new(config: SpectrogramConfig) -> Result<Self> {
        let filterbank = mel_filterbank(&config)?;
        Ok(FrontEnd {
            stft: Stft::new(&config),
            filterbank,
            config,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Unnormalized log-mel values as `f32`, `n_mels × n_frames`.
    pub fn raw_log_mel(&self, samples: &[f32]) -> Result<Vec<f32>> {
        let power = self.stft.power(samples)?;
        let lm = log_mel(&power, &self.filterbank, &self.config)?;
        Ok(lm.data.into_iter().map(|v| v as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{render_waveform, Timbre, WaveformSpec};
    use proptest::prelude::*;

    fn sine(f: f64) -> Vec<f32> {
        render_waveform(&WaveformSpec {
            timbre: Timbre::Sine,
            frequency_hz: f,
            amplitude: 1.0,
            duration_s: 1.0,
            sample_rate_hz: 16_000,
        })
        .unwrap()
    }

    #[test]
    fn mel_scale_reference_values() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        let expected = 2595.0 * 2f64.log10();
        assert!((hz_to_mel(700.0) - expected).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn silence_gives_zero_power() {
        let cfg = SpectrogramConfig::default();
        let p = stft_power(&vec![0.0; 16_000], &cfg).unwrap();
        assert_eq!((p.rows, p.cols), (513, 60));
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_signal_is_rejected() {
        let cfg = SpectrogramConfig::default();
        assert!(matches!(
            stft_power(&[0.0; 1023], &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn bin_centred_sine_concentrates_in_its_bin() {
        let cfg = SpectrogramConfig::default();
        let k = 40;
        let f = k as f64 * 16_000.0 / 1024.0;
        let p = stft_power(&sine(f), &cfg).unwrap();
        for frame in 0..p.cols {
            let col: Vec<f64> = p.column(frame).collect();
            let peak = col.iter().cloned().fold(0.0, f64::max);
            let argmax = col.iter().position(|&v| v == peak).unwrap();
            assert_eq!(argmax, k);
            for (j, &v) in col.iter().enumerate() {
                if j.abs_diff(k) >= 2 {
                    assert!(10.0 * (v / peak).log10() <= -31.0, "bin {j}: {v} vs {peak}");
                }
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = SpectrogramConfig::default();
        let x = render_waveform(&WaveformSpec {
            timbre: Timbre::Sawtooth,
            frequency_hz: 777.7,
            amplitude: 1.0,
            duration_s: 1.0,
            sample_rate_hz: 16_000,
        })
        .unwrap();
        let p = stft_power(&x, &cfg).unwrap();
        let w = hann_window(cfg.n_fft);
        let n = cfg.n_fft;
        for frame in [0, 17, p.cols - 1] {
            let time: f64 = (0..n)
                .map(|i| (x[frame * cfg.hop + i] as f64 * w[i]).powi(2))
                .sum();
            let col: Vec<f64> = p.column(frame).collect();
            let spectral =
                (col[0] + col[n / 2] + 2.0 * col[1..n / 2].iter().sum::<f64>()) / n as f64;
            assert!((time - spectral).abs() / time < 1e-5);
        }
    }

    #[test]
    fn filterbank_rows_are_nonnegative_contiguous_and_cover_the_band() {
        let cfg = SpectrogramConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!((fb.n_mels, fb.n_bins), (64, 513));
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
            let (a, b) = fb.support[m];
            assert!(row[a..b].iter().all(|&w| w > 0.0), "row {m} has a gap");
        }
        for k in 0..fb.n_bins {
            let f = k as f64 * 16_000.0 / 1024.0;
            if f > cfg.fmin_mel && f < cfg.fmax_mel {
                assert!(
                    (0..fb.n_mels).any(|m| fb.row(m)[k] > 0.0),
                    "bin {k} uncovered"
                );
            }
        }
    }

    #[test]
    fn too_many_mels_is_a_config_error() {
        let cfg = SpectrogramConfig {
            n_mels: 400,
            ..SpectrogramConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn normalization_endpoints_and_midpoint() {
        let stats = NormalizationStats {
            global_min: -11.0,
            global_max: 9.0,
        };
        assert_eq!(stats.normalize(-11.0), 0.0);
        assert_eq!(stats.normalize(9.0), 1.0);
        assert_eq!(stats.normalize(-1.0), 0.5);
        assert_eq!(stats.normalize(50.0), 1.0);
        let degenerate = NormalizationStats {
            global_min: 2.0,
            global_max: 2.0,
        };
        assert!(matches!(
            degenerate.validate(),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn normalized_image_has_target_shape_and_range() {
        let cfg = SpectrogramConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let p = stft_power(&sine(523.0), &cfg).unwrap();
        let stats = NormalizationStats {
            global_min: -8.0,
            global_max: 8.0,
        };
        let x = log_mel_normalize(&p, &fb, &stats, &cfg).unwrap();
        assert_eq!(x.len(), 64 * 64);
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // padded frames repeat the last real frame
        for r in 0..64 {
            assert_eq!(x[r * 64 + 63], x[r * 64 + 59]);
        }
    }

    fn mel_argmax(f: f64) -> usize {
        let cfg = SpectrogramConfig::default();
        let fe = FrontEnd::new(cfg).unwrap();
        let lm = fe.raw_log_mel(&sine(f)).unwrap();
        let col: Vec<f32> = (0..64).map(|r| lm[r * 64 + 10]).collect();
        let peak = col.iter().cloned().fold(f32::MIN, f32::max);
        col.iter().position(|&v| v == peak).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mel_scale_is_monotone(a in 0.0f64..8000.0, d in 0.001f64..1000.0) {
            prop_assert!(hz_to_mel(a + d) > hz_to_mel(a));
        }

        #[test]
        fn mel_argmax_orders_with_frequency(fa in 220.0f64..2200.0, d in 1.0f64..500.0) {
            let fb = (fa + d).min(2200.0);
            prop_assert!(mel_argmax(fa) <= mel_argmax(fb));
        }
    }
}
