//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function is a thin wrapper over a plain Rust function so
//! the numerics can be tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use splitvae::features::{FrontEnd, SpectrogramConfig};
use splitvae::model::{poe_fuse, GaussianParams};
use splitvae::objective::{decomposed_kl, kl_analytic};
use splitvae::synthesis::{render_waveform, Timbre, WaveformSpec};
use splitvae::Error;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A rendered tone: the leading waveform samples and its log-mel image.
pub struct Tone {
    pub waveform: Vec<f32>,
    /// Row-major `[n_mels, n_frames]`, rescaled to `[0, 1]` for display.
    pub log_mel: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
}

pub fn tone(timbre: usize, frequency_hz: f64, preview_samples: usize) -> Result<Tone, Error> {
    let timbre = Timbre::from_id(timbre)
        .ok_or_else(|| Error::Config(format!("unknown timbre id {timbre}")))?;
    let cfg = SpectrogramConfig::default();
    let wave = render_waveform(&WaveformSpec {
        timbre,
        frequency_hz,
        amplitude: 1.0,
        duration_s: 1.0,
        sample_rate_hz: cfg.sample_rate_hz,
    })?;
    let (n_mels, n_frames) = cfg.target_shape();
    let raw = FrontEnd::new(cfg)?.raw_log_mel(&wave)?;
    let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(f32::EPSILON);
    Ok(Tone {
        waveform: wave[..preview_samples.min(wave.len())].to_vec(),
        log_mel: raw.iter().map(|v| (v - lo) / span).collect(),
        n_mels,
        n_frames,
    })
}

/// Fuses 1-D Gaussian experts given as parallel `means`/`log_vars`,
/// returning `[mean, log_var]`.
pub fn fuse(means: &[f64], log_vars: &[f64], include_prior: bool) -> Result<[f64; 2], Error> {
    if means.len() != log_vars.len() {
        return Err(Error::Fusion(format!(
            "{} means but {} log-variances",
            means.len(),
            log_vars.len()
        )));
    }
    let experts = means
        .iter()
        .zip(log_vars)
        .map(|(&m, &lv)| GaussianParams::single(vec![m], vec![lv]))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&GaussianParams<f64>> = experts.iter().collect();
    let f = poe_fuse(&refs, include_prior)?;
    Ok([f.mean[0], f.log_var[0]])
}

/// Decomposed KL of a synthetic batch of `m` two-dimensional posteriors.
///
/// Posterior means are drawn with spread `spread` and correlation `rho`
/// between the two dimensions; every posterior has log-variance
/// `log_var`. Returns `[mi, tc, dkl, analytic_kl]`, averaged over
/// `repeats` reparameterized draws.
pub fn decomposition(
    m: usize,
    spread: f64,
    rho: f64,
    log_var: f64,
    repeats: usize,
    seed: u64,
) -> Result<[f64; 4], Error> {
    if m < 2 || repeats == 0 {
        return Err(Error::Config(
            "need at least two posteriors and one draw".into(),
        ));
    }
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Range {
            what: "rho",
            value: rho,
            min: -1.0,
            max: 1.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut mean = Vec::with_capacity(2 * m);
    for _ in 0..m {
        let (a, b) = (normal(), normal());
        mean.push(spread * a);
        mean.push(spread * (rho * a + (1.0 - rho * rho).sqrt() * b));
    }
    let q = GaussianParams::new(m, 2, mean, vec![log_var; 2 * m])?;
    let sd = (0.5 * log_var).exp();
    let mut acc = [0.0; 3];
    for _ in 0..repeats {
        let z: Vec<f64> = q.mean.iter().map(|mu| mu + sd * normal()).collect();
        let t = decomposed_kl(&q, &z, m)?;
        acc[0] += t.mi;
        acc[1] += t.tc;
        acc[2] += t.dkl;
    }
    let r = repeats as f64;
    Ok([acc[0] / r, acc[1] / r, acc[2] / r, kl_analytic(&q)])
}

#[wasm_bindgen(js_name = timbreNames)]
pub fn timbre_names() -> Vec<String> {
    (0..Timbre::COUNT)
        .filter_map(Timbre::from_id)
        .map(|t| t.name().to_string())
        .collect()
}

#[wasm_bindgen(js_name = Tone)]
pub struct JsTone(Tone);

#[wasm_bindgen(js_class = Tone)]
impl JsTone {
    #[wasm_bindgen(constructor)]
    pub fn new(
        timbre: usize,
        frequency_hz: f64,
        preview_samples: usize,
    ) -> Result<JsTone, JsError> {
        tone(timbre, frequency_hz, preview_samples)
            .map(JsTone)
            .map_err(js)
    }

    pub fn waveform(&self) -> Vec<f32> {
        self.0.waveform.clone()
    }

    #[wasm_bindgen(js_name = logMel)]
    pub fn log_mel(&self) -> Vec<f32> {
        self.0.log_mel.clone()
    }

    #[wasm_bindgen(getter, js_name = nMels)]
    pub fn n_mels(&self) -> usize {
        self.0.n_mels
    }

    #[wasm_bindgen(getter, js_name = nFrames)]
    pub fn n_frames(&self) -> usize {
        self.0.n_frames
    }
}

#[wasm_bindgen(js_name = poeFuse)]
pub fn poe_fuse_js(
    means: &[f64],
    log_vars: &[f64],
    include_prior: bool,
) -> Result<Vec<f64>, JsError> {
    fuse(means, log_vars, include_prior)
        .map(|f| f.to_vec())
        .map_err(js)
}

#[wasm_bindgen(js_name = klDecomposition)]
pub fn kl_decomposition_js(
    m: usize,
    spread: f64,
    rho: f64,
    log_var: f64,
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    decomposition(m, spread, rho, log_var, repeats, seed)
        .map(|d| d.to_vec())
        .map_err(js)
}
