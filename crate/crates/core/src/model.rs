//! Shared encoder/decoder, the private/shared latent split and
//! product-of-experts fusion of the shared posterior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, Conv2d, ConvTranspose2d, Dense,
    ParamStore, Real, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_private: usize,
    pub d_shared: usize,
    /// Encoder conv widths; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Side of the square input image.
    pub input_size: usize,
    /// Encoder log-variance heads are clamped to `[-c, c]`.
    pub log_var_clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_private: 8,
            d_shared: 8,
            channels: vec![32, 64, 128, 256],
            kernel: 4,
            input_size: 64,
            log_var_clamp: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_private == 0 || self.d_shared == 0 {
            return Err(Error::Config("latent dimensions must be at least 1".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("at least one conv layer is required".into()));
        }
        let shrink = 1usize << self.channels.len();
        if !self.input_size.is_multiple_of(shrink) || self.input_size / shrink == 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.kernel != 4 {
            return Err(Error::Config(
                "only 4×4 stride-2 kernels are supported".into(),
            ));
        }
        Ok(())
    }

    /// Encoder output width per view: mean and log-variance for both blocks.
    pub fn head_width(&self) -> usize {
        2 * (self.d_private + self.d_shared)
    }

    pub fn latent_width(&self) -> usize {
        self.d_private + self.d_shared
    }

    fn bottleneck_side(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    fn flat_width(&self) -> usize {
        self.channels.last().copied().unwrap_or(1) * self.bottleneck_side().pow(2)
    }
}

/// A batch of diagonal Gaussians, row-major `batch × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<T> {
    pub batch: usize,
    pub dim: usize,
    pub mean: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Real> GaussianParams<T> {
    pub fn new(batch: usize, dim: usize, mean: Vec<T>, log_var: Vec<T>) -> Result<Self> {
        if mean.len() != batch * dim || log_var.len() != batch * dim {
            return Err(Error::dim(
                "gaussian params",
                format!("{batch}×{dim}"),
                format!("mean {} / log_var {}", mean.len(), log_var.len()),
            ));
        }
        Ok(GaussianParams {
            batch,
            dim,
            mean,
            log_var,
        })
    }

    /// A single Gaussian (batch of one).
    pub fn single(mean: Vec<T>, log_var: Vec<T>) -> Result<Self> {
        let dim = mean.len();
        Self::new(1, dim, mean, log_var)
    }

    pub fn zeros(batch: usize, dim: usize) -> Self {
        GaussianParams {
            batch,
            dim,
            mean: vec![T::zero(); batch * dim],
            log_var: vec![T::zero(); batch * dim],
        }
    }

    pub fn variance(&self, i: usize) -> T {
        self.log_var[i].exp()
    }

    pub fn row_mean(&self, r: usize) -> &[T] {
        &self.mean[r * self.dim..(r + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_var).all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> GaussianParams<U> {
        GaussianParams {
            batch: self.batch,
            dim: self.dim,
            mean: self.mean.iter().map(|&v| U::of(v.as_f64())).collect(),
            log_var: self.log_var.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Sum of `terms` in ascending order, so the result does not depend on the
/// order the terms were supplied in.
fn ordered_sum<T: Real>(terms: &mut [T]) -> T {
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().fold(T::zero(), |acc, &v| acc + v)
}

/// Product of Gaussian experts, elementwise: precisions add (plus one for
/// the standard-normal prior expert when `include_prior`), and the mean is
/// the precision-weighted average of the expert means. The result is
/// exactly invariant to the order of `experts`.
pub fn poe_fuse<T: Real>(
    experts: &[&GaussianParams<T>],
    include_prior: bool,
) -> Result<GaussianParams<T>> {
    let first = match experts.first() {
        Some(e) => *e,
        None if include_prior => {
            return Err(Error::Fusion("no experts to size the prior against".into()))
        }
        None => {
            return Err(Error::Fusion(
                "empty expert list with the prior excluded".into(),
            ))
        }
    };
    if let Some(bad) = experts
        .iter()
        .find(|e| e.batch != first.batch || e.dim != first.dim)
    {
        return Err(Error::dim(
            "poe_fuse",
            format!("{}×{}", first.batch, first.dim),
            format!("{}×{}", bad.batch, bad.dim),
        ));
    }
    let n = first.batch * first.dim;
    let mut out = GaussianParams::zeros(first.batch, first.dim);
    let mut precisions = Vec::with_capacity(experts.len() + 1);
    let mut weighted = Vec::with_capacity(experts.len());
    for i in 0..n {
        precisions.clear();
        weighted.clear();
        if include_prior {
            precisions.push(T::one());
        }
        for e in experts {
            let p = (-e.log_var[i]).exp();
            precisions.push(p);
            weighted.push(p * e.mean[i]);
        }
        let total = ordered_sum(&mut precisions);
        out.mean[i] = ordered_sum(&mut weighted) / total;
        out.log_var[i] = -total.ln();
    }
    Ok(out)
}

/// Reverse-mode step through [`poe_fuse`]: given gradients on the fused
/// mean/log-variance, returns gradients on each expert's parameters.
pub fn poe_backward<T: Real>(
    experts: &[&GaussianParams<T>],
    fused: &GaussianParams<T>,
    d_mean: &[T],
    d_log_var: &[T],
) -> Vec<GaussianParams<T>> {
    experts
        .iter()
        .map(|e| {
            let mut g = GaussianParams::zeros(e.batch, e.dim);
            for i in 0..e.mean.len() {
                // share of the fused precision held by this expert
                let w = (fused.log_var[i] - e.log_var[i]).exp();
                g.mean[i] = d_mean[i] * w;
                g.log_var[i] = d_mean[i] * w * (fused.mean[i] - e.mean[i]) + d_log_var[i] * w;
            }
            g
        })
        .collect()
}

/// `z = mean + exp(log_var / 2) ⊙ noise`.
pub fn reparameterize<T: Real>(g: &GaussianParams<T>, noise: &[T]) -> Result<Vec<T>> {
    if noise.len() != g.mean.len() {
        return Err(Error::dim("reparameterize", g.mean.len(), noise.len()));
    }
    let half = T::of(0.5);
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect())
}

/// Accumulates the gradient of a reparameterized sample into the mean and
/// log-variance gradients: `∂z/∂mean = 1`, `∂z/∂log_var = noise·σ/2`.
pub fn reparameterize_backward<T: Real>(
    g: &GaussianParams<T>,
    noise: &[T],
    d_z: &[T],
    grads: &mut GaussianParams<T>,
) {
    let half = T::of(0.5);
    for i in 0..d_z.len() {
        grads.mean[i] += d_z[i];
        grads.log_var[i] += d_z[i] * noise[i] * (half * g.log_var[i]).exp() * half;
    }
}

/// Private and shared posteriors of a batch of view pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior<T> {
    pub zp1: GaussianParams<T>,
    pub zp2: GaussianParams<T>,
    /// Per-view shared experts.
    pub zs1: GaussianParams<T>,
    pub zs2: GaussianParams<T>,
    /// Product-of-experts fusion of `zs1`, `zs2` and the prior.
    pub zs: GaussianParams<T>,
}

/// Standard-normal draws for the three latent groups of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise<T> {
    pub p1: Vec<T>,
    pub p2: Vec<T>,
    pub s: Vec<T>,
}

impl<T: Real> LatentNoise<T> {
    pub fn sample(batch: usize, cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::of(rng.sample::<f64, _>(rand_distr::StandardNormal)))
                .collect()
        };
        LatentNoise {
            p1: draw(batch * cfg.d_private),
            p2: draw(batch * cfg.d_private),
            s: draw(batch * cfg.d_shared),
        }
    }

    pub fn zeros(batch: usize, cfg: &ModelConfig) -> Self {
        LatentNoise {
            p1: vec![T::zero(); batch * cfg.d_private],
            p2: vec![T::zero(); batch * cfg.d_private],
            s: vec![T::zero(); batch * cfg.d_shared],
        }
    }

    pub fn swapped(&self) -> Self {
        LatentNoise {
            p1: self.p2.clone(),
            p2: self.p1.clone(),
            s: self.s.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    head: Dense,
}

/// Activations kept for the backward pass of one encoder call.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    /// `acts[i]` is the input of conv `i`; the last entry is the final relu output.
    acts: Vec<Tensor<T>>,
    flat: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    dense: Dense,
    deconvs: Vec<ConvTranspose2d>,
    channels: usize,
    side: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    z: Tensor<T>,
    /// `acts[i]` is the input of deconv `i`; the last entry is the logistic output.
    acts: Vec<Tensor<T>>,
}

/// One view's encoder output split into the private posterior and the
/// shared expert, both with clamped log-variances.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub private: GaussianParams<T>,
    pub shared: GaussianParams<T>,
    /// Raw (pre-clamp) head activations, `batch × head_width`.
    head: Tensor<T>,
    trace: EncoderTrace<T>,
}

/// The multi-view VAE. Parameters live in a [`ParamStore`] owned by the
/// caller so the same structure serves `f32` training and `f64` checks.
#[derive(Clone, Debug)]
pub struct MultiViewVae {
    config: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
}

impl MultiViewVae {
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.kernel;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut store,
                &format!("encoder.conv{i}"),
                c_in,
                c,
                k,
                2,
                1,
                &mut rng,
            ));
            c_in = c;
        }
        let head = Dense::new(
            &mut store,
            "encoder.head",
            config.flat_width(),
            config.head_width(),
            &mut rng,
        );
        let dense = Dense::new(
            &mut store,
            "decoder.input",
            config.latent_width(),
            config.flat_width(),
            &mut rng,
        );
        let mut deconvs = Vec::new();
        let widths: Vec<usize> = config
            .channels
            .iter()
            .rev()
            .copied()
            .chain(std::iter::once(1))
            .collect();
        for (i, w) in widths.windows(2).enumerate() {
            deconvs.push(ConvTranspose2d::new(
                &mut store,
                &format!("decoder.deconv{i}"),
                w[0],
                w[1],
                k,
                2,
                1,
                &mut rng,
            ));
        }
        let model = MultiViewVae {
            encoder: Encoder { convs, head },
            decoder: Decoder {
                dense,
                deconvs,
                channels: widths[0],
                side: config.bottleneck_side(),
            },
            config,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_images<T: Real>(&self, x: &Tensor<T>) -> Result<usize> {
        let s = self.config.input_size;
        if x.shape().len() != 4 || x.shape()[1..] != [1, s, s] {
            return Err(Error::dim(
                "encoder input",
                format!("[batch, 1, {s}, {s}]"),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(x.dim(0))
    }

    /// Encodes a batch of single-channel images, `[batch, 1, side, side]`.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Encoded<T>> {
        let batch = self.check_images(x)?;
        let mut acts = vec![x.clone()];
        for conv in &self.encoder.convs {
            let mut h = conv.forward(store, acts.last().expect("non-empty"))?;
            relu_forward(&mut h);
            acts.push(h);
        }
        let flat = acts
            .last()
            .expect("non-empty")
            .clone()
            .reshape(&[batch, self.config.flat_width()])?;
        let head = self.encoder.head.forward(store, &flat)?;
        let (dp, ds) = (self.config.d_private, self.config.d_shared);
        let width = self.config.head_width();
        let clamp = T::of(self.config.log_var_clamp);
        let mut private = GaussianParams::zeros(batch, dp);
        let mut shared = GaussianParams::zeros(batch, ds);
        for (b, row) in head.data().chunks(width).enumerate() {
            private.mean[b * dp..(b + 1) * dp].copy_from_slice(&row[..dp]);
            for (d, &v) in private.log_var[b * dp..(b + 1) * dp]
                .iter_mut()
                .zip(&row[dp..2 * dp])
            {
                *d = v.max(-clamp).min(clamp);
            }
            shared.mean[b * ds..(b + 1) * ds].copy_from_slice(&row[2 * dp..2 * dp + ds]);
            for (d, &v) in shared.log_var[b * ds..(b + 1) * ds]
                .iter_mut()
                .zip(&row[2 * dp + ds..])
            {
                *d = v.max(-clamp).min(clamp);
            }
        }
        Ok(Encoded {
            private,
            shared,
            head,
            trace: EncoderTrace { acts, flat },
        })
    }

    /// Backpropagates gradients on the (clamped) posterior parameters of an
    /// [`Encoded`] batch into the encoder weights.
    pub fn encode_backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        enc: &Encoded<T>,
        d_private: &GaussianParams<T>,
        d_shared: &GaussianParams<T>,
    ) -> Result<()> {
        let (dp, ds) = (self.config.d_private, self.config.d_shared);
        let width = self.config.head_width();
        let batch = enc.private.batch;
        let clamp = T::of(self.config.log_var_clamp);
        let mut d_head = vec![T::zero(); batch * width];
        let raw = enc.head.data();
        let pass = |v: T, g: T| {
            if v > -clamp && v < clamp {
                g
            } else {
                T::zero()
            }
        };
        for b in 0..batch {
            let row = &mut d_head[b * width..(b + 1) * width];
            let raw = &raw[b * width..(b + 1) * width];
            for k in 0..dp {
                row[k] = d_private.mean[b * dp + k];
                row[dp + k] = pass(raw[dp + k], d_private.log_var[b * dp + k]);
            }
            for k in 0..ds {
                row[2 * dp + k] = d_shared.mean[b * ds + k];
                row[2 * dp + ds + k] = pass(raw[2 * dp + ds + k], d_shared.log_var[b * ds + k]);
            }
        }
        let d_head = Tensor::from_vec(&[batch, width], d_head)?;
        let acts = &enc.trace.acts;
        let d_flat = self
            .encoder
            .head
            .backward(store, &enc.trace.flat, &d_head, true)?
            .expect("input grad requested");
        let mut grad = d_flat.reshape(acts.last().expect("non-empty").shape())?;
        for (i, conv) in self.encoder.convs.iter().enumerate().rev() {
            relu_backward(&acts[i + 1], &mut grad);
            match conv.backward(store, &acts[i], &grad, i > 0)? {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    /// Decodes concatenated `[z_private, z_shared]` rows, `batch × (d_p + d_s)`,
    /// into images in `(0, 1)`.
    pub fn decode<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &Tensor<T>,
    ) -> Result<(Tensor<T>, DecoderTrace<T>)> {
        let width = self.config.latent_width();
        if z.shape().len() != 2 || z.dim(1) != width {
            return Err(Error::dim(
                "decoder input",
                format!("[batch, {width}]"),
                format!("{:?}", z.shape()),
            ));
        }
        let batch = z.dim(0);
        let mut h = self.decoder.dense.forward(store, z)?;
        relu_forward(&mut h);
        let side = self.decoder.side;
        let mut acts = vec![h.reshape(&[batch, self.decoder.channels, side, side])?];
        let last = self.decoder.deconvs.len() - 1;
        for (i, deconv) in self.decoder.deconvs.iter().enumerate() {
            let mut h = deconv.forward(store, acts.last().expect("non-empty"))?;
            if i == last {
                sigmoid_forward(&mut h);
            } else {
                relu_forward(&mut h);
            }
            acts.push(h);
        }
        let out = acts.last().expect("non-empty").clone();
        Ok((out, DecoderTrace { z: z.clone(), acts }))
    }

    /// Backpropagates `d_out` (gradient on the decoded images) and returns
    /// the gradient on the decoder input rows.
    pub fn decode_backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        trace: &DecoderTrace<T>,
        d_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let acts = &trace.acts;
        let mut grad = d_out.clone();
        let last = self.decoder.deconvs.len() - 1;
        for (i, deconv) in self.decoder.deconvs.iter().enumerate().rev() {
            if i == last {
                sigmoid_backward(&acts[i + 1], &mut grad);
            } else {
                relu_backward(&acts[i + 1], &mut grad);
            }
            grad = deconv
                .backward(store, &acts[i], &grad, true)?
                .expect("input grad requested");
        }
        relu_backward(&acts[0], &mut grad);
        let batch = trace.z.dim(0);
        let grad = grad.reshape(&[batch, self.config.flat_width()])?;
        Ok(self
            .decoder
            .dense
            .backward(store, &trace.z, &grad, true)?
            .expect("input grad requested"))
    }

    /// Concatenates private and shared samples into decoder input rows.
    pub fn latent_rows<T: Real>(
        &self,
        z_private: &[T],
        z_shared: &[T],
        batch: usize,
    ) -> Result<Tensor<T>> {
        let (dp, ds) = (self.config.d_private, self.config.d_shared);
        if z_private.len() != batch * dp || z_shared.len() != batch * ds {
            return Err(Error::dim(
                "latent concat",
                format!("{batch}×{dp} and {batch}×{ds}"),
                format!("{} and {}", z_private.len(), z_shared.len()),
            ));
        }
        let mut rows = Vec::with_capacity(batch * (dp + ds));
        for b in 0..batch {
            rows.extend_from_slice(&z_private[b * dp..(b + 1) * dp]);
            rows.extend_from_slice(&z_shared[b * ds..(b + 1) * ds]);
        }
        Tensor::from_vec(&[batch, dp + ds], rows)
    }

    /// Posterior of a batch of view pairs (no sampling).
    pub fn infer<T: Real>(
        &self,
        store: &ParamStore<T>,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<LatentPosterior<T>> {
        let e1 = self.encode(store, x1)?;
        let e2 = self.encode(store, x2)?;
        let zs = poe_fuse(&[&e1.shared, &e2.shared], true)?;
        Ok(LatentPosterior {
            zp1: e1.private,
            zp2: e2.private,
            zs1: e1.shared,
            zs2: e2.shared,
            zs,
        })
    }

    /// Copies parameter values by name from a checkpoint payload.
    pub fn load_values<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tensors: &[(String, Tensor<f32>)],
    ) -> Result<()> {
        if tensors.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                store.len()
            )));
        }
        for (name, t) in tensors {
            let id = store
                .id_of(name)
                .ok_or_else(|| Error::Config(format!("checkpoint tensor {name} not in model")))?;
            let p = store.param_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::dim(
                    name.clone(),
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mean: f64, var: f64) -> GaussianParams<f64> {
        GaussianParams::single(vec![mean], vec![var.ln()]).unwrap()
    }

    #[test]
    fn symmetric_experts_cancel() {
        let f = poe_fuse(&[&g1(1.0, 1.0), &g1(-1.0, 1.0)], true).unwrap();
        assert!(f.mean[0].abs() < 1e-12);
        assert!((f.variance(0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_expert_with_prior() {
        let f = poe_fuse(&[&g1(2.0, 1.0)], true).unwrap();
        assert!((f.mean[0] - 1.0).abs() < 1e-12);
        assert!((f.variance(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sharp_expert_dominates() {
        let f = poe_fuse(&[&g1(3.0, 1e-6), &g1(-5.0, 1.0)], true).unwrap();
        // T = 1e6 + 2, mean = (3e6 − 5)/(1e6 + 2)
        assert!((f.mean[0] - (3e6 - 5.0) / (1e6 + 2.0)).abs() < 1e-9);
        assert!((f.mean[0] - 3.0).abs() < 2e-5);
    }

    #[test]
    fn empty_fusion_without_prior_fails() {
        let err = poe_fuse::<f64>(&[], false).unwrap_err();
        assert!(matches!(err, Error::Fusion(_)));
    }

    #[test]
    fn mismatched_expert_dims_fail() {
        let a = GaussianParams::<f64>::zeros(1, 2);
        let b = GaussianParams::<f64>::zeros(1, 3);
        assert!(matches!(
            poe_fuse(&[&a, &b], true),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn reparameterize_reference_cases() {
        let g = GaussianParams::single(vec![0.3, -1.0], vec![0.7, 0.0]).unwrap();
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), vec![0.3, -1.0]);
        let std = GaussianParams::single(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(reparameterize(&std, &[1.25]).unwrap(), vec![1.25]);
    }

    #[test]
    fn reparameterize_gradient_coefficients() {
        // z = μ + σε: ∂z/∂μ = 1, ∂z/∂logσ² = εσ/2
        let (lv, eps) = (0.8f64, -1.3f64);
        let g = GaussianParams::single(vec![0.1], vec![lv]).unwrap();
        let mut grads = GaussianParams::zeros(1, 1);
        reparameterize_backward(&g, &[eps], &[1.0], &mut grads);
        assert_eq!(grads.mean[0], 1.0);
        assert!((grads.log_var[0] - eps * (lv / 2.0).exp() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn reparameterized_variance_matches_log_var() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let g = GaussianParams::new(n, 1, vec![0.0; n], vec![4f64.ln(); n]).unwrap();
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = reparameterize(&g, &noise).unwrap();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 4.0).abs() < 0.1, "var = {var}");
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: vec![2, 3],
            input_size: 8,
            d_private: 2,
            d_shared: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encoder_head_dims_and_weight_sharing() {
        let (model, store) = MultiViewVae::new::<f32>(ModelConfig::default(), 1).unwrap();
        let x = Tensor::from_vec(
            &[2, 1, 64, 64],
            (0..2 * 4096).map(|i| (i % 4096) as f32 / 4096.0).collect(),
        )
        .unwrap();
        let e = model.encode(&store, &x).unwrap();
        assert_eq!((e.private.batch, e.private.dim), (2, 8));
        assert_eq!((e.shared.batch, e.shared.dim), (2, 8));
        assert_eq!(e.private.row_mean(0), e.private.row_mean(1));
        assert_eq!(e.shared.log_var[..8], e.shared.log_var[8..]);
    }

    #[test]
    fn wrong_input_shape_is_a_dimension_error() {
        let (model, store) = MultiViewVae::new::<f32>(small_config(), 1).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 9, 8]);
        assert!(matches!(
            model.encode(&store, &x),
            Err(Error::Dimension { .. })
        ));
        let z = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(
            model.decode(&store, &z),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn log_var_head_is_clamped() {
        let cfg = small_config();
        let (model, mut store) = MultiViewVae::new::<f64>(cfg.clone(), 2).unwrap();
        // force the head bias of the first private log-variance to 15 with zero weights
        let w = store.id_of("encoder.head.weight").unwrap();
        let b = store.id_of("encoder.head.bias").unwrap();
        store.param_mut(w).value.fill(0.0);
        let bias = store.param_mut(b).value.data_mut();
        bias[cfg.d_private] = 15.0;
        bias[2 * cfg.d_private + cfg.d_shared] = -15.0;
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let e = model.encode(&store, &x).unwrap();
        assert_eq!(e.private.log_var[0], 10.0);
        assert_eq!(e.shared.log_var[0], -10.0);
    }

    #[test]
    fn decoder_output_shape_and_range() {
        let (model, store) = MultiViewVae::new::<f32>(ModelConfig::default(), 3).unwrap();
        let z = Tensor::from_vec(
            &[3, 16],
            (0..48).map(|i| (i as f32 * 0.7).sin() * 3.0).collect(),
        )
        .unwrap();
        let (x, _) = model.decode(&store, &z).unwrap();
        assert_eq!(x.shape(), &[3, 1, 64, 64]);
        assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
