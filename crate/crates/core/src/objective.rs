//! Negative ELBO with each latent group's KL split into mutual information,
//! total correlation and dimension-wise KL, estimated per minibatch with
//! minibatch-weighted sampling.

use serde::{Deserialize, Serialize};

use crate::backbone::{Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{GaussianParams, LatentPosterior};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Penalty weights on the MI, TC and dimension-wise KL terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.1,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be a finite non-negative weight"
                )));
            }
        }
        Ok(())
    }

    fn penalty(&self, t: &GroupTerms) -> f64 {
        self.alpha * t.mi + self.beta * t.tc + self.gamma * t.dkl
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub weights: ObjectiveWeights,
    /// Count the shared-latent penalty once per view (`true`) or once per pair.
    pub shared_kl_per_view: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: ObjectiveWeights::default(),
            shared_kl_per_view: true,
        }
    }
}

impl ObjectiveConfig {
    fn shared_multiplicity(&self) -> f64 {
        if self.shared_kl_per_view {
            2.0
        } else {
            1.0
        }
    }
}

/// Batch-mean estimates for one latent group, in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupTerms {
    pub mi: f64,
    pub tc: f64,
    pub dkl: f64,
    /// Closed-form KL to the prior, batch mean (reported, not optimized).
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Per-view Gaussian NLL without the constant, batch mean.
    pub recon: [f64; 2],
    /// The dropped `½·n·ln 2π` per image.
    pub recon_const: f64,
    pub p1: GroupTerms,
    pub p2: GroupTerms,
    pub s: GroupTerms,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,recon_1,recon_2,mi_p1,tc_p1,dkl_p1,kl_p1,mi_p2,tc_p2,dkl_p2,kl_p2,mi_s,tc_s,dkl_s,kl_s,total";

    pub fn csv_row(&self, epoch: usize) -> String {
        let mut cols = vec![epoch.to_string(), fmt(self.recon[0]), fmt(self.recon[1])];
        for g in [&self.p1, &self.p2, &self.s] {
            cols.extend([fmt(g.mi), fmt(g.tc), fmt(g.dkl), fmt(g.kl)]);
        }
        cols.push(fmt(self.total));
        cols.join(",")
    }

    /// Running mean helper: `self += other · w`.
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.recon[0] += w * other.recon[0];
        self.recon[1] += w * other.recon[1];
        self.recon_const = other.recon_const;
        for (a, b) in [
            (&mut self.p1, &other.p1),
            (&mut self.p2, &other.p2),
            (&mut self.s, &other.s),
        ] {
            a.mi += w * b.mi;
            a.tc += w * b.tc;
            a.dkl += w * b.dkl;
            a.kl += w * b.kl;
        }
        self.total += w * other.total;
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}

/// `½·Σ(x − x̂)²` for one image (the unit-variance Gaussian NLL up to a constant).
pub fn recon_nll<T: Real>(x: &[T], x_hat: &[T]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::dim("recon_nll", x.len(), x_hat.len()));
    }
    Ok(0.5
        * x.iter()
            .zip(x_hat)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>())
}

/// The constant `½·n·ln 2π` dropped from [`recon_nll`].
pub fn recon_nll_constant(n: usize) -> f64 {
    0.5 * n as f64 * LN_2PI
}

/// Closed-form `KL(q ‖ N(0, I))`, averaged over the rows of `q`.
pub fn kl_analytic<T: Real>(q: &GaussianParams<T>) -> f64 {
    let total: f64 = q
        .mean
        .iter()
        .zip(&q.log_var)
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    total / q.batch.max(1) as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KlTerms {
    pub mi: f64,
    pub tc: f64,
    pub dkl: f64,
}

/// Gradients of a weighted KL decomposition on the group's posterior
/// parameters and on its samples.
#[derive(Clone, Debug, PartialEq)]
pub struct KlGrads<T> {
    pub d_mean: Vec<T>,
    pub d_log_var: Vec<T>,
    pub d_z: Vec<T>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Minibatch-weighted-sampling estimates of MI, TC and dimension-wise KL for
/// a batch of posteriors `q` and one sample `z_i ~ q(·|x_i)` per row:
///
/// * `log q(z_i)        ≈ logsumexp_j log q(z_i|x_j) − log(M·N)`
/// * `log Π_k q(z_i,k)  ≈ Σ_k [logsumexp_j log q(z_i,k|x_j) − log(M·N)]`
///
/// with `M` the batch size and `N` = `n_data`. The three terms telescope, so
/// `mi + tc + dkl = mean_i[log q(z_i|x_i) − log p(z_i)]` for every batch.
pub fn decomposed_kl<T: Real>(q: &GaussianParams<T>, z: &[T], n_data: usize) -> Result<KlTerms> {
    decomposed_kl_impl(q, z, n_data, None).map(|(t, _)| t)
}

/// [`decomposed_kl`] plus the gradient of `alpha·mi + beta·tc + gamma·dkl`.
pub fn decomposed_kl_grad<T: Real>(
    q: &GaussianParams<T>,
    z: &[T],
    n_data: usize,
    weights: &ObjectiveWeights,
) -> Result<(KlTerms, KlGrads<T>)> {
    let (terms, grads) = decomposed_kl_impl(q, z, n_data, Some(weights))?;
    Ok((terms, grads.expect("gradients requested")))
}

fn decomposed_kl_impl<T: Real>(
    q: &GaussianParams<T>,
    z: &[T],
    n_data: usize,
    weights: Option<&ObjectiveWeights>,
) -> Result<(KlTerms, Option<KlGrads<T>>)> {
    let (m, d) = (q.batch, q.dim);
    if m < 2 {
        return Err(Error::Estimator(format!("batch size {m} < 2")));
    }
    if n_data == 0 {
        return Err(Error::Estimator("dataset size must be positive".into()));
    }
    if z.len() != m * d {
        return Err(Error::dim("decomposed_kl samples", m * d, z.len()));
    }
    let mean: Vec<f64> = q.mean.iter().map(|v| v.as_f64()).collect();
    let log_var: Vec<f64> = q.log_var.iter().map(|v| v.as_f64()).collect();
    let prec: Vec<f64> = log_var.iter().map(|&lv| (-lv).exp()).collect();
    let z: Vec<f64> = z.iter().map(|v| v.as_f64()).collect();
    let log_mn = ((m * n_data) as f64).ln();
    let inv_m = 1.0 / m as f64;

    // per-sample coefficients of log q(z|x), log q(z), log Π q(z_k), log p(z)
    let coeffs = weights.map(|w| {
        (
            w.alpha * inv_m,
            (w.beta - w.alpha) * inv_m,
            (w.gamma - w.beta) * inv_m,
            -w.gamma * inv_m,
        )
    });
    let mut grads = coeffs.map(|_| (vec![0.0; m * d], vec![0.0; m * d], vec![0.0; m * d]));

    let (mut sum_mi, mut sum_tc, mut sum_dkl) = (0.0, 0.0, 0.0);
    let mut a = vec![0.0; m * d];
    let mut row_sum = vec![0.0; m];
    let mut lse_k = vec![0.0; d];
    for i in 0..m {
        let zi = &z[i * d..(i + 1) * d];
        for j in 0..m {
            let mut s = 0.0;
            for k in 0..d {
                let jk = j * d + k;
                let diff = zi[k] - mean[jk];
                let v = -0.5 * (LN_2PI + log_var[jk] + diff * diff * prec[jk]);
                a[jk] = v;
                s += v;
            }
            row_sum[j] = s;
        }
        let lse_joint = log_sum_exp(row_sum.iter().copied());
        for (k, l) in lse_k.iter_mut().enumerate() {
            *l = log_sum_exp((0..m).map(|j| a[j * d + k]));
        }
        let log_qzx = row_sum[i];
        let log_qz = lse_joint - log_mn;
        let log_prod = lse_k.iter().fold(0.0, |acc, &l| acc + (l - log_mn));
        let log_p = zi.iter().fold(0.0, |acc, &v| acc - 0.5 * (LN_2PI + v * v));
        sum_mi += log_qzx - log_qz;
        sum_tc += log_qz - log_prod;
        sum_dkl += log_prod - log_p;

        if let (Some((c_qzx, c_qz, c_prod, c_p)), Some((d_mean, d_log_var, d_z))) =
            (coeffs, grads.as_mut())
        {
            for j in 0..m {
                let w_joint = (row_sum[j] - lse_joint).exp();
                for k in 0..d {
                    let jk = j * d + k;
                    let mut g = c_qz * w_joint + c_prod * (a[jk] - lse_k[k]).exp();
                    if j == i {
                        g += c_qzx;
                    }
                    let diff = zi[k] - mean[jk];
                    let r = diff * prec[jk];
                    d_z[i * d + k] -= g * r;
                    d_mean[jk] += g * r;
                    d_log_var[jk] += g * (0.5 * diff * r - 0.5);
                }
            }
            for k in 0..d {
                d_z[i * d + k] -= c_p * zi[k];
            }
        }
    }
    let terms = KlTerms {
        mi: sum_mi * inv_m,
        tc: sum_tc * inv_m,
        dkl: sum_dkl * inv_m,
    };
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
    let grads = grads.map(|(d_mean, d_log_var, d_z)| KlGrads {
        d_mean: cast(d_mean),
        d_log_var: cast(d_log_var),
        d_z: cast(d_z),
    });
    Ok((terms, grads))
}

/// Samples drawn from the three latent groups of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSamples<T> {
    pub zp1: Vec<T>,
    pub zp2: Vec<T>,
    pub zs: Vec<T>,
}

/// Everything the objective reads for one batch of view pairs.
pub struct ElboInputs<'a, T> {
    pub x: [&'a Tensor<T>; 2],
    pub x_hat: [&'a Tensor<T>; 2],
    pub posterior: &'a LatentPosterior<T>,
    pub samples: &'a LatentSamples<T>,
}

/// Gradients of the negative ELBO on reconstructions, posterior parameters
/// and samples.
#[derive(Clone, Debug)]
pub struct ElboGrads<T> {
    pub d_x_hat: [Tensor<T>; 2],
    pub p1: KlGrads<T>,
    pub p2: KlGrads<T>,
    pub s: KlGrads<T>,
}

/// Negative ELBO of a batch of pairs:
/// `Σ_views [recon_i + w·terms(p_i)] + n_s·w·terms(s)` where `w·terms` is
/// `alpha·mi + beta·tc + gamma·dkl` and `n_s` is 2 when the shared penalty is
/// counted per view, 1 otherwise. Reconstruction and KL terms are batch means.
pub fn elbo_loss<T: Real>(
    inputs: &ElboInputs<'_, T>,
    cfg: &ObjectiveConfig,
    n_data: usize,
) -> Result<(LossBreakdown, ElboGrads<T>)> {
    cfg.weights.validate()?;
    let post = inputs.posterior;
    let batch = post.zp1.batch;
    let mut recon = [0.0; 2];
    let mut d_x_hat = Vec::with_capacity(2);
    let inv_b = T::of(1.0 / batch as f64);
    for v in 0..2 {
        let (x, xh) = (inputs.x[v], inputs.x_hat[v]);
        if x.shape() != xh.shape() || x.dim(0) != batch {
            return Err(Error::dim(
                format!("reconstruction of view {}", v + 1),
                format!("{:?}", x.shape()),
                format!("{:?}", xh.shape()),
            ));
        }
        let per = x.len() / batch;
        let mut total = 0.0;
        for b in 0..batch {
            total += recon_nll(
                &x.data()[b * per..(b + 1) * per],
                &xh.data()[b * per..(b + 1) * per],
            )?;
        }
        recon[v] = total / batch as f64;
        let g: Vec<T> = xh
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| (a - b) * inv_b)
            .collect();
        d_x_hat.push(Tensor::from_vec(xh.shape(), g)?);
    }
    let w = &cfg.weights;
    let shared_w = ObjectiveWeights {
        alpha: w.alpha * cfg.shared_multiplicity(),
        beta: w.beta * cfg.shared_multiplicity(),
        gamma: w.gamma * cfg.shared_multiplicity(),
    };
    let s = inputs.samples;
    let (t1, g1) = decomposed_kl_grad(&post.zp1, &s.zp1, n_data, w)?;
    let (t2, g2) = decomposed_kl_grad(&post.zp2, &s.zp2, n_data, w)?;
    let (ts, gs) = decomposed_kl_grad(&post.zs, &s.zs, n_data, &shared_w)?;
    let group = |t: KlTerms, q: &GaussianParams<T>| GroupTerms {
        mi: t.mi,
        tc: t.tc,
        dkl: t.dkl,
        kl: kl_analytic(q),
    };
    let (p1, p2, sh) = (
        group(t1, &post.zp1),
        group(t2, &post.zp2),
        group(ts, &post.zs),
    );
    let total = (recon[0] + w.penalty(&p1))
        + (recon[1] + w.penalty(&p2))
        + cfg.shared_multiplicity() * w.penalty(&sh);
    let breakdown = LossBreakdown {
        recon,
        recon_const: recon_nll_constant(inputs.x[0].len() / batch.max(1)),
        p1,
        p2,
        s: sh,
        total,
    };
    check_finite(&breakdown)?;
    let [d1, d2]: [Tensor<T>; 2] = d_x_hat.try_into().expect("two views");
    Ok((
        breakdown,
        ElboGrads {
            d_x_hat: [d1, d2],
            p1: g1,
            p2: g2,
            s: gs,
        },
    ))
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    let named = [
        ("recon_1", b.recon[0]),
        ("recon_2", b.recon[1]),
        ("mi_p1", b.p1.mi),
        ("tc_p1", b.p1.tc),
        ("dkl_p1", b.p1.dkl),
        ("mi_p2", b.p2.mi),
        ("tc_p2", b.p2.tc),
        ("dkl_p2", b.p2.dkl),
        ("mi_s", b.s.mi),
        ("tc_s", b.s.tc),
        ("dkl_s", b.s.dkl),
        ("total", b.total),
    ];
    match named.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite(format!("loss component {name}"))),
        None => Ok(()),
    }
}
