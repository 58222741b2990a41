//! Self-check suite: closed-form references for the numerical kernels, a
//! finite-difference check of the full objective and a statistical check
//! of the KL decomposition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::backbone::{grad_check, Tensor};
use crate::error::Result;
use crate::features::hz_to_mel;
use crate::model::{poe_fuse, GaussianParams, LatentNoise, ModelConfig, MultiViewVae};
use crate::objective::{decomposed_kl, kl_analytic, ObjectiveConfig, ObjectiveWeights};
use crate::synthesis::{quantize_frequency, uniform_bin_edges};
use crate::training::negative_elbo;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Check {
        Check {
            name,
            passed,
            detail,
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn kernel_references() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let kl = |mu: f64, var: f64| {
        kl_analytic(&GaussianParams::single(vec![mu], vec![var.ln()]).expect("1-d"))
    };
    let cases = [
        (0.0, 1.0, 0.0),
        (1.0, 1.0, 0.5),
        (0.0, 4.0, 1.5 - 2f64.ln()),
        (2.0, 0.25, 2.0 + 0.5 * 0.25 - 0.5 + 4f64.ln() / 2.0),
    ];
    let worst = cases
        .iter()
        .map(|&(m, v, r)| (kl(m, v) - r).abs())
        .fold(0.0, f64::max);
    out.push(Check::new(
        "analytic KL closed forms",
        worst <= 1e-9,
        format!("max error {worst:.2e}"),
    ));

    let one = GaussianParams::<f64>::single(vec![2.0, -3.0], vec![0.0, 3f64.ln()])?;
    let f = poe_fuse(&[&one], true)?;
    let ok = close(f.mean[0], 1.0, 1e-12)
        && close(f.log_var[0], -(2f64.ln()), 1e-12)
        && close(f.mean[1], -0.75, 1e-12)
        && close(f.log_var[1], 0.75f64.ln(), 1e-12);
    out.push(Check::new(
        "single expert plus prior",
        ok,
        format!(
            "mean {:?} var {:?}",
            f.mean,
            f.log_var.iter().map(|l| l.exp()).collect::<Vec<_>>()
        ),
    ));
    let a = GaussianParams::<f64>::single(vec![1.0], vec![0.0])?;
    let b = GaussianParams::single(vec![3.0], vec![0.0])?;
    let f = poe_fuse(&[&a, &b], true)?;
    let ok = close(f.mean[0], 4.0 / 3.0, 1e-12) && close(f.log_var[0], -(3f64.ln()), 1e-12);
    out.push(Check::new(
        "two experts plus prior",
        ok,
        format!("mean {} var {}", f.mean[0], f.log_var[0].exp()),
    ));
    let sym = GaussianParams::<f64>::single(vec![2.0, -2.0], vec![0.5, 0.5])?;
    let neg = GaussianParams::single(vec![-2.0, 2.0], vec![0.5, 0.5])?;
    let f = poe_fuse(&[&sym, &neg], false)?;
    let ok = f.mean.iter().all(|m| m.abs() <= 1e-12) && close(f.log_var[0], 0.5 - 2f64.ln(), 1e-12);
    out.push(Check::new(
        "symmetric experts cancel",
        ok,
        format!("mean {:?}", f.mean),
    ));

    let mel = hz_to_mel(700.0);
    out.push(Check::new(
        "mel(700 Hz)",
        close(mel, 781.17, 0.01),
        format!("{mel:.4}"),
    ));

    let edges = uniform_bin_edges(220.0, 2200.0, 21);
    let q = |f: f64| quantize_frequency(f, &edges).ok();
    let ok = q(220.0) == Some(0)
        && q(2200.0) == Some(20)
        && q(edges[1]) == Some(1)
        && q(edges[1] - 1e-9) == Some(0)
        && q(219.9).is_none()
        && q(2200.1).is_none();
    out.push(Check::new(
        "frequency bin boundaries",
        ok,
        format!("edge[1] = {:.4}", edges[1]),
    ));
    Ok(out)
}

/// Finite-difference check of the full negative ELBO on a two-pair batch in
/// double precision with the default architecture.
pub fn objective_gradient(seed: u64) -> Result<Check> {
    let cfg = ModelConfig::default();
    let (model, mut store) = MultiViewVae::new::<f64>(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(0.0, 1.0).expect("valid range");
    let side = cfg.input_size;
    let mut img = || {
        Tensor::from_vec(
            &[2, 1, side, side],
            (0..2 * side * side).map(|_| u.sample(&mut rng)).collect(),
        )
    };
    let (x1, x2) = (img()?, img()?);
    let noise = LatentNoise::<f64>::sample(2, &cfg, &mut rng);
    let objective = ObjectiveConfig {
        weights: ObjectiveWeights {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.1,
        },
        shared_kl_per_view: true,
    };
    let report = grad_check(&mut store, 3e-5, 4, seed, |s| {
        negative_elbo(&model, s, [&x1, &x2], &noise, &objective, 1000).map(|l| l.total)
    })?;
    Ok(Check::new(
        "objective gradient vs finite differences",
        report.max_rel_error <= 1e-4 && report.unchecked_params.is_empty(),
        format!(
            "max relative error {:.2e} over {} coordinates, {} non-smooth skipped, unchecked {:?}",
            report.max_rel_error, report.checked, report.skipped, report.unchecked_params
        ),
    ))
}

/// Mean of the three decomposed terms against the analytic KL over repeated
/// reparameterized draws, at batch size = dataset size.
pub fn decomposition_identity(seed: u64, m: usize, dim: usize, repeats: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mean: Vec<f64> = (0..m * dim).map(|_| normal()).collect();
    let log_var: Vec<f64> = (0..m * dim).map(|_| 0.5 * normal() - 0.5).collect();
    let q = GaussianParams::new(m, dim, mean, log_var)?;
    let target = kl_analytic(&q);
    let mut sums = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let z: Vec<f64> = (0..m * dim)
            .map(|i| q.mean[i] + (0.5 * q.log_var[i]).exp() * normal())
            .collect();
        let t = decomposed_kl(&q, &z, m)?;
        sums.push(t.mi + t.tc + t.dkl);
    }
    let r = repeats as f64;
    let avg = sums.iter().sum::<f64>() / r;
    let se = (sums.iter().map(|s| (s - avg).powi(2)).sum::<f64>() / (r - 1.0)).sqrt() / r.sqrt();
    let dev = (avg - target).abs();
    Ok(Check::new(
        "KL decomposition sums to analytic KL",
        dev <= 3.0 * se,
        format!("mean {avg:.5} vs {target:.5}, |diff| = {:.2} SE", dev / se),
    ))
}

pub fn single_dimension_tc(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for m in [2, 7, 64] {
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let mean: Vec<f64> = (0..m).map(|_| normal()).collect();
        let lv: Vec<f64> = (0..m).map(|_| normal()).collect();
        let z: Vec<f64> = (0..m).map(|_| normal()).collect();
        let q = GaussianParams::new(m, 1, mean, lv)?;
        worst = worst.max(decomposed_kl(&q, &z, 100)?.tc.abs());
    }
    Ok(Check::new(
        "total correlation of a 1-d latent",
        worst == 0.0,
        format!("max |tc| {worst:e}"),
    ))
}

/// Every check, in a fixed order.
pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = kernel_references()?;
    checks.push(single_dimension_tc(5)?);
    checks.push(decomposition_identity(7, 256, 4, 100)?);
    checks.push(objective_gradient(1)?);
    Ok(checks)
}
