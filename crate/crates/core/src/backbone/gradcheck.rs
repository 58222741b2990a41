use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::{Error, Result};

/// Two central differences (steps `ε` and `ε/2`) must agree to this relative
/// error before either is trusted as the reference gradient.
pub const SMOOTHNESS_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and finite-difference values at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Sampled coordinates where the two step sizes disagree: the objective
    /// is not smooth there at scale `ε` (a relu kink inside the stencil) or
    /// the gradient is below finite-difference resolution.
    pub skipped: usize,
    /// Parameters for which no smooth coordinate was found.
    pub unchecked_params: Vec<String>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `loss` must evaluate the scalar objective at the store's current values
/// and accumulate its gradient into the (pre-zeroed) gradient buffers. Up to
/// `coords_per_param` coordinates of every parameter tensor are compared;
/// candidates are drawn with `seed`. Each candidate is differenced with steps
/// `ε` and `ε/2` (four loss evaluations) and compared against the analytic
/// gradient only when the two differences agree to [`SMOOTHNESS_TOL`];
/// otherwise it is skipped and another is drawn, up to four candidates per
/// requested coordinate. The skip decision never looks at the analytic
/// gradient.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    epsilon: f64,
    coords_per_param: usize,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<f64>,
{
    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        store.zero_grad();
        let v = loss(store)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        Ok(v)
    };
    eval(store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
        skipped: 0,
        unchecked_params: Vec::new(),
    };
    let n_params = store.len();
    for pi in 0..n_params {
        let len = store.iter().nth(pi).map(|p| p.value.len()).unwrap_or(0);
        let picks = sample(&mut rng, len, (4 * coords_per_param).min(len));
        let mut done = 0;
        for idx in picks.iter() {
            if done == coords_per_param {
                break;
            }
            let original = value_at(store, pi, idx);
            let mut central = |h: f64| -> Result<f64> {
                set_value(store, pi, idx, original + h);
                let plus = eval(store)?;
                set_value(store, pi, idx, original - h);
                let minus = eval(store)?;
                set_value(store, pi, idx, original);
                Ok((plus - minus) / (2.0 * h))
            };
            let coarse = central(epsilon)?;
            let fine = central(epsilon / 2.0)?;
            if relative_error(coarse, fine) > SMOOTHNESS_TOL {
                report.skipped += 1;
                continue;
            }
            let ad = analytic[pi][idx];
            let rel = relative_error(ad, fine);
            report.checked += 1;
            done += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                let name = store
                    .iter()
                    .nth(pi)
                    .map(|p| p.name.clone())
                    .unwrap_or_default();
                report.worst = Some((name, idx));
                report.worst_values = (ad, fine);
            }
        }
        if done == 0 && len > 0 {
            let name = store
                .iter()
                .nth(pi)
                .map(|p| p.name.clone())
                .unwrap_or_default();
            report.unchecked_params.push(name);
        }
    }
    store.zero_grad();
    Ok(report)
}

fn value_at(store: &ParamStore<f64>, pi: usize, idx: usize) -> f64 {
    store.iter().nth(pi).expect("param index").value.data()[idx]
}

fn set_value(store: &mut ParamStore<f64>, pi: usize, idx: usize, v: f64) {
    store
        .iter_mut()
        .nth(pi)
        .expect("param index")
        .value
        .data_mut()[idx] = v;
}
