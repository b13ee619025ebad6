use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` builds the scalar objective on a fresh graph. Up to `per_param`
/// coordinates of every parameter are sampled (all of them when the tensor
/// is small enough). The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f64, per_param: usize, seed: u64) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s>) -> Var,
{
    grad_check_steps(store, f, &[eps], per_param, seed)
}

/// Like [`grad_check`], but each coordinate is differenced at every step in
/// `steps` (largest first). The numeric estimate is taken from the adjacent
/// pair of steps whose estimates agree most closely once the round-off bound
/// `eps_mach * |f| / h` of the smaller step is added, using the smaller step
/// of that pair. Large steps suit smooth coordinates with tiny gradients,
/// where round-off swamps small steps; small steps suit coordinates sitting
/// near a ReLU kink. The choice never looks at the analytic gradient.
pub fn grad_check_steps<F>(store: &mut ParamStore, f: F, steps: &[f64], per_param: usize, seed: u64) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s>) -> Var,
{
    assert!(!steps.is_empty(), "at least one finite-difference step");
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::with_params(store);
        let out = f(&mut g);
        g.value(out).data()[0]
    };

    let analytic: Vec<(usize, Vec<f64>)> = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g);
        let grads = g.backward(out);
        store
            .ids()
            .map(|id| {
                let n = store.value(id).numel();
                (id.0, grads.param(id).map_or(vec![0.0; n], <[f64]>::to_vec))
            })
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let grad = &analytic[id.0].1;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: format!("gradient of {name}") });
        }
        let n = grad.len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_param).into_vec()
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            let mut estimates = Vec::with_capacity(steps.len());
            for &eps in steps {
                store.value_mut(id).data_mut()[i] = orig + eps;
                let up = eval(store);
                store.value_mut(id).data_mut()[i] = orig - eps;
                let down = eval(store);
                store.value_mut(id).data_mut()[i] = orig;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::NonFinite { what: format!("objective while perturbing {name}[{i}]") });
                }
                estimates.push(((up - down) / (2.0 * eps), f64::EPSILON * up.abs().max(down.abs()) / eps));
            }
            let numeric = most_stable(&estimates);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// `estimates` holds `(derivative, round-off bound)` per step, largest step
/// first.
fn most_stable(estimates: &[(f64, f64)]) -> f64 {
    if estimates.len() == 1 {
        return estimates[0].0;
    }
    let score = |w: &[(f64, f64)]| (w[0].0 - w[1].0).abs() + w[1].1;
    let best = estimates
        .windows(2)
        .enumerate()
        .min_by(|(_, a), (_, b)| score(a).total_cmp(&score(b)))
        .map(|(k, _)| k)
        .unwrap();
    estimates[best + 1].0
}
