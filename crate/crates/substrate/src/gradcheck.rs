//! Central finite differences against reverse-mode gradients (64-bit only).

use crate::{Error, Graph, ParamId, ParamStore, Result, Rng, Tensor, Var};

/// Magnitude below which the absolute error is reported instead of the relative one.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_error: f64,
    pub coords: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.per_param.iter().find(|p| p.name == name)
    }

    /// Largest error among parameters whose name starts with `prefix`.
    pub fn max_for_prefix(&self, prefix: &str) -> Option<f64> {
        self.per_param.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.max_error).reduce(f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// Compare `analytic` gradients with central differences of `f`.
///
/// Only parameters listed in `analytic` are checked. `max_coords` caps the
/// number of coordinates per parameter (evenly spaced) to bound cost.
pub fn finite_difference_check(
    store: &ParamStore<f64>,
    analytic: &[(ParamId, Tensor<f64>)],
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut overall: f64 = 0.0;
    for (id, grad) in analytic {
        let n = work.get(*id).len();
        let stride = match max_coords {
            Some(cap) if cap < n => n.div_ceil(cap),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        let mut coords = 0;
        for i in (0..n).step_by(stride) {
            let orig = work.get(*id).data()[i];
            work.get_mut(*id).data_mut()[i] = orig + eps;
            let plus = f(&work);
            work.get_mut(*id).data_mut()[i] = orig - eps;
            let minus = f(&work);
            work.get_mut(*id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteValue);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            coords += 1;
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck { name: work.name(*id).to_string(), max_error: worst, coords });
    }
    Ok(GradCheckReport { max_error: overall, per_param })
}

/// Adds Gaussian noise of standard deviation `std` to every parameter.
///
/// Freshly initialized transformers have near-uniform attention and
/// gradients close to the finite-difference noise floor; checking at a
/// perturbed point exercises every op with well-resolved derivatives.
pub fn perturb(store: &mut ParamStore<f64>, std: f64, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.normal::<f64>(std);
        }
    }
}

/// Build the loss on a tape, differentiate it, and check every parameter.
pub fn check_loss(
    store: &ParamStore<f64>,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let root = loss(&mut g, store);
    let grads = g.backward(root)?.into_params();
    finite_difference_check(
        store,
        &grads,
        |s| {
            let mut g = Graph::new();
            let root = loss(&mut g, s);
            g.value(root).item()
        },
        eps,
        max_coords,
    )
}
