use super::tensor::ParamStore;
use crate::{Error, Result};

/// Central-difference gradient oracle: (f(p+eps) - f(p-eps)) / (2 eps) per
/// scalar parameter in the store, in store order. Never touches the tape.
///
/// `f` must be deterministic; parameters are restored exactly after probing.
pub fn finite_difference_gradient(
    store: &mut ParamStore,
    eps: f64,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> Result<Vec<Vec<f64>>> {
    if eps <= 0.0 {
        return Err(Error::Contract("finite differences require eps > 0".into()));
    }
    let mut out = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + eps;
            let plus = f(store);
            store.get_mut(id).data[i] = orig - eps;
            let minus = f(store);
            store.get_mut(id).data[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective while probing {} [{i}]: f+={plus}, f-={minus}",
                    store.name(id)
                )));
            }
            grad[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Max relative error between analytic gradients (already in the store) and a
/// finite-difference estimate, skipping entries where both magnitudes are
/// below `floor`.
pub fn max_relative_grad_error(store: &ParamStore, numeric: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst = 0.0_f64;
    for (id, num) in store.ids().zip(numeric) {
        let ana = store
            .get(id)
            .grad
            .as_deref()
            .expect("analytic gradients must be populated");
        for (&a, &n) in ana.iter().zip(num) {
            if a.abs() < floor && n.abs() < floor {
                continue;
            }
            let rel = (a - n).abs() / a.abs().max(n.abs());
            worst = worst.max(rel);
        }
    }
    worst
}
