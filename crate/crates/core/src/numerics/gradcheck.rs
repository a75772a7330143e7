//! Central finite-difference gradient verification.
//!
//! This path only ever evaluates forward losses, so it is independent of the
//! backward rules it is used to check.

use super::{NumericsError, ParameterStore};

/// Per-parameter comparison of analytic vs numeric gradients.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl BlockCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a| + |n|, 1e-3)`: relative for O(1)+ gradients, absolute
/// near zero so finite-difference noise on vanishing entries does not flag.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3)
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every scalar in every
/// parameter, compared against the gradients already accumulated in the
/// store. `loss_fn` must be a pure function of the store contents.
pub fn finite_difference_grad<F>(
    store: &mut ParameterStore,
    mut loss_fn: F,
    h: f64,
) -> Result<Vec<BlockCheck>, NumericsError>
where
    F: FnMut(&ParameterStore) -> Result<f64, NumericsError>,
{
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.get(id).name.clone();
        let analytic = store
            .get(id)
            .value
            .grad
            .clone()
            .ok_or_else(|| NumericsError::MissingGradients {
                names: vec![name.clone()],
            })?;
        let n = store.get(id).value.data.len();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..n {
            let orig = store.get(id).value.data[i];
            store.get_mut(id).value.data[i] = orig + h;
            let up = loss_fn(store)?;
            store.get_mut(id).value.data[i] = orig - h;
            let down = loss_fn(store)?;
            store.get_mut(id).value.data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_rel = max_rel.max(relative_error(analytic[i], numeric));
            max_abs = max_abs.max((analytic[i] - numeric).abs());
        }
        checks.push(BlockCheck {
            name,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(checks)
}
