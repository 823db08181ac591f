//! Central finite-difference verification of backward rules. Only meaningful
//! at 64-bit precision; 32-bit rounding swamps the O(eps^2) truncation term.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

/// Compare analytic gradients against central differences for every stored
/// parameter. `build` must construct the same graph from the current
/// parameter values on every call and return the scalar loss root. Returns
/// the max over parameter elements of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
pub fn grad_check<F>(params: &mut ParamStore<f64>, epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig {
            detail: format!("grad_check epsilon must be in [1e-7, 1e-3], got {epsilon:e}"),
        });
    }

    params.clear_grads();
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(params);
        let root = build(&mut g)?;
        g.backward(root, 1.0)?;
        let ids: Vec<_> = params.ids().collect();
        ids.iter()
            .map(|&id| {
                params
                    .get(id)
                    .map(|t| t.grad().map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            })
            .collect::<Result<_>>()?
    };
    params.clear_grads();

    let eval = |params: &mut ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(params);
        let root = build(&mut g)?;
        Ok(g.value(root).data()[0])
    };

    let mut max_rel = 0.0f64;
    let ids: Vec<_> = params.ids().collect();
    for (pi, &id) in ids.iter().enumerate() {
        for i in 0..params.get(id)?.len() {
            let orig = params.get(id)?.data()[i];
            params.get_mut(id)?.data_mut()[i] = orig + epsilon;
            let up = eval(params)?;
            params.get_mut(id)?.data_mut()[i] = orig - epsilon;
            let down = eval(params)?;
            params.get_mut(id)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
