use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for relative errors; gradients smaller than this are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// finite differences on `probe_size` randomly chosen scalar parameters.
///
/// `loss_fn` evaluates the loss (and its gradient) at the given parameters.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &ParamStore,
    probe_size: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (loss, grads) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    let total = params.num_scalars();
    if total == 0 {
        return Err(Error::InvalidArgument("no parameters to probe".into()));
    }
    let ids: Vec<(ParamId, usize)> = params.iter().map(|(id, _, m)| (id, m.len())).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(probe_size);
    let mut perturbed = params.clone();
    for _ in 0..probe_size {
        let mut k = rng.gen_range(0..total);
        let (id, len) = ids
            .iter()
            .copied()
            .find(|&(_, len)| {
                if k < len {
                    true
                } else {
                    k -= len;
                    false
                }
            })
            .expect("index within total");
        debug_assert!(k < len);
        let cols = params.get(id).ncols();
        let (row, col) = (k / cols, k % cols);
        let original = params.get(id)[[row, col]];

        perturbed.get_mut(id)[[row, col]] = original + epsilon;
        let (plus, _) = loss_fn(&perturbed)?;
        perturbed.get_mut(id)[[row, col]] = original - epsilon;
        let (minus, _) = loss_fn(&perturbed)?;
        perturbed.get_mut(id)[[row, col]] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at probe {}[{row},{col}]", params.name(id))));
        }

        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.get(id)[[row, col]];
        let rel_error =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        probes.push(Probe {
            name: params.name(id).to_string(),
            row,
            col,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Graph, Matrix};
    use ndarray::array;

    #[test]
    fn quadratic_single_parameter() {
        let mut store = ParamStore::new();
        store.add("w", array![[1.7]]);
        let loss = |s: &ParamStore| {
            let id = s.id("w").unwrap();
            let mut g = Graph::new();
            let w = g.param(s, id);
            let sq = g.mul(w, w);
            let three = g.constant(Matrix::from_elem((1, 1), 3.0));
            let lin = g.mul(w, three);
            let l = g.add(sq, lin);
            let value = g.scalar(l);
            Ok((value, g.backward(l)?.gradients(s)))
        };
        let report = grad_check(loss, &store, 1, 1e-4, 0).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert!((report.probes[0].analytic - (2.0 * 1.7 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", array![[1.0]]);
        let loss = |s: &ParamStore| Ok((f64::NAN, Gradients::zeros_like(s)));
        assert!(matches!(grad_check(loss, &store, 1, 1e-4, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.add("w", array![[2.0]]);
        let loss = |s: &ParamStore| {
            let w = s.get(s.id("w").unwrap())[[0, 0]];
            Ok((w * w, Gradients::from_tensors(vec![array![[w]]])))
        };
        let report = grad_check(loss, &store, 1, 1e-5, 0).unwrap();
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }
}
