use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EngineError, ParamStore, Tape, Var};

/// Denominator floor for the relative error: coordinates whose gradients are
/// both below this magnitude are effectively compared in absolute terms.
pub const GRAD_CHECK_DENOM_FLOOR: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name, flat index, analytic and numeric gradient of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares backward gradients of `f` against central finite differences.
///
/// `f` builds a scalar loss from the parameters in `store`; it must be
/// deterministic. At most `max_coords` coordinates are checked, sampled with
/// `seed` when the store holds more.
pub fn grad_check<F>(
    store: &mut ParamStore,
    eps: f32,
    max_coords: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport, EngineError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, EngineError>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward_into(loss, store)?;

    let mut coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_string(), i)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, coords.len(), max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i].clone()).collect();
    }

    let eval = |store: &ParamStore| -> Result<f64, EngineError> {
        let mut tape = Tape::inference();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).item() as f64)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: coords.len(),
        worst: None,
    };
    for (name, i) in coords {
        let analytic = store.get(&name)?.grad.data()[i] as f64;
        let original = store.get(&name)?.value.data()[i];
        store.get_mut(&name)?.value.data_mut()[i] = original + eps;
        let plus = eval(store)?;
        store.get_mut(&name)?.value.data_mut()[i] = original - eps;
        let minus = eval(store)?;
        store.get_mut(&name)?.value.data_mut()[i] = original;
        // The perturbed values are what f actually saw; use their true spacing.
        let h = ((original + eps) as f64) - ((original - eps) as f64);
        let numeric = (plus - minus) / h;
        let denom = analytic
            .abs()
            .max(numeric.abs())
            .max(GRAD_CHECK_DENOM_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name, i, analytic, numeric));
        }
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(3.0)).unwrap();
        let report = grad_check(&mut store, 1e-3, 200, 0, |tape, s| {
            let w = tape.param(s, "w")?;
            tape.mul(w, w)
        })
        .unwrap();
        let (_, _, analytic, numeric) = report.worst.unwrap();
        assert!((analytic - 6.0).abs() < 1e-6);
        assert!((numeric - 6.0).abs() < 1e-3);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::row_vector(vec![1.0, 2.0]))
            .unwrap();
        let report = grad_check(&mut store, 1e-3, 200, 0, |tape, s| {
            let _w = tape.param(s, "w")?;
            Ok(tape.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        let (_, _, analytic, numeric) = report.worst.unwrap();
        assert_eq!(analytic, 0.0);
        assert_eq!(numeric, 0.0);
        assert_eq!(report.max_rel_error, 0.0);
    }
}
