//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward rules it verifies.

use crate::{Graph, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both are negligible.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks `f` (which must return a scalar) with respect to each input.
/// Returns one relative error per input.
pub fn check_inputs<Fun>(inputs: &[Tensor<f64>], h: f64, f: Fun) -> Result<Vec<f64>>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Checks a model loss with respect to the listed parameters. Returns one
/// relative error per parameter.
pub fn check_params<Fun>(
    params: &ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    f: Fun,
) -> Result<Vec<f64>>
where
    Fun: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new(params, true);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut probe = params.clone();
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(p, false);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };

    let mut errors = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = params.get(id).numel();
        let analytic: Vec<f64> = match grads.get(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}
