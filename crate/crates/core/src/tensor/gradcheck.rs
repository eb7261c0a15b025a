use rayon::prelude::*;

use super::{ParamId, Tape, Tensor, TensorError, Var};

/// `(parameter tensor, element)` index of one scalar.
type Coord = (usize, usize);

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter position, flat index)` of the worst scalar.
    pub worst: (usize, usize),
    pub scalars_checked: usize,
}

/// Maximum relative error between reverse-mode gradients and central
/// differences over every scalar of `params`.
///
/// `loss_fn` builds the loss on the given tape from one leaf per parameter
/// and must be deterministic.
pub fn finite_diff_check<F, E>(loss_fn: F, params: &[Tensor], step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E> + Sync,
    E: From<TensorError> + Send,
{
    finite_diff_report(loss_fn, params, step).map(|r| r.max_rel_error)
}

pub fn finite_diff_report<F, E>(
    loss_fn: F,
    params: &[Tensor],
    step: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E> + Sync,
    E: From<TensorError> + Send,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(TensorError::InvalidStep(step).into());
    }
    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone().with_grad()))
            .collect();
        let out = loss_fn(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(ParamId(i), p.clone().with_grad()))
        .collect();
    let out = loss_fn(&mut tape, &vars)?;
    let first = tape.scalar(out);
    let analytic = tape.backward(out).map_err(E::from)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Determinism { first, second }.into());
    }

    let coords: Vec<Coord> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    let errors: Vec<Result<(f64, Coord), E>> = coords
        .par_iter()
        .map(|&(i, j)| {
            let shifted = |delta: f64| -> Result<f64, E> {
                let mut ps = params.to_vec();
                let mut data = ps[i].data().to_vec();
                data[j] += delta;
                ps[i] = ps[i].with_data(data).map_err(E::from)?;
                eval(&ps)
            };
            let central = (shifted(step)? - shifted(-step)?) / (2.0 * step);
            let a = analytic[&ParamId(i)].data()[j];
            Ok(((a - central).abs() / (central.abs() + 1e-12), (i, j)))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        scalars_checked: coords.len(),
    };
    for e in errors {
        let (err, at) = e?;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = at;
        }
    }
    Ok(report)
}
