//! Finite-difference verification of tape gradients.
//!
//! Callers supply a closure that rebuilds the graph from parameter values on a
//! fresh tape and returns the scalar loss. Gradients are compared against
//! central differences in f64.

use super::{Elem, Tape, TensorError, TensorId};

/// Worst relative error over all checked coordinates.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with an absolute floor: coordinates where both values are
/// below `1e-6` in magnitude compare as exact.
fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-6 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Checks d(loss)/d(params) by central differences with step `h`.
///
/// `build` receives a fresh tape plus the current parameter values and must
/// return (loss id, ids of the parameter leaves in the same order).
pub fn grad_check<F>(
    params: &[Vec<f64>],
    h: f64,
    mut build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape<f64>, &[Vec<f64>]) -> Result<(TensorId, Vec<TensorId>), TensorError>,
{
    let eval = |build: &mut F, params: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, params)?;
        Ok(tape.data(loss)[0])
    };

    let mut tape = Tape::new();
    let (loss, ids) = build(&mut tape, params)?;
    assert_eq!(ids.len(), params.len(), "build returned wrong param count");
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            grads
                .get(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let orig = work[pi][ci];
            work[pi][ci] = orig + h;
            let up = eval(&mut build, &work)?;
            work[pi][ci] = orig - h;
            let down = eval(&mut build, &work)?;
            work[pi][ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][ci];
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: e,
                    worst_param: pi,
                    worst_coord: ci,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Converts elementwise values to f64 vectors for [`grad_check`] seeds.
pub fn to_f64<E: Elem>(v: &[E]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}
