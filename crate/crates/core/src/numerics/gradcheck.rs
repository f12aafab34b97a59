use super::{Scalar, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Worst coordinate found by [`grad_check_detailed`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the largest
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` builds the function on a fresh tape from one leaf per input tensor.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_detailed(f, inputs, eps, None).map(|r| r.max_rel_error)
}

/// As [`grad_check`], optionally restricted to a subset of coordinates per
/// input (`coords[i]` lists the flat indices checked in input `i`).
pub fn grad_check_detailed<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    coords: Option<&[Vec<usize>]>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    contract!(eps > 0.0, "finite-difference step must be positive, got {eps}");
    if let Some(c) = coords {
        contract!(c.len() == inputs.len(), "coordinate lists do not match inputs");
    }
    let eval = |point: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape
            .value(out)
            .item()
            .ok_or_else(|| Error::Contract("grad_check function is not scalar".into()))?
            .as_f64();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check function returned {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape
        .value(out)
        .item()
        .ok_or_else(|| Error::Contract("grad_check function is not scalar".into()))?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("grad_check function returned {base}")));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut point = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, var);
        let all: Vec<usize>;
        let indices = match coords {
            Some(c) => &c[i],
            None => {
                all = (0..inputs[i].len()).collect();
                &all
            }
        };
        for &j in indices {
            contract!(j < inputs[i].len(), "coordinate {j} out of range for input {i}");
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = T::of_f64(orig.as_f64() + eps);
            let up = eval(&point)?;
            point[i].data_mut()[j] = T::of_f64(orig.as_f64() - eps);
            let down = eval(&point)?;
            point[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j].as_f64();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
