//! Central finite-difference check of reverse-mode gradients.

use serde::Serialize;

use super::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of the scalar function `f` at `point` against
/// `(f(x + h e) - f(x - h e)) / 2h` for every coordinate.
///
/// The relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(op_name: &str, f: F, point: &Matrix, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite difference step must be > 0, got {step}")));
    }

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: Matrix| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x).map_err(|e| Error::Evaluation(e.to_string()))?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("{op_name} returned {v}")));
        }
        Ok(v)
    };

    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }

    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max);

    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_relative_error,
        tolerance,
        passed: max_relative_error <= tolerance,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;

    #[test]
    fn sum_of_squares() {
        let point = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let report = finite_diff_check(
            "sum_sq",
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &point,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.analytic, vec![2.0, 4.0]);
        assert!(report.max_relative_error < 1e-6);
        assert!(report.passed);
    }

    #[test]
    fn constant_function_passes() {
        let point = Matrix::from_rows(&[[0.3, -0.7, 1.1]]).unwrap();
        let report = finite_diff_check(
            "const",
            |t, x| {
                let z = t.scale(x, 0.0)?;
                let s = t.sum(z)?;
                t.add_scalar(s, 5.0)
            },
            &point,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.analytic.iter().all(|&g| g == 0.0));
        assert!(report.numeric.iter().all(|&g| g == 0.0));
        assert!(report.passed);
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // y = sum(x^2) with a backward rule that forgets the factor 2
        let point = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let report = finite_diff_check(
            "broken_square",
            |t, x| {
                let v = t.value(x).map(|a| a * a);
                let sq = t.custom(
                    &[x],
                    v,
                    Rc::new(|g, inputs, _| vec![g.zip_map(inputs[0], |g, x| g * x).unwrap()]),
                )?;
                t.sum(sq)
            },
            &point,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_relative_error > 0.4);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let point = Matrix::scalar(1.0);
        assert!(finite_diff_check("id", |t, x| t.sum(x), &point, 0.0, 1e-6).is_err());
    }

    #[test]
    fn non_finite_perturbation_is_an_evaluation_error() {
        // 1/(1+x) hits its pole at x - h = -1
        let point = Matrix::scalar(-0.5);
        let err = finite_diff_check(
            "pole",
            |t, x| {
                let y = t.student_t(x)?;
                t.sum(y)
            },
            &point,
            0.5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)), "{err:?}");
    }
}
