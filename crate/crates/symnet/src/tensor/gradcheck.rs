//! Central finite-difference gradient verification. Always runs in
//! [`Precision::Double`]; the backward pass under test is compared
//! coordinate-by-coordinate against `(f(x+h·e_i) - f(x-h·e_i)) / 2h`.

use super::{Precision, Tape, Tensor, TensorRef};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (coord {}, analytic {:.6e}, numeric {:.6e}, tol {:.0e})",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.worst_coord,
            self.analytic_at_worst,
            self.numeric_at_worst,
            self.tol
        )
    }
}

/// Relative discrepancy with a dead zone for jointly-negligible values.
pub fn rel_err(a: f64, n: f64) -> f64 {
    if a.abs() < 1e-7 && n.abs() < 1e-7 {
        0.0
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

/// Checks the backward gradient of a scalar-valued tensor function at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&Tape, TensorRef) -> TensorRef,
{
    let tape = Tape::new(Precision::Double);
    let xr = tape.leaf(x, true);
    let loss = f(&tape, xr);
    tape.backward(loss);
    let analytic = tape
        .grad(xr)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |data: &[f64]| -> f64 {
        let t = Tape::new(Precision::Double);
        let xr = t.leaf(&Tensor::new(x.shape().to_vec(), data.to_vec()), false);
        t.scalar(f(&t, xr))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
        pass: true,
    };
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let err = rel_err(analytic.data()[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coord = i;
            report.analytic_at_worst = analytic.data()[i];
            report.numeric_at_worst = numeric;
        }
    }
    report.pass = report.max_rel_err < tol;
    report
}
