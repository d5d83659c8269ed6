use super::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Real;

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck<R: Real = f64> {
    pub index: usize,
    pub analytic: R,
    pub numeric: R,
    pub rel_err: R,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport<R: Real = f64> {
    pub coords: Vec<CoordCheck<R>>,
    pub max_rel_err: R,
    /// Coordinate with the largest relative error.
    pub worst: Option<usize>,
    /// Set when the function could not be evaluated at some probe point.
    pub failure: Option<String>,
    pub tol: R,
    pub passed: bool,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error<R: Real>(a: R, b: R) -> R {
    let den = a.abs().max(b.abs()).max(R::lit(1e-8));
    (a - b).abs() / den
}

/// Compares the tape gradient of scalar `f` at `point` against the central
/// difference `(f(x+εe) − f(x−εe)) / 2ε` on every coordinate.
pub fn grad_check<R, F>(f: F, point: &Tensor<R>, eps: R, tol: R) -> Result<GradCheckReport<R>, AutodiffError>
where
    R: Real,
    F: Fn(&mut Tape<R>, Var) -> Result<Var, AutodiffError>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, &coords, eps, tol)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_coords<R, F>(
    f: F,
    point: &Tensor<R>,
    coords: &[usize],
    eps: R,
    tol: R,
) -> Result<GradCheckReport<R>, AutodiffError>
where
    R: Real,
    F: Fn(&mut Tape<R>, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).expect("trainable leaf has a gradient").to_vec();

    let eval = |p: &Tensor<R>| -> Option<R> {
        let mut t = Tape::new();
        let v = t.leaf(p.clone());
        let out = f(&mut t, v).ok()?;
        let val = t.value(out).item();
        val.is_finite().then_some(val)
    };

    let mut report = GradCheckReport {
        coords: Vec::with_capacity(coords.len()),
        max_rel_err: R::zero(),
        worst: None,
        failure: None,
        tol,
        passed: true,
    };
    let two_eps = eps + eps;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let (Some(fp), Some(fm)) = (eval(&plus), eval(&minus)) else {
            report.failure = Some(format!("non-finite function value probing coordinate {i}"));
            report.passed = false;
            report.worst = Some(i);
            return Ok(report);
        };
        let numeric = (fp - fm) / two_eps;
        let rel_err = relative_error(analytic[i], numeric);
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel_err;
            report.worst = Some(i);
        }
        report.coords.push(CoordCheck { index: i, analytic: analytic[i], numeric, rel_err });
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let f = |t: &mut Tape<f64>, x: Var| {
            let y = t.mul(x, x)?;
            t.sum(y, None)
        };
        let r = grad_check(f, &Tensor::scalar(3.0), 1e-5, 1e-9).unwrap();
        assert!(r.passed);
        assert!((r.coords[0].analytic - 6.0).abs() < 1e-15);
        assert!((r.coords[0].numeric - 6.0).abs() < 1e-9);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn probe_failure_names_coordinate() {
        // log(x) at x = 1e-6 becomes non-finite at x - eps.
        let f = |t: &mut Tape<f64>, x: Var| {
            let y = t.log(x)?;
            t.sum(y, None)
        };
        let p = Tensor::new([2], vec![1.0, 1e-6]).unwrap();
        let r = grad_check(f, &p, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert!(r.failure.unwrap().contains("coordinate 1"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9f64, 0.0) - 0.1).abs() < 1e-15);
    }
}
