use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bindings, NnError, ParamStore};
use crate::autodiff::{relative_error, CoordCheck, GradCheckReport, Tape, Var};
use crate::scalar::Real;

/// Central-difference check of a scalar network loss against its tape
/// gradient, over `count` coordinates drawn without replacement from all
/// scalars of `store` (every coordinate when `count` covers the store).
///
/// Coordinates are numbered by walking the store in name order.
pub fn grad_check_params<R, F>(
    store: &ParamStore<R>,
    count: usize,
    seed: u64,
    eps: R,
    tol: R,
    f: F,
) -> Result<GradCheckReport<R>, NnError>
where
    R: Real,
    F: Fn(&mut Tape<R>, &Bindings) -> Result<Var, NnError>,
{
    let mut locs = Vec::new();
    for (name, t) in store.iter() {
        locs.extend((0..t.numel()).map(|i| (name.clone(), i)));
    }
    let picks: Vec<usize> = if count >= locs.len() {
        (0..locs.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = rand::seq::index::sample(&mut rng, locs.len(), count).into_vec();
        v.sort_unstable();
        v
    };

    let mut tape = Tape::new();
    let b = Bindings::of(&mut tape, store, true);
    let loss = f(&mut tape, &b)?;
    tape.backward(loss)?;
    let grads = b.grads_for(&tape, store);

    let eval = |s: &ParamStore<R>| -> Option<R> {
        let mut t = Tape::new();
        let b = Bindings::of(&mut t, s, false);
        let out = f(&mut t, &b).ok()?;
        let v = t.value(out).item();
        v.is_finite().then_some(v)
    };

    let mut report = GradCheckReport {
        coords: Vec::with_capacity(picks.len()),
        max_rel_err: R::zero(),
        worst: None,
        failure: None,
        tol,
        passed: true,
    };
    let mut work = store.clone();
    for &k in &picks {
        let (name, i) = &locs[k];
        let analytic = grads.get(name).map_or(R::zero(), |g| g[*i]);
        let orig = work.get(name)?.data()[*i];
        work.get_mut(name)?.data_mut()[*i] = orig + eps;
        let fp = eval(&work);
        work.get_mut(name)?.data_mut()[*i] = orig - eps;
        let fm = eval(&work);
        work.get_mut(name)?.data_mut()[*i] = orig;
        let (Some(fp), Some(fm)) = (fp, fm) else {
            report.failure = Some(format!("non-finite function value probing {name}[{i}]"));
            report.passed = false;
            report.worst = Some(k);
            return Ok(report);
        };
        let numeric = (fp - fm) / (eps + eps);
        let rel_err = relative_error(analytic, numeric);
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = rel_err;
            report.worst = Some(k);
        }
        report.coords.push(CoordCheck { index: k, analytic, numeric, rel_err });
    }
    report.passed = report.max_rel_err <= tol;
    if !report.passed {
        if let Some(c) = report.coords.iter().find(|c| Some(c.index) == report.worst) {
            let (name, i) = &locs[c.index];
            report.failure =
                Some(format!("worst coordinate {name}[{i}]: analytic {:e}, numeric {:e}", c.analytic.as_f64(), c.numeric.as_f64()));
        }
    }
    Ok(report)
}
