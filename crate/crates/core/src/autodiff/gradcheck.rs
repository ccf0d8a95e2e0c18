//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tape, Var};
use crate::{Error, Result, Tensor};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms.
pub const GRAD_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub excluded: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn scalar_of(tape: &Tape<'_>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok(t.item())
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// step `h` on every coordinate. `f` must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.track_kinks();
    let xv = tape.input(x.clone());
    let loss = f(&mut tape, xv)?;
    scalar_of(&tape, loss)?;
    let base_sig: Vec<bool> = tape.kink_signature().to_vec();
    let grads = tape.backward(loss)?;
    let analytic = grads
        .input(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |p: &Tensor| -> Result<(f64, Vec<bool>)> {
        let mut t = Tape::new();
        t.track_kinks();
        let v = t.input(p.clone());
        let out = f(&mut t, v)?;
        Ok((scalar_of(&t, out)?, t.kink_signature().to_vec()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
        tol,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, sp) = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, sm) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if sp != base_sig || sm != base_sig {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    Ok(report)
}

/// Outcome for one parameter coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// A perturbation crossed a ReLU kink; the coordinate carries no verdict.
    pub excluded: bool,
}

/// Checks the tape gradient of the scalar built by `f` against central
/// differences for each `(parameter, flat index)` in `coords`. The store is
/// perturbed in place and restored exactly.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    f: F,
) -> Result<Vec<CoordinateCheck>>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let (grads, base_sig) = {
        let mut tape = Tape::with_params(store);
        tape.track_kinks();
        let loss = f(&mut tape)?;
        scalar_of(&tape, loss)?;
        let sig = tape.kink_signature().to_vec();
        (tape.backward(loss)?, sig)
    };

    let eval = |store: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::with_params(store);
        tape.track_kinks();
        let loss = f(&mut tape)?;
        Ok((scalar_of(&tape, loss)?, tape.kink_signature().to_vec()))
    };

    let mut out = Vec::with_capacity(coords.len());
    for &(id, index) in coords {
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[index]);
        let orig = store.value(id).data()[index];
        store.get_mut(id).value.data_mut()[index] = orig + h;
        let (fp, sp) = eval(store)?;
        store.get_mut(id).value.data_mut()[index] = orig - h;
        let (fm, sm) = eval(store)?;
        store.get_mut(id).value.data_mut()[index] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let excluded = sp != base_sig || sm != base_sig;
        out.push(CoordinateCheck {
            param: id,
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            excluded,
        });
    }
    Ok(out)
}
