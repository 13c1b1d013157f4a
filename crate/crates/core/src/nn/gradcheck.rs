//! Central finite-difference gradient checking.
//!
//! Only the forward function is evaluated here, so the check is independent
//! of the reverse pass it verifies.

use super::graph::{Gradients, ParamId, ParamSet};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Base step; each coordinate uses `step * max(1, |value|)`.
    pub step: f64,
    /// Entries with `max(|analytic|, |numeric|)` below this are compared
    /// absolutely against it instead of relatively.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            abs_floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Compares `grads` against central differences of `f` at every scalar of
/// every parameter.
pub fn check_gradients(
    params: &ParamSet<f64>,
    grads: &Gradients<f64>,
    f: impl Fn(&ParamSet<f64>) -> f64,
    cfg: GradCheck,
) -> GradCheckReport {
    compare(params, grads, cfg.abs_floor, |probe, id, i, orig| {
        let h = cfg.step * orig.abs().max(1.0);
        central_difference(probe, id, i, orig, h, &f)
    })
}

/// Like [`check_gradients`], but a step is only trusted once halving it
/// twice reproduces the estimate to a relative `1e-4` (against
/// `cfg.abs_floor` for tiny values). Starting from
/// `cfg.step * max(1, |value|)`, the step halves until that holds, so entries
/// whose perturbation straddles an activation kink fall back to smaller steps
/// while smooth entries keep the base step.
pub fn check_gradients_adaptive(
    params: &ParamSet<f64>,
    grads: &Gradients<f64>,
    f: impl Fn(&ParamSet<f64>) -> f64,
    cfg: GradCheck,
) -> GradCheckReport {
    compare(params, grads, cfg.abs_floor, |probe, id, i, orig| {
        let h = cfg.step * orig.abs().max(1.0);
        settled(
            |h| central_difference(probe, id, i, orig, h, &f),
            h,
            HALVINGS,
            cfg.abs_floor,
        )
    })
}

const HALVINGS: usize = 12;
const SETTLE_TOL: f64 = 1e-4;

/// First `d(h0 / 2^k)` that both `d(h0 / 2^(k+1))` and `d(h0 / 2^(k+2))`
/// confirm within [`SETTLE_TOL`]; the last estimate if none settles within
/// `halvings`. One confirmation is not enough: a kink just inside the step
/// can make `d` locally flat in `h` at a wrong value.
pub fn settled(mut d: impl FnMut(f64) -> f64, h0: f64, halvings: usize, abs_floor: f64) -> f64 {
    let agree = |a: f64, b: f64| (a - b).abs() <= SETTLE_TOL * a.abs().max(b.abs()).max(abs_floor);
    let mut h = h0;
    let mut est = [d(h), f64::NAN, f64::NAN];
    h /= 2.0;
    est[1] = d(h);
    for _ in 1..halvings {
        h /= 2.0;
        est[2] = d(h);
        if agree(est[0], est[1]) && agree(est[0], est[2]) {
            return est[0];
        }
        est = [est[1], est[2], f64::NAN];
    }
    est[1]
}

fn central_difference(
    probe: &mut ParamSet<f64>,
    id: ParamId,
    i: usize,
    orig: f64,
    h: f64,
    f: &impl Fn(&ParamSet<f64>) -> f64,
) -> f64 {
    probe.get_mut(id).value.data_mut()[i] = orig + h;
    let up = f(probe);
    probe.get_mut(id).value.data_mut()[i] = orig - h;
    let down = f(probe);
    probe.get_mut(id).value.data_mut()[i] = orig;
    (up - down) / (2.0 * h)
}

fn compare(
    params: &ParamSet<f64>,
    grads: &Gradients<f64>,
    abs_floor: f64,
    mut numeric_at: impl FnMut(&mut ParamSet<f64>, ParamId, usize, f64) -> f64,
) -> GradCheckReport {
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for id in params.ids() {
        let n = params.get(id).value.numel();
        for i in 0..n {
            let orig = params.get(id).value.data()[i];
            let numeric = numeric_at(&mut probe, id, i, orig);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let scale = analytic.abs().max(numeric.abs()).max(abs_floor);
            let rel = (analytic - numeric).abs() / scale;
            report.checked += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (params.name(id).to_string(), i);
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}
