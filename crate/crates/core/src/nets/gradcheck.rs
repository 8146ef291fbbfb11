//! Central finite-difference checks of tape gradients.

use crate::error::Result;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates within tolerance.
    pub passed: usize,
    /// Coordinates skipped because the step straddles a kink.
    pub screened: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        self.passed as f64 / self.checked as f64
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.screened += other.screened;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// Upper bound on coordinates checked per parameter tensor.
    pub max_per_param: usize,
    /// Relative disagreement of one-sided slopes that marks a kink.
    pub kink_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, abs_floor: 1e-7, max_per_param: usize::MAX, kink_tol: 1e-2 }
    }
}

/// Compare `d loss / d param` from the tape against central differences for
/// every coordinate of `params` (or all parameters when empty). A
/// coordinate is screened when the one-sided slopes disagree by more than
/// `kink_tol` of their magnitude, which flags relu kinks and max-pool ties.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    cfg: GradCheckConfig,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss_fn(&mut tape, store)?;
        Ok(tape.value(l).item())
    };

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;
    let f0 = tape.value(loss).item();
    drop(tape);

    let ids: Vec<ParamId> = if params.is_empty() { store.ids().collect() } else { params.to_vec() };
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = store.value(id).len();
        let stride = n.div_ceil(cfg.max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let analytic = store.grad(id).data[j];
            let orig = store.value(id).data[j];
            store.value_mut(id).data[j] = orig + cfg.step;
            let fp = eval(store)?;
            store.value_mut(id).data[j] = orig - cfg.step;
            let fm = eval(store)?;
            store.value_mut(id).data[j] = orig;

            let fwd = (fp - f0) / cfg.step;
            let bwd = (f0 - fm) / cfg.step;
            let scale = fwd.abs().max(bwd.abs());
            if (fwd - bwd).abs() > cfg.kink_tol * scale + cfg.abs_floor {
                report.screened += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if rel <= cfg.rel_tol {
                report.passed += 1;
            }
            report.max_rel_err = report.max_rel_err.max(rel);
        }
    }
    Ok(report)
}
