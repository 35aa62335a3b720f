//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore, Session};
use crate::tape::Var;

pub mod suite;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Perturbation `eps` in `(f(x+eps) - f(x-eps)) / 2eps`.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_elements_per_param: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            max_elements_per_param: None,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    /// Elements whose difference stencil crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element and its two gradient estimates.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Loss value and the branch signature of the evaluation.
fn eval_loss<F>(store: &mut ParamStore<f64>, f: &mut F, mode: Mode) -> Result<(f64, u64)>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut s = Session::new(store, mode);
    let loss = f(&mut s)?;
    let v = s.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "gradcheck loss",
        });
    }
    Ok((v, s.tape.branch_signature()))
}

/// Compares tape gradients of the scalar computed by `f` against central
/// differences for every trainable parameter in `store`. Elements whose
/// perturbed evaluations take a different ReLU branch than the base point
/// are counted as skipped rather than compared.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    let base = {
        let mut s = Session::new(store, opts.mode);
        let loss = f(&mut s)?;
        s.backward(loss)?;
        s.tape.branch_signature()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::new();
    for id in store.trainable_ids() {
        let analytic = store.get(id).grad.clone();
        let numel = analytic.numel();
        let mut order: Vec<usize> = (0..numel).collect();
        let budget = match opts.max_elements_per_param {
            Some(k) if k < numel => {
                order.shuffle(&mut rng);
                k
            }
            _ => numel,
        };
        let mut report = ParamReport {
            name: store.get(id).name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &i in &order {
            if report.checked == budget {
                break;
            }
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = eval_loss(store, &mut f, opts.mode);
            store.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = eval_loss(store, &mut f, opts.mode);
            store.get_mut(id).value.data_mut()[i] = orig;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            if sp != base || sm != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[i], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = i;
                report.worst_analytic = analytic.data()[i];
                report.worst_numeric = numeric;
            }
            report.checked += 1;
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        params: reports,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let th = store.register("theta", Tensor::from_f64(&[1], &[3.0]).unwrap(), true);
        let report = gradcheck(
            &mut store,
            |s| {
                let v = s.param(th);
                s.tape.mul(v, v)
            },
            &GradcheckOptions {
                tolerance: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(store.get(th).grad.item(), 6.0);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        assert!(relative_error(1.0, 2.0) > 0.4);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
