//! Central finite-difference checks of analytic gradients.

use rand::seq::index;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::rng::Rng;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    /// Coordinates whose perturbation changed a discrete branch (a hinge or
    /// rectifier crossing its kink, or a different sampled token).
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub threshold: f64,
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn passes(&self, min_fraction: f64) -> bool {
        self.checked > 0 && self.pass_fraction() >= min_fraction
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.threshold = self.threshold.max(other.threshold);
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward-pass gradients of the scalar built by `build` against
/// central differences with step `eps`, on up to `per_param` randomly chosen
/// coordinates of every parameter in `store`.
///
/// `build` must be deterministic in the store's values: any randomness it
/// uses has to be re-seeded identically on each call.
pub fn check<F>(
    store: &ParamStore,
    mut build: F,
    per_param: usize,
    eps: f64,
    threshold: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let (mut g, root) = build(store)?;
    g.backward(root)?;
    let analytic = store.gradients(&g);
    let base_sig = g.signature();
    drop(g);

    let mut report = GradCheckReport {
        threshold,
        ..Default::default()
    };
    let mut probe = store.clone();
    for (name, value) in store.iter() {
        let n = value.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut v = index::sample(rng, n, per_param).into_vec();
            v.sort_unstable();
            v
        };
        for idx in picks {
            let orig = value.data()[idx];
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig + eps;
            let (gp, rp) = build(&probe)?;
            let (lp, sp) = (gp.value(rp).item(), gp.signature());
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig - eps;
            let (gm, rm) = build(&probe)?;
            let (lm, sm) = (gm.value(rm).item(), gm.signature());
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[name].data()[idx];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err < threshold {
                report.passed += 1;
            }
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some(Mismatch {
                        param: name.to_string(),
                        index: idx,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
