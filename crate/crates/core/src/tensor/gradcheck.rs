/// One evaluation of a scalar function for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub value: f64,
    /// Identifies the linear piece the evaluation landed on (see
    /// [`Tape::relu_signature`](super::Tape::relu_signature)); use a constant
    /// for smooth functions.
    pub signature: u64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Probe {
            value,
            signature: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±eps probes straddle a ReLU kink; the central
    /// difference is not a derivative estimate there, so they are excluded.
    pub skipped_kinks: usize,
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> Probe,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let base = f(params).signature;
    let mut point = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped_kinks: 0,
    };
    for i in 0..params.len() {
        point[i] = params[i] + eps;
        let plus = f(&point);
        point[i] = params[i] - eps;
        let minus = f(&point);
        point[i] = params[i];
        if plus.signature != base || minus.signature != base {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_index = Some(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn linear_function_is_exact() {
        let c = [0.5, -2.0, 3.0];
        let f = |w: &[f64]| Probe::smooth(w.iter().zip(&c).map(|(a, b)| a * b).sum());
        let r = finite_diff_check(f, &[1.0, 2.0, 3.0], &c, 1e-3);
        assert!(r.max_rel_error < 1e-6);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn relu_away_from_kink() {
        let f = |w: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(Tensor::from_f64(vec![1], w).unwrap());
            let r = tape.relu(x);
            let value = tape.value(r).data()[0];
            Probe {
                value,
                signature: tape.relu_signature(),
            }
        };
        let r = finite_diff_check(f, &[1.0], &[1.0], 1e-3);
        assert!(r.max_rel_error < 1e-6);
        assert_eq!(r.skipped_kinks, 0);
    }

    #[test]
    fn kink_is_reported_not_checked() {
        let f = |w: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(Tensor::from_f64(vec![1], w).unwrap());
            let r = tape.relu(x);
            Probe {
                value: tape.value(r).data()[0],
                signature: tape.relu_signature(),
            }
        };
        let r = finite_diff_check(f, &[1e-4], &[1.0], 1e-3);
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn wrong_gradient_detected() {
        let f = |w: &[f64]| Probe::smooth(w[0] * w[0]);
        let r = finite_diff_check(f, &[2.0], &[3.0], 1e-3);
        assert!(r.max_rel_error > 0.1);
    }
}
