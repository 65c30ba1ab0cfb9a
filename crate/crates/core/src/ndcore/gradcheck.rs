use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
    pub passed: bool,
}

/// Relative error with an absolute floor, so entries whose true gradient is
/// essentially zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares analytic gradients against fourth-order central differences.
///
/// `loss_fn` receives the current parameter values and returns the loss;
/// `analytic` holds one gradient tensor per parameter at `params`.
pub fn finite_diff_check(
    params: &[Tensor],
    analytic: &[Tensor],
    mut loss_fn: impl FnMut(&[Tensor]) -> Result<f64>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if analytic.len() != params.len() {
        return Err(Error::invalid(
            "one analytic gradient per parameter is required",
        ));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        entries_checked: 0,
        passed: true,
    };
    for p in 0..params.len() {
        if !analytic[p].same_shape(&params[p]) {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_check",
                left: params[p].shape().to_vec(),
                right: analytic[p].shape().to_vec(),
            });
        }
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            let mut at = |delta: f64| -> Result<f64> {
                work[p].data_mut()[e] = orig + delta;
                loss_fn(&work)
            };
            let (u1, d1, u2, d2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            work[p].data_mut()[e] = orig;
            let numeric = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * h);
            let err = relative_error(analytic[p].data()[e], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (p, e);
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::graph::Graph;

    fn quad_loss(params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let w = g.param(params[0].clone())?;
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3]])?)?;
        let y = g.matmul(x, w)?;
        let s = g.square(y)?;
        let l = g.sum(s)?;
        let v = g.value(l)?.item();
        let mut grads = g.backward(l)?;
        Ok((v, vec![grads.take(w).unwrap()]))
    }

    #[test]
    fn passes_on_correct_and_fails_on_corrupted() {
        let params = vec![Tensor::from_rows(&[vec![0.4, -1.0], vec![0.7, 0.2]]).unwrap()];
        let (_, grads) = quad_loss(&params).unwrap();
        let f = |p: &[Tensor]| quad_loss(p).map(|r| r.0);
        let ok = finite_diff_check(&params, &grads, f, 1e-5, 1e-6).unwrap();
        assert!(ok.passed, "{ok:?}");
        let bad: Vec<Tensor> = grads.iter().map(|t| t.map(|v| v * 1.01)).collect();
        let rep = finite_diff_check(&params, &bad, f, 1e-5, 1e-6).unwrap();
        assert!(!rep.passed);
        assert!(finite_diff_check(&params, &grads, f, 0.0, 1e-6).is_err());
    }
}
