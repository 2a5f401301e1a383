use super::{Graph, Result, Tensor, TensorError, Var};

/// Denominator floor for the relative error. Entries whose analytic and numeric
/// gradients are both below this magnitude are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares reverse-mode gradients of a scalar `loss_fn` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, entry by entry over every parameter.
///
/// `loss_fn` receives a fresh graph and one leaf per parameter, in order.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    grad_check_entries(loss_fn, params, step, &all)
}

/// [`grad_check`] restricted to the listed flat entries of each parameter.
pub fn grad_check_entries<F>(
    loss_fn: F,
    params: &[Tensor],
    step: f64,
    entries: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if entries.len() != params.len() {
        return Err(TensorError::Invalid {
            op: "grad_check",
            detail: format!("{} entry lists for {} parameters", entries.len(), params.len()),
        });
    }
    if params.iter().any(Tensor::is_complex) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            detail: "parameters must be real".into(),
        });
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("param grad")).collect();
    drop(g);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        let v = g.value(loss);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for &j in &entries[pi] {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((pi, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-8), "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let err = grad_check(|g, v| g.scale(v[0], 2.0), &[Tensor::zeros(&[3])], 1e-5).unwrap_err();
        assert_eq!(err, TensorError::NonScalarLoss(vec![3]));
    }
}
