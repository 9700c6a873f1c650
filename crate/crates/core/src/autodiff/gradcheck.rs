use super::{AutodiffError, Graph, Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// max |g_analytic − g_fd| / (|g_fd| + 1e-8)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

const FD_STEP: f64 = 1e-4;

fn eval<F>(f: &F, point: &Tensor) -> Result<(f64, Option<Vec<f64>>), AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let x = g.leaf(&point.clone().with_requires_grad(true));
    let y = f(&mut g, x)?;
    let value = g.value(y).item();
    let grads = g.backward(y)?;
    Ok((value, grads.get(x).map(<[f64]>::to_vec)))
}

/// Checks the gradient of scalar `f` at `point` against central finite
/// differences with step 1e-4.
pub fn grad_check<F>(f: F, point: &Tensor, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let (y0, analytic) = eval(&f, point)?;
    if !y0.is_finite() {
        return Err(AutodiffError::NonFinite { index: 0 });
    }
    let analytic = analytic.unwrap_or_else(|| vec![0.0; point.numel()]);
    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let (up, _) = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let (down, _) = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let d = (up - down) / (2.0 * FD_STEP);
        if !d.is_finite() || !analytic[i].is_finite() {
            return Err(AutodiffError::NonFinite { index: i });
        }
        numeric.push(d);
    }
    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        worst_index,
        tol,
        passed: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let rep = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &p,
            1e-8,
        )
        .unwrap();
        assert_eq!(rep.analytic, vec![2.0, 4.0, 6.0]);
        assert!(rep.passed, "{}", rep.max_rel_err);
    }

    #[test]
    fn non_finite_output_reports_coordinate() {
        let p = Tensor::new(vec![2], vec![1.0, 1e-300]).unwrap();
        let err = grad_check(
            |g, x| {
                let e = g.scale(x, 1e308);
                let e = g.exp(e);
                Ok(g.sum(e))
            },
            &p,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { .. }));
    }
}
