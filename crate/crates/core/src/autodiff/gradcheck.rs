use super::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiffMode {
    #[default]
    Central,
    Forward,
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over components of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

/// Compares the reverse-mode gradient of `expr` with respect to its single
/// input against finite differences taken at `at`.
pub fn finite_diff_check<F>(expr: F, at: &Tensor<f64>, step: f64, mode: DiffMode) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::Parameter(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let loss = expr(&mut g, v)?;
        if g.value(loss).numel() != 1 {
            return Err(TensorError::Contract("expression is not scalar".into()));
        }
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let v = g.var(at.clone());
    let loss = expr(&mut g, v)?;
    let analytic = g.evaluate_with_grads(loss, &[v])?.grads.remove(&v).unwrap();
    let base = match mode {
        DiffMode::Forward => Some(g.value(loss).item()),
        DiffMode::Central => None,
    };
    drop(g);

    let mut numeric = Tensor::zeros(at.dims());
    let mut point = at.clone();
    for i in 0..at.numel() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + step;
        let plus = eval(&point)?;
        let d = match base {
            Some(f0) => (plus - f0) / step,
            None => {
                point.data_mut()[i] = orig - step;
                let minus = eval(&point)?;
                (plus - minus) / (2.0 * step)
            }
        };
        point.data_mut()[i] = orig;
        numeric.data_mut()[i] = d;
    }

    let max_rel_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}
