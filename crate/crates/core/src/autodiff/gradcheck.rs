use super::{Graph, Tensor, Var};
use crate::error::{NdaError, Result};

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter index, flat coordinate)` pairs whose central difference
    /// straddles a non-differentiable point.
    pub skipped: Vec<(usize, usize)>,
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` must rebuild the whole computation from the supplied parameter
/// handles and return a scalar node. A coordinate is skipped when the
/// `+step` and `-step` evaluations take different branches at a relu,
/// clamp or sqrt-at-zero node.
pub fn gradient_check<F>(params: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(NdaError::contract(format!(
            "step must lie in (0, 1e-3], got {step}"
        )));
    }

    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (graph, vars, loss) = eval(params)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: Vec::new(),
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, param) in params.iter().enumerate() {
        for c in 0..param.len() {
            let base = param.data()[c];

            work[p].data_mut()[c] = base + step;
            let (gp, _, lp) = eval(&work)?;
            work[p].data_mut()[c] = base - step;
            let (gm, _, lm) = eval(&work)?;
            work[p].data_mut()[c] = base;

            if gp.kink_signature() != gm.kink_signature() {
                report.skipped.push((p, c));
                continue;
            }

            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * step);
            let exact = analytic[p].data()[c];
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(NdaError::GradientCheck {
                    param: p,
                    coord: c,
                    detail: format!("analytic {exact}, numeric {numeric}"),
                });
            }
            let rel = (exact - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
