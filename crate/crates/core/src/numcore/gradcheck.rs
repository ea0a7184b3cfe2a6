use super::graph::{evaluate, Bindings, Graph, NodeId};
use super::NumError;

/// Absolute floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Leaf entries compared.
    pub checked: usize,
    /// Entries skipped because the central stencil straddles a kink.
    pub excluded: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients against central differences for every
/// entry of every differentiable leaf.
///
/// An entry is excluded when the kink signature (relu signs, max winners,
/// active log floors) differs between the `+eps` and `-eps` evaluations.
pub fn grad_check(
    graph: &Graph,
    inputs: &Bindings,
    output: NodeId,
    eps: f64,
) -> Result<GradCheckReport, NumError> {
    assert!(eps > 0.0, "eps must be positive");
    let analytic = evaluate(graph, inputs)?.backward(output)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut probe = inputs.clone();
    for leaf in graph.differentiable_inputs() {
        let n = inputs[&leaf].len();
        for i in 0..n {
            let orig = inputs[&leaf].data()[i];
            let (fp, sp) = {
                probe.get_mut(&leaf).unwrap().data_mut()[i] = orig + eps;
                let ev = evaluate(graph, &probe)?;
                (ev.value(output).item(), ev.kink_signature())
            };
            let (fm, sm) = {
                probe.get_mut(&leaf).unwrap().data_mut()[i] = orig - eps;
                let ev = evaluate(graph, &probe)?;
                (ev.value(output).item(), ev.kink_signature())
            };
            probe.get_mut(&leaf).unwrap().data_mut()[i] = orig;
            if sp != sm {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let err = relative_error(analytic[&leaf].data()[i], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut g = Graph::new();
        let x = g.input();
        let sq = g.mul(x, x);
        let s = g.scale(sq, 3.0);
        let y = g.sum(s);
        let b: Bindings = [(x, Tensor::from_vec(vec![0.4, -1.3, 2.2]))].into_iter().collect();
        let r = grad_check(&g, &b, y, 1e-4).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn relu_kink_entry_excluded() {
        let mut g = Graph::new();
        let x = g.input();
        let r = g.relu(x);
        let y = g.sum(r);
        let b: Bindings = [(x, Tensor::from_vec(vec![0.0, 1.5]))].into_iter().collect();
        let rep = grad_check(&g, &b, y, 1e-3).unwrap();
        assert_eq!(rep.excluded, 1);
        assert_eq!(rep.checked, 1);
        assert!(rep.max_rel_error < 1e-9);
    }
}
