use super::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};

/// Allowed finite-difference step sizes.
pub const GRAD_CHECK_EPS_RANGE: (f64, f64) = (1e-6, 1e-3);

/// Compares analytic parameter gradients with central differences.
///
/// `build` must record a scalar-valued computation over `store` and return
/// its output node. The returned value is the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every parameter entry.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    Ok(check(store, eps, false, build)?.max_error)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiecewiseCheck {
    pub max_error: f64,
    pub checked: usize,
    /// Entries whose `+-eps` perturbation moved a ReLU input across zero.
    pub skipped: usize,
}

/// As [`grad_check`] for graphs containing ReLUs: entries whose central
/// difference straddles a kink are skipped, since the difference quotient
/// there does not approximate the derivative.
pub fn grad_check_piecewise<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<PiecewiseCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    check(store, eps, true, build)
}

fn check<F>(store: &mut ParamStore, eps: f64, skip_kinks: bool, build: F) -> Result<PiecewiseCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let (lo, hi) = GRAD_CHECK_EPS_RANGE;
    if !(lo..=hi).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps {eps:e} outside [{lo:e}, {hi:e}]"
        )));
    }

    let mut analytic: Vec<Option<super::Tensor>> = vec![None; store.len()];
    let pattern = {
        let mut graph = Graph::new(store);
        let out = build(&mut graph)?;
        if !graph.value(out).is_scalar() {
            return Err(Error::shape(
                "grad_check",
                format!("graph output must be scalar, got {:?}", graph.value(out).shape()),
            ));
        }
        graph.backward(out)?.accumulate_into(&mut analytic);
        graph.relu_pattern()
    };

    let eval = |store: &ParamStore| -> Result<(f64, bool)> {
        let mut graph = Graph::new(store);
        let out = build(&mut graph)?;
        let same_piece = !skip_kinks || graph.relu_pattern() == pattern;
        Ok((graph.value(out).item(), same_piece))
    };

    let mut report = PiecewiseCheck {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for p in 0..store.len() {
        let id = super::ParamId(p);
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let (plus, same_plus) = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let (minus, same_minus) = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[p].as_ref().map_or(0.0, |g| g.data()[i]);
            report.max_error = report.max_error.max((exact - numeric).abs() / numeric.abs().max(1.0));
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_graph_has_zero_error() {
        let mut store = ParamStore::new();
        store.add("unused", Tensor::vector(&[1.0, 2.0]));
        let err = grad_check(&mut store, 1e-4, |g| {
            let c = g.input(Tensor::scalar(3.0));
            g.sum(c)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar_output() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(&[1.0, 2.0]));
        assert!(grad_check(&mut store, 1e-1, |g| Ok(g.param(w))).is_err());
        assert!(grad_check(&mut store, 1e-4, |g| Ok(g.param(w))).is_err());
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let mut store = ParamStore::new();
        // relu(w) at w = 1e-5 with eps 1e-4 straddles the kink.
        let w = store.add("w", Tensor::vector(&[1e-5, 0.5]));
        let build = |g: &mut Graph<'_>| {
            let x = g.param(w);
            let y = g.relu(x)?;
            g.sum(y)
        };
        let plain = grad_check(&mut store, 1e-4, build).unwrap();
        assert!(plain > 0.4);
        let r = grad_check_piecewise(&mut store, 1e-4, build).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.max_error < 1e-9);
    }
}
