use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};
use super::NumError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Max over checked coordinates of `|analytic - numeric|`.
    pub max_abs_error: f64,
    /// Loss at the unperturbed point.
    pub loss: f64,
    /// `(analytic, numeric)` for each checked coordinate, in order.
    pub samples: Vec<(f64, f64)>,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (`relu`/`abs` sign change).
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn nondifferentiable(&self) -> bool {
        self.excluded > 0
    }

    /// The relative error recomputed with another denominator floor.
    pub fn max_rel_error_with_floor(&self, floor: f64) -> f64 {
        self.samples
            .iter()
            .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<(f64, Vec<bool>), NumError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok((g.value(loss).item(), g.kink_signature()))
}

/// Denominator floor of the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients with central differences of step `eps` on
/// every coordinate of every parameter.
pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumError>,
{
    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
        .collect();
    grad_check_coords(store, f, eps, &coords)
}

/// A denominator floor near the resolution of a central difference at `loss`:
/// gradients smaller than this are compared in absolute terms, since their
/// finite-difference estimate is dominated by rounding in the loss.
pub fn roundoff_floor(loss: f64, eps: f64, tol: f64) -> f64 {
    16.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * eps) / tol
}

/// As [`grad_check`], restricted to the listed `(parameter, flat index)` coordinates.
pub fn grad_check_coords<F>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    coords: &[(ParamId, usize)],
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumError>,
{
    if eps <= 0.0 {
        return Err(NumError::Optimizer(format!("grad_check eps must be > 0, got {eps}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let grads = g.backward(loss)?;
        let mut dense: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        for (id, t) in grads.param_grads() {
            dense[id.0].copy_from_slice(t.data());
        }
        dense
    };
    let (loss, sig0) = eval(store, &f)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        loss,
        samples: Vec::new(),
        worst: None,
        checked: 0,
        excluded: 0,
    };
    for &(id, i) in coords {
        let orig = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + eps;
        let plus = eval(store, &f);
        store.get_mut(id).value.data_mut()[i] = orig - eps;
        let minus = eval(store, &f);
        store.get_mut(id).value.data_mut()[i] = orig;
        let ((fp, sp), (fm, sm)) = (plus?, minus?);
        if sp != sm || sp != sig0 {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[id.0][i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DEFAULT_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.samples.push((a, numeric));
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.get(id).name.clone(), i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn exact_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let r = grad_check(
            &mut store,
            |g, s| {
                let x = g.param(s, id);
                let sq = g.square(x);
                Ok(g.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!(!r.nondifferentiable());
    }

    #[test]
    fn hinge_kink_is_excluded() {
        // relu(x - 1) evaluated exactly at the kink x = 1
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0])).unwrap();
        let r = grad_check(
            &mut store,
            |g, s| {
                let x = g.param(s, id);
                let one = g.constant(Tensor::vector(vec![1.0]));
                let d = g.sub(x, one)?;
                let h = g.relu(d);
                Ok(g.sum(h))
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 0);
        assert!(r.nondifferentiable());
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0)).unwrap();
        assert!(grad_check(&mut store, |g, _| Ok(g.constant(Tensor::scalar(0.0))), 0.0).is_err());
    }
}
