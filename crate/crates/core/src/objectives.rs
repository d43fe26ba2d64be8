//! The two alignment objectives: a squared-Euclidean triplet hinge and a
//! matched/mismatched binary classifier with cross-entropy.

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::numcore::{softplus, Graph, NumError, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 1.0 }
    }
}

fn check_dims(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.rank() != 1 || ta.shape() != tb.shape() {
        return Err(NumError::Shape {
            op,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        });
    }
    Ok(())
}

/// `max(‖s − r₊‖² − ‖s − r₋‖² + margin, 0)`.
///
/// At the hinge boundary the subgradient taken is 0.
pub fn triplet_loss(
    g: &mut Graph,
    s: Var,
    r_pos: Var,
    r_neg: Var,
    cfg: &TripletConfig,
) -> Result<Var, NumError> {
    check_dims(g, "triplet_loss", s, r_pos)?;
    check_dims(g, "triplet_loss", s, r_neg)?;
    let dp = g.sub(s, r_pos)?;
    let dp = g.square(dp);
    let dp = g.sum(dp);
    let dn = g.sub(s, r_neg)?;
    let dn = g.square(dn);
    let dn = g.sum(dn);
    let diff = g.sub(dp, dn)?;
    let margin = g.constant(Tensor::scalar(cfg.margin));
    let pre = g.add(diff, margin)?;
    Ok(g.relu(pre))
}

/// Linear head over `concat(s, r, |s − r|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierHead {
    pub const WEIGHT: &'static str = "head.weight";
    pub const BIAS: &'static str = "head.bias";

    /// Registers `head.weight` (`[3·d_model]`, uniform ±1/√(3·d_model)) and
    /// a zero scalar `head.bias`.
    pub fn register(store: &mut ParamStore, d_model: usize, rng: &mut Rng) -> Result<Self, NumError> {
        let n = 3 * d_model;
        let a = 1.0 / (n as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let w = (0..n).map(|_| dist.sample(rng)).collect();
        let weight = store.add(Self::WEIGHT, Tensor::vector(w))?;
        let bias = store.add(Self::BIAS, Tensor::scalar(0.0))?;
        Ok(ClassifierHead { weight, bias })
    }

    pub fn bind(store: &ParamStore) -> Option<Self> {
        Some(ClassifierHead {
            weight: store.id(Self::WEIGHT)?,
            bias: store.id(Self::BIAS)?,
        })
    }
}

pub fn pair_features(g: &mut Graph, s: Var, r: Var) -> Result<Var, NumError> {
    check_dims(g, "pair_features", s, r)?;
    let d = g.sub(s, r)?;
    let ad = g.abs(d);
    g.concat(&[s, r, ad], 0)
}

/// `head · concat(s, r, |s − r|) + bias`, as a single-element tensor.
pub fn classifier_logit(
    g: &mut Graph,
    store: &ParamStore,
    s: Var,
    r: Var,
    head: &ClassifierHead,
) -> Result<Var, NumError> {
    let f = pair_features(g, s, r)?;
    let w = g.param(store, head.weight);
    let b = g.param(store, head.bias);
    let prod = g.mul(w, f)?;
    let dot = g.sum(prod);
    g.add(dot, b)
}

/// `−[y·log σ(z) + (1−y)·log(1−σ(z))]`, evaluated as `softplus(z) − y·z`.
pub fn bce_loss(g: &mut Graph, logit: Var, label: u8) -> Result<Var, NumError> {
    let sp = g.softplus(logit);
    if label == 1 {
        g.sub(sp, logit)
    } else {
        Ok(sp)
    }
}

/// Plain-number version of [`bce_loss`].
pub fn bce_value(logit: f64, label: u8) -> f64 {
    softplus(logit) - if label == 1 { logit } else { 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn vec_var(g: &mut Graph, v: &[f64]) -> Var {
        g.input(Tensor::vector(v.to_vec()))
    }

    fn triplet(s: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
        let mut g = Graph::new();
        let (s, p, n) = (vec_var(&mut g, s), vec_var(&mut g, p), vec_var(&mut g, n));
        let l = triplet_loss(&mut g, s, p, n, &TripletConfig { margin }).unwrap();
        g.value(l).item()
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], 1.0), 0.0);
        assert_eq!(triplet(&[0.0, 0.0], &[2.0, 0.0], &[1.0, 0.0], 1.0), 4.0);
        for s in [[0.3, -7.0], [100.0, 2.0]] {
            assert_eq!(triplet(&s, &[1.5, 2.5], &[1.5, 2.5], 0.75), 0.75);
        }
    }

    #[test]
    fn triplet_dimension_mismatch() {
        let mut g = Graph::new();
        let s = vec_var(&mut g, &[0.0, 0.0]);
        let p = vec_var(&mut g, &[0.0, 0.0, 0.0]);
        let n = vec_var(&mut g, &[0.0, 0.0]);
        assert!(matches!(
            triplet_loss(&mut g, s, p, n, &TripletConfig::default()),
            Err(NumError::Shape { op: "triplet_loss", .. })
        ));
    }

    #[test]
    fn hinge_inactive_has_zero_gradient() {
        let mut g = Graph::new();
        let s = vec_var(&mut g, &[0.0, 0.0]);
        let p = vec_var(&mut g, &[0.0, 0.0]);
        let n = vec_var(&mut g, &[1.0, 0.0]);
        // exactly on the boundary: 0 - 1 + 1 = 0
        let l = triplet_loss(&mut g, s, p, n, &TripletConfig { margin: 1.0 }).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(s).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_map() {
        let mut g = Graph::new();
        let s = vec_var(&mut g, &[1.0, 2.0]);
        let r = vec_var(&mut g, &[3.0, 1.0]);
        let f = pair_features(&mut g, s, r).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn logit_cases() {
        let mut store = ParamStore::new();
        let head = ClassifierHead::register(&mut store, 2, &mut seeded(0)).unwrap();
        // s == r: the |s - r| block contributes nothing
        let mut g = Graph::new();
        let s = vec_var(&mut g, &[0.5, -1.0]);
        let r = vec_var(&mut g, &[0.5, -1.0]);
        let z = classifier_logit(&mut g, &store, s, r, &head).unwrap();
        let w = store.value(head.weight).data();
        let expected = w[0] * 0.5 + w[1] * -1.0 + w[2] * 0.5 + w[3] * -1.0;
        assert!((g.value(z).item() - expected).abs() < 1e-15);

        store.get_mut(head.weight).value.data_mut().fill(0.0);
        store.get_mut(head.bias).value.data_mut()[0] = -0.3;
        let mut g = Graph::new();
        let s = vec_var(&mut g, &[4.0, 1.0]);
        let r = vec_var(&mut g, &[0.0, 9.0]);
        let z = classifier_logit(&mut g, &store, s, r, &head).unwrap();
        assert_eq!(g.value(z).item(), -0.3);
    }

    #[test]
    fn bce_examples() {
        assert!((bce_value(0.0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_value(50.0, 1) < 1e-21);
        assert!(bce_value(1e6, 1) == 0.0);
        // 2 + ln(1 + e^-2), evaluated independently
        let expected = 2.0 + (1.0 + (-2.0f64).exp()).ln();
        assert!((expected - 2.126928).abs() < 1e-6);
        assert!((bce_value(2.0, 0) - expected).abs() < 1e-15);

        let mut g = Graph::new();
        let z = g.input(Tensor::scalar(2.0));
        let l = bce_loss(&mut g, z, 0).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        let sig = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((grads.wrt(z).unwrap().item() - sig).abs() < 1e-15);
    }
}
