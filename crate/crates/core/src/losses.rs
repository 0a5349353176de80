//! Reconstruction, cross-modality transform, adversarial and triplet losses,
//! and their weighted total.
//!
//! Value-level functions operate on plain slices; the `*_node` variants build
//! the same quantities on an autograd [`Graph`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{log_sum_exp, Graph, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss term {term}")]
    NonFinite { term: &'static str },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// Weights of the seven loss terms, plus the triplet sampling size and margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Adversarial pair of direction 1 (discriminator on generated M1).
    pub gamma1: f64,
    /// Transform into M1.
    pub gamma2: f64,
    /// Reconstruction of M1.
    pub gamma3: f64,
    /// Reconstruction of M2.
    pub gamma4: f64,
    /// Transform into M2.
    pub gamma5: f64,
    /// Adversarial pair of direction 2 (discriminator on generated M2).
    pub gamma6: f64,
    pub gamma7: f64,
    /// Triplets per batch.
    pub k: usize,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma1: 0.01,
            gamma2: 0.001,
            gamma3: 0.001,
            gamma4: 0.001,
            gamma5: 0.001,
            gamma6: 0.01,
            gamma7: 1.0,
            k: 5,
            alpha: 1.0,
        }
    }
}

impl LossWeights {
    /// Only the triplet term active.
    pub fn triplet_only() -> Self {
        Self { gamma1: 0.0, gamma2: 0.0, gamma3: 0.0, gamma4: 0.0, gamma5: 0.0, gamma6: 0.0, ..Self::default() }
    }

    pub fn gammas(&self) -> [f64; 7] {
        [self.gamma1, self.gamma2, self.gamma3, self.gamma4, self.gamma5, self.gamma6, self.gamma7]
    }

    /// Whether any reconstruction, transform or adversarial term has weight.
    pub fn uses_translation(&self) -> bool {
        self.gammas()[..6].iter().any(|&g| g > 0.0)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::InvalidWeights(m));
        if let Some(g) = self.gammas().iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return bad(format!("weight {g} is not a nonnegative number"));
        }
        if self.gamma7 <= 0.0 {
            return bad("the triplet weight must be positive".into());
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("margin {}", self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvTerms {
    pub disc_loss: f64,
    pub gen_loss: f64,
}

/// Every loss component of one step and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec_1: f64,
    pub rec_2: f64,
    /// Transform loss `G1(E2(M2))` against `M1`.
    pub cross_12: f64,
    /// Transform loss `G2(E1(M1))` against `M2`.
    pub cross_21: f64,
    /// Per discriminator: index 0 is D1, index 1 is D2.
    pub adv: [AdvTerms; 2],
    pub triplet: f64,
    pub total: f64,
}

impl LossReport {
    fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("rec_1", self.rec_1),
            ("rec_2", self.rec_2),
            ("cross_12", self.cross_12),
            ("cross_21", self.cross_21),
            ("disc_1", self.adv[0].disc_loss + self.adv[0].gen_loss),
            ("disc_2", self.adv[1].disc_loss + self.adv[1].gen_loss),
            ("triplet", self.triplet),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite component.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.rec_1 += r.rec_1 / n;
            m.rec_2 += r.rec_2 / n;
            m.cross_12 += r.cross_12 / n;
            m.cross_21 += r.cross_21 / n;
            for i in 0..2 {
                m.adv[i].disc_loss += r.adv[i].disc_loss / n;
                m.adv[i].gen_loss += r.adv[i].gen_loss / n;
            }
            m.triplet += r.triplet / n;
            m.total += r.total / n;
        }
        m
    }
}

/// The weighted combination of the components of `r` (its `total` field is ignored).
pub fn total_loss(r: &LossReport, w: &LossWeights) -> Result<f64, LossError> {
    let mut probe = *r;
    probe.total = 0.0;
    if let Some(term) = probe.non_finite_term() {
        return Err(LossError::NonFinite { term });
    }
    let [d1, d2] = r.adv;
    Ok(w.gamma1 * (d1.disc_loss + d1.gen_loss)
        + w.gamma6 * (d2.disc_loss + d2.gen_loss)
        + w.gamma2 * r.cross_12
        + w.gamma5 * r.cross_21
        + w.gamma3 * r.rec_1
        + w.gamma4 * r.rec_2
        + w.gamma7 * r.triplet)
}

fn same_len(a: usize, b: usize) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!("{a} vs {b}")))
    }
}

/// Mean absolute error.
pub fn rec_loss(reconstruction: &[f64], target: &[f64]) -> Result<f64, LossError> {
    same_len(reconstruction.len(), target.len())?;
    if target.is_empty() {
        return Err(LossError::ShapeMismatch("empty input".into()));
    }
    let s: f64 = reconstruction.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / target.len() as f64)
}

/// Mean absolute error between a transformed spectrum and the other modality's target.
pub fn cross_loss(transformed: &[f64], target_other_modality: &[f64]) -> Result<f64, LossError> {
    rec_loss(transformed, target_other_modality)
}

/// `-log P(real)` from two logits, index 1 being "real".
fn neg_log_real(l: &[f64; 2]) -> f64 {
    log_sum_exp(l) - l[1]
}

fn neg_log_fake(l: &[f64; 2]) -> f64 {
    log_sum_exp(l) - l[0]
}

fn batch_mean(logits: &[[f64; 2]], f: fn(&[f64; 2]) -> f64) -> Result<f64, LossError> {
    if logits.is_empty() {
        return Err(LossError::ShapeMismatch("empty logit batch".into()));
    }
    Ok(logits.iter().map(f).sum::<f64>() / logits.len() as f64)
}

/// `-[log D(real) + log(1 - D(fake))]`, averaged over the batch.
pub fn adv_disc_loss(real_logits: &[[f64; 2]], fake_logits: &[[f64; 2]]) -> Result<f64, LossError> {
    let v = batch_mean(real_logits, neg_log_real)? + batch_mean(fake_logits, neg_log_fake)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite { term: "adv_disc" })
    }
}

/// Non-saturating generator loss `-log D(fake)`, averaged over the batch.
pub fn adv_gen_loss(fake_logits: &[[f64; 2]]) -> Result<f64, LossError> {
    let v = batch_mean(fake_logits, neg_log_real)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite { term: "adv_gen" })
    }
}

/// `Σ_k max(‖a−p‖² − ‖a−n‖² + α, 0)`.
pub fn triplet_loss<V: AsRef<[f64]>>(anchor: &[V], positive: &[V], negative: &[V], alpha: f64) -> Result<f64, LossError> {
    same_len(anchor.len(), positive.len())?;
    same_len(anchor.len(), negative.len())?;
    if anchor.is_empty() {
        return Err(LossError::ShapeMismatch("no triplets".into()));
    }
    let d2 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut total = 0.0;
    for ((a, p), n) in anchor.iter().zip(positive).zip(negative) {
        let (a, p, n) = (a.as_ref(), p.as_ref(), n.as_ref());
        same_len(a.len(), p.len())?;
        same_len(a.len(), n.len())?;
        total += (d2(a, p) - d2(a, n) + alpha).max(0.0);
    }
    Ok(total)
}

/// [`rec_loss`] on `[1, n, L]` nodes, averaged over all elements.
pub fn rec_loss_node(g: &mut Graph, reconstruction: Var, target: Var) -> Var {
    g.l1_mean(reconstruction, target)
}

/// [`adv_disc_loss`] on `[n, 2]` logit nodes.
pub fn adv_disc_loss_node(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Var {
    let r = g.cross_entropy(real_logits, 1);
    let f = g.cross_entropy(fake_logits, 0);
    g.weighted_sum(&[(r, 1.0), (f, 1.0)])
}

/// [`adv_gen_loss`] on an `[n, 2]` logit node.
pub fn adv_gen_loss_node(g: &mut Graph, fake_logits: Var) -> Var {
    g.cross_entropy(fake_logits, 1)
}

/// [`triplet_loss`] on `[k, d]` embedding nodes.
pub fn triplet_loss_node(g: &mut Graph, anchor: Var, positive: Var, negative: Var, alpha: f64) -> Var {
    g.triplet(anchor, positive, negative, alpha)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::gradcheck::check;
    use crate::tensor::Tensor;

    #[test]
    fn l1_examples() {
        assert_eq!(rec_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(rec_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cross_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(rec_loss(&[1.0], &[1.0, 2.0]), Err(LossError::ShapeMismatch(_))));
    }

    #[test]
    fn adversarial_examples() {
        let gen = adv_gen_loss(&[[0.3, 0.3]]).unwrap();
        assert!((gen - 0.6931).abs() < 1e-4);
        assert!((gen - std::f64::consts::LN_2).abs() < 1e-15);
        // confident, correct discriminator
        let d = adv_disc_loss(&[[-5.0, 5.0]], &[[5.0, -5.0]]).unwrap();
        assert!(d > 0.0 && d < 1e-4);
        // extreme logits stay finite
        assert!(adv_gen_loss(&[[800.0, -800.0]]).unwrap().is_finite());
    }

    #[test]
    fn triplet_examples() {
        let v = triplet_loss(&[[0.0]], &[[1.0]], &[[0.5]], 1.0).unwrap();
        assert_eq!(v, 1.75);
        assert_eq!(triplet_loss(&[[0.0, 0.0]], &[[0.0, 0.0]], &[[1.0, 1.0]], 1.0).unwrap(), 0.0);
        let a = [vec![0.1, 0.2], vec![0.5, -1.0]];
        let p = [vec![0.3, 0.0], vec![0.2, 0.2]];
        let n = [vec![0.1, 0.9], vec![0.5, -0.5]];
        let sum: f64 = (0..2).map(|i| triplet_loss(&a[i..=i], &p[i..=i], &n[i..=i], 0.7).unwrap()).sum();
        assert_eq!(triplet_loss(&a, &p, &n, 0.7).unwrap(), sum);
    }

    fn sample_report(seed: u64) -> LossReport {
        let mut r = crate::rng::stream(seed, "loss-report", 0);
        use rand::Rng as _;
        let mut u = || r.random_range(0.0..3.0);
        LossReport {
            rec_1: u(),
            rec_2: u(),
            cross_12: u(),
            cross_21: u(),
            adv: [AdvTerms { disc_loss: u(), gen_loss: u() }, AdvTerms { disc_loss: u(), gen_loss: u() }],
            triplet: u(),
            total: 0.0,
        }
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossReport::default(), &w).unwrap(), 0.0);
        let r = sample_report(1);
        assert_eq!(total_loss(&r, &LossWeights::triplet_only()).unwrap(), r.triplet);
        // hand-expanded weighted sum with the default weights
        let expect = 0.01 * (r.adv[0].disc_loss + r.adv[0].gen_loss + r.adv[1].disc_loss + r.adv[1].gen_loss)
            + 0.001 * (r.cross_12 + r.cross_21 + r.rec_1 + r.rec_2)
            + r.triplet;
        assert!((total_loss(&r, &w).unwrap() - expect).abs() < 1e-12);
        let bad = LossReport { cross_21: f64::NAN, ..r };
        assert_eq!(total_loss(&bad, &w), Err(LossError::NonFinite { term: "cross_21" }));
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { gamma7: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma3: -0.1, ..Default::default() }.validate().is_err());
        assert!(!LossWeights::triplet_only().uses_translation());
    }

    proptest! {
        #[test]
        fn l1_is_nonnegative_and_zero_iff_equal(
            a in proptest::collection::vec(-5.0f64..5.0, 1..32),
            shift in proptest::collection::vec(-1.0f64..1.0, 32),
        ) {
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let v = rec_loss(&a, &b).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, a == b);
            let brute = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            prop_assert!((v - brute).abs() < 1e-12);
        }

        #[test]
        fn triplet_is_nonnegative_and_monotone_in_margin(
            seed in 0u64..1000, alpha in 0.0f64..3.0, extra in 0.0f64..3.0,
        ) {
            use rand::Rng as _;
            let mut r = crate::rng::stream(seed, "triplet-prop", 0);
            let mut v = |n: usize| (0..n).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect::<Vec<_>>();
            let (a, p, n) = (v(4), v(4), v(4));
            let lo = triplet_loss(&a, &p, &n, alpha).unwrap();
            let hi = triplet_loss(&a, &p, &n, alpha + extra).unwrap();
            prop_assert!(lo >= 0.0);
            prop_assert!(hi >= lo);
        }

        #[test]
        fn total_is_linear_in_each_weight(seed in 0u64..1000, i in 0usize..7, t in 0.0f64..2.0) {
            let r = sample_report(seed);
            let at = |g: f64| {
                let mut w = LossWeights::default();
                match i {
                    0 => w.gamma1 = g,
                    1 => w.gamma2 = g,
                    2 => w.gamma3 = g,
                    3 => w.gamma4 = g,
                    4 => w.gamma5 = g,
                    5 => w.gamma6 = g,
                    _ => w.gamma7 = g,
                }
                total_loss(&r, &w).unwrap()
            };
            let (f0, f1, ft) = (at(0.0), at(1.0), at(t));
            prop_assert!((ft - (f0 + t * (f1 - f0))).abs() < 1e-9);
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = crate::rng::stream(seed, "loss-grad", 0);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn node_values_match_value_functions() {
        let (a, b) = (randn(&[1, 3, 5], 1), randn(&[1, 3, 5], 2));
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let l = rec_loss_node(&mut g, va, vb);
        assert!((g.value(l).item() - rec_loss(a.data(), b.data()).unwrap()).abs() < 1e-15);

        let (real, fake) = (randn(&[4, 2], 3), randn(&[4, 2], 4));
        let pairs = |t: &Tensor| t.data().chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
        let (vr, vf) = (g.input(real.clone()), g.input(fake.clone()));
        let d = adv_disc_loss_node(&mut g, vr, vf);
        let gl = adv_gen_loss_node(&mut g, vf);
        assert!((g.value(d).item() - adv_disc_loss(&pairs(&real), &pairs(&fake)).unwrap()).abs() < 1e-14);
        assert!((g.value(gl).item() - adv_gen_loss(&pairs(&fake)).unwrap()).abs() < 1e-14);

        let t = [randn(&[3, 4], 5), randn(&[3, 4], 6), randn(&[3, 4], 7)];
        let rows = |t: &Tensor| t.data().chunks(4).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let vs: Vec<Var> = t.iter().map(|x| g.input(x.clone())).collect();
        let tl = triplet_loss_node(&mut g, vs[0], vs[1], vs[2], 0.5);
        let expect = triplet_loss(&rows(&t[0]), &rows(&t[1]), &rows(&t[2]), 0.5).unwrap();
        assert!((g.value(tl).item() - expect).abs() < 1e-13);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let pair = [randn(&[1, 2, 6], 8), randn(&[1, 2, 6], 9)];
        assert_eq!(check(&pair, 100, 0, |g, v| rec_loss_node(g, v[0], v[1])).failures, 0);
        let logits = [randn(&[3, 2], 10), randn(&[3, 2], 11)];
        assert_eq!(check(&logits, 100, 0, |g, v| adv_disc_loss_node(g, v[0], v[1])).failures, 0);
        assert_eq!(check(&logits[1..], 100, 0, |g, v| adv_gen_loss_node(g, v[0])).failures, 0);
        let trip = [randn(&[4, 3], 12), randn(&[4, 3], 13), randn(&[4, 3], 14)];
        assert_eq!(check(&trip, 100, 0, |g, v| triplet_loss_node(g, v[0], v[1], v[2], 1.0)).failures, 0);
    }
}
