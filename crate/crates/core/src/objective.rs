//! Training objective and evaluation metrics.

use crate::error::{BicdError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the compression term.
    pub beta1: f64,
    /// Weight of the separability (auxiliary) terms.
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 1e-3,
            beta2: 0.08,
        }
    }
}

impl LossWeights {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        let w = LossWeights { beta1, beta2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(BicdError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_binary<T: Real>(y: &Tensor<T>) -> Result<()> {
    match y.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(BicdError::InvalidMask(format!("mask value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Per-class weights `(w_pos, w_neg)` for a batch mask. Falls back to
/// `(1, 1)` when only one class is present.
pub fn class_weights<T: Real>(y: &Tensor<T>) -> (f64, f64) {
    let n = y.len() as f64;
    let pos = y.data().iter().filter(|&&v| v == T::one()).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        (1.0, 1.0)
    } else {
        (neg / n, pos / n)
    }
}

/// `-log σ(x)` without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_cd_inputs<T: Real>(logits: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    logits.ensure_same_dims(y, "l_cd")?;
    if logits.is_empty() {
        return Err(BicdError::Empty("l_cd logits".into()));
    }
    check_binary(y)
}

/// Class-balanced binary cross-entropy on the single-channel logit map,
/// mean-reduced over pixels.
pub fn l_cd<T: Real>(logits: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    check_cd_inputs(logits, y)?;
    let (wp, wn) = class_weights(y);
    let s: f64 = logits
        .data()
        .iter()
        .zip(y.data())
        .map(|(&l, &t)| {
            let l = l.as_f64();
            if t == T::one() {
                wp * softplus_neg(l)
            } else {
                wn * softplus_neg(-l)
            }
        })
        .sum();
    Ok(T::of(s / logits.len() as f64))
}

/// `∂ l_cd / ∂ logits`.
pub fn l_cd_grad<T: Real>(logits: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_cd_inputs(logits, y)?;
    let (wp, wn) = class_weights(y);
    let inv = 1.0 / logits.len() as f64;
    logits.zip_map(y, |l, t| {
        let p = sigmoid(l.as_f64());
        let g = if t == T::one() { wp * (p - 1.0) } else { wn * p };
        T::of(g * inv)
    })
}

/// Mean over tensors of `‖z‖₂ / count(z)`.
pub fn l2_compression<T: Real>(z_list: &[Tensor<T>]) -> Result<T> {
    if z_list.is_empty() {
        return Err(BicdError::Empty("l2_compression input list".into()));
    }
    let mut acc = 0.0;
    for z in z_list {
        if z.is_empty() {
            return Err(BicdError::Empty("l2_compression tensor".into()));
        }
        acc += z.sum_sq().as_f64().sqrt() / z.len() as f64;
    }
    Ok(T::of(acc / z_list.len() as f64))
}

/// `∂ l2_compression / ∂ z_i` for each tensor; zero where the norm is zero.
pub fn l2_compression_grad<T: Real>(z_list: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if z_list.is_empty() {
        return Err(BicdError::Empty("l2_compression input list".into()));
    }
    let k = z_list.len() as f64;
    Ok(z_list
        .iter()
        .map(|z| {
            let norm = z.sum_sq().as_f64().sqrt();
            if norm == 0.0 {
                Tensor::zeros_like(z)
            } else {
                let c = 1.0 / (k * z.len() as f64 * norm);
                z.map(|v| T::of(v.as_f64() * c))
            }
        })
        .collect())
}

/// `β₁·l2 + l_cd + β₂·(l_noise + l_recon + l_interest)`.
pub fn total_objective(l_cd: f64, l2: f64, psi: (f64, f64, f64), w: LossWeights) -> Result<f64> {
    let (l_noise, l_interest, l_recon) = psi;
    for (name, v) in [
        ("l_cd", l_cd),
        ("l2", l2),
        ("l_noise", l_noise),
        ("l_interest", l_interest),
        ("l_recon", l_recon),
    ] {
        if !v.is_finite() {
            return Err(BicdError::NonFinite(format!("{name} = {v}")));
        }
    }
    w.validate()?;
    Ok(w.beta1 * l2 + l_cd + w.beta2 * (l_noise + l_recon + l_interest))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Count pixels with prediction `logit > 0` against the binary mask.
    pub fn from_logits<T: Real>(logits: &Tensor<T>, y: &Tensor<T>) -> Result<Self> {
        logits.ensure_same_dims(y, "confusion")?;
        check_binary(y)?;
        let mut c = Confusion::default();
        for (&l, &t) in logits.data().iter().zip(y.data()) {
            match (l > T::zero(), t == T::one()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1 {
    pub value: f64,
    /// Set when neither truth nor prediction contains a change pixel.
    pub degenerate: bool,
}

pub fn f1_score(c: &Confusion) -> F1 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        F1 {
            value: 1.0,
            degenerate: true,
        }
    } else {
        F1 {
            value: 2.0 * c.tp as f64 / denom as f64,
            degenerate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let y = t(&[1., 0., 1., 0.]);
        let l = t(&[20., -20., 20., -20.]);
        assert!(l_cd(&l, &y).unwrap() < 1e-6);
    }

    #[test]
    fn single_class_mask_falls_back_to_unweighted() {
        let y = t(&[1., 1.]);
        let l = t(&[0., 0.]);
        assert!((l_cd(&l, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn hand_case_2x2() {
        let y = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 0., 0., 0.]).unwrap();
        let l = Tensor::from_vec(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        // w_pos = 3/4, w_neg = 1/4
        let sp = |x: f64| (1.0 + x.exp()).ln();
        let want = (0.75 * sp(-0.5) + 0.25 * (sp(-1.0) + sp(2.0) + sp(0.0))) / 4.0;
        assert!((l_cd(&l, &y).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn l_cd_rejects_bad_inputs() {
        assert!(matches!(l_cd(&t(&[0.]), &t(&[0.5])), Err(BicdError::InvalidMask(_))));
        assert!(l_cd(&t(&[0., 1.]), &t(&[0.])).is_err());
        let e = Tensor::<f64>::zeros(&[0]);
        assert!(matches!(l_cd(&e, &e), Err(BicdError::Empty(_))));
    }

    #[test]
    fn l2_cases() {
        let z = Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap();
        assert_eq!(l2_compression(&[z]).unwrap(), 2.5);
        assert_eq!(l2_compression(&[Tensor::<f64>::zeros(&[5])]).unwrap(), 0.0);
        assert!(l2_compression::<f64>(&[]).is_err());
    }

    #[test]
    fn total_cases() {
        let w0 = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(total_objective(0.731, 5.0, (1.0, 2.0, 3.0), w0).unwrap(), 0.731);
        let v = total_objective(1.0, 2.0, (1.0, 1.0, 1.0), LossWeights::default()).unwrap();
        assert!((v - 1.242).abs() < 1e-12);
        assert!(total_objective(f64::NAN, 0.0, (0.0, 0.0, 0.0), w0).is_err());
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn f1_cases() {
        let c = |tp, fp, fn_| Confusion { tp, fp, fn_, tn: 0 };
        assert_eq!(f1_score(&c(2, 0, 0)).value, 1.0);
        assert_eq!(f1_score(&c(0, 0, 4)).value, 0.0);
        assert!((f1_score(&c(3, 1, 2)).value - 6.0 / 9.0).abs() < 1e-15);
        let d = f1_score(&c(0, 0, 0));
        assert!(d.degenerate && d.value == 1.0);
    }

    #[test]
    fn confusion_counts() {
        let y = t(&[1., 1., 0., 0.]);
        let l = t(&[1., -1., 1., 0.]);
        let c = Confusion::from_logits(&l, &y).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
    }

    #[test]
    fn l_cd_grad_matches_finite_difference() {
        let y = t(&[1., 0., 0., 1., 0.]);
        let l = t(&[0.3, -1.2, 2.0, -0.7, 0.1]);
        let g = l_cd_grad(&l, &y).unwrap();
        for i in 0..5 {
            let h = 1e-6;
            let mut lp = l.clone();
            lp.data_mut()[i] += h;
            let mut lm = l.clone();
            lm.data_mut()[i] -= h;
            let fd = (l_cd(&lp, &y).unwrap() - l_cd(&lm, &y).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_grad_matches_finite_difference() {
        let zs = vec![t(&[0.3, -1.2, 2.0]), t(&[0.5, 0.25])];
        let g = l2_compression_grad(&zs).unwrap();
        for k in 0..2 {
            for i in 0..zs[k].len() {
                let h = 1e-6;
                let mut p = zs.clone();
                p[k].data_mut()[i] += h;
                let mut m = zs.clone();
                m[k].data_mut()[i] -= h;
                let fd = (l2_compression(&p).unwrap() - l2_compression(&m).unwrap()) / (2.0 * h);
                assert!((fd - g[k].data()[i]).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn beta2_monotone(l in 0.0f64..5.0, l2 in 0.0f64..5.0, a in 0.01f64..2.0, b in 0.0f64..2.0,
                          c in 0.0f64..2.0, lo in 0.0f64..1.0, d in 0.001f64..1.0) {
            let t0 = total_objective(l, l2, (a, b, c), LossWeights::new(1e-3, lo).unwrap()).unwrap();
            let t1 = total_objective(l, l2, (a, b, c), LossWeights::new(1e-3, lo + d).unwrap()).unwrap();
            prop_assert!(t1 > t0);
        }

        #[test]
        fn f1_ignores_tn(tp in 0u64..100, fp in 0u64..100, fn_ in 0u64..100, tn in 0u64..1000) {
            let a = f1_score(&Confusion { tp, fp, fn_, tn: 0 });
            let b = f1_score(&Confusion { tp, fp, fn_, tn });
            prop_assert_eq!(a, b);
        }

        #[test]
        fn l_cd_monotone_toward_truth(y in proptest::collection::vec(0u8..2, 1..20), s0 in 0.0f64..3.0, ds in 0.01f64..3.0) {
            let yt = t(&y.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let at = |s: f64| yt.map(|v| if v == 1.0 { s } else { -s });
            let a = l_cd(&at(s0), &yt).unwrap();
            let b = l_cd(&at(s0 + ds), &yt).unwrap();
            prop_assert!(b < a);
        }
    }
}
