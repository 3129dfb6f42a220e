//! Pixel-wise classification loss, stop-gradient distillation loss and
//! their weighted total.

use crate::error::{Error, Result};
use crate::masking::PixelMask;
use crate::model::PredMask;

/// A loss value and its gradient with respect to the (student) prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight on the supervised loss; the distillation loss gets `1 - lambda`.
    pub lambda: f64,
    /// Two-term binary cross-entropy when true, the single positive term
    /// `-(1/N) Σ y log p` when false.
    pub full_bce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            full_bce: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

fn cross_entropy(pred: &PredMask, target: &[f64], full_bce: bool) -> LossValue {
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    let rows = pred.probs().iter().zip(pred.log_probs()).zip(pred.log_complements()).zip(target);
    for (((&p, &lp), &lq), &t) in rows {
        if full_bce {
            value -= t * lp + (1.0 - t) * lq;
            grad.push((p - t) / (p * (1.0 - p)) / n);
        } else {
            value -= t * lp;
            grad.push(-(t / p) / n);
        }
    }
    LossValue { value: value / n, grad }
}

fn check_dims(a: &PredMask, h: usize, w: usize) -> Result<()> {
    if a.height() != h || a.width() != w {
        return Err(Error::invalid(format!(
            "prediction {}x{} does not match target {h}x{w}",
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Cross-entropy of `pred` against a binary ground-truth mask.
pub fn bce_loss(pred: &PredMask, target: &PixelMask, full_bce: bool) -> Result<LossValue> {
    check_dims(pred, target.height(), target.width())?;
    let t: Vec<f64> = target.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(cross_entropy(pred, &t, full_bce))
}

/// Cross-entropy of `pred` against soft targets.
pub fn soft_bce_loss(pred: &PredMask, target: &PredMask, full_bce: bool) -> Result<LossValue> {
    check_dims(pred, target.height(), target.width())?;
    Ok(cross_entropy(pred, target.probs(), full_bce))
}

/// Distillation of the masked-input prediction (`student`) toward the
/// clean-input prediction (`teacher`). The teacher's probabilities are read
/// as plain numbers: the returned gradient is with respect to the student
/// only, and nothing in it refers back to the teacher's computation.
pub fn distill_loss(teacher: &PredMask, student: &PredMask, full_bce: bool) -> Result<LossValue> {
    let frozen = teacher.clone();
    soft_bce_loss(student, &frozen, full_bce)
}

/// Weighted objective over the two paths. `clean_grad` is the gradient for
/// the clean-input prediction and `masked_grad` for the masked-input one.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub clean_grad: Vec<f64>,
    pub masked_grad: Vec<f64>,
}

/// `lambda · ce + (1 - lambda) · dist`, with each path's gradient scaled by
/// the same weight.
pub fn total_loss(ce: &LossValue, dist: &LossValue, cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    let lam = cfg.lambda;
    let rest = 1.0 - lam;
    Ok(TotalLoss {
        value: lam * ce.value + rest * dist.value,
        clean_grad: ce.grad.iter().map(|g| lam * g).collect(),
        masked_grad: dist.grad.iter().map(|g| rest * g).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(v: Vec<f64>) -> PredMask {
        let n = v.len();
        PredMask::new(1, n, v).unwrap()
    }

    #[test]
    fn half_probability_costs_ln2() {
        let pred = PredMask::filled(4, 4, 0.5).unwrap();
        let mut y = PixelMask::empty(4, 4);
        y.set(1, 1, true);
        y.set(2, 3, true);
        let l = bce_loss(&pred, &y, true).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn near_perfect_prediction_costs_little() {
        let y = PixelMask::from_bits(1, 2, vec![true, false]).unwrap();
        let eps = 1e-12;
        let l = bce_loss(&pm(vec![1.0 - eps, eps]), &y, true).unwrap();
        assert!(l.value < 1e-11);
    }

    #[test]
    fn single_term_form_ignores_background() {
        let y = PixelMask::from_bits(1, 2, vec![true, false]).unwrap();
        let l = bce_loss(&pm(vec![0.25, 0.9]), &y, false).unwrap();
        assert!((l.value - (-(0.25f64).ln() / 2.0)).abs() < 1e-15);
        assert_eq!(l.grad[1], 0.0);
    }

    #[test]
    fn gradient_sign_follows_residual() {
        let y = PixelMask::from_bits(1, 4, vec![true, false, true, false]).unwrap();
        let p = vec![0.3, 0.3, 0.8, 0.9];
        let l = bce_loss(&pm(p.clone()), &y, true).unwrap();
        for (i, g) in l.grad.iter().enumerate() {
            let r = p[i] - if y.bits()[i] { 1.0 } else { 0.0 };
            assert_eq!(g.signum(), r.signum());
        }
    }

    #[test]
    fn distill_at_equal_predictions() {
        let t = PredMask::filled(2, 2, 0.5).unwrap();
        let l = distill_loss(&t, &t, true).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        let t = pm(vec![0.1, 0.7, 0.95]);
        let l = distill_loss(&t, &t, true).unwrap();
        let entropy: f64 = t.probs().iter().map(|p| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())).sum::<f64>() / 3.0;
        assert!((l.value - entropy).abs() < 1e-15);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn distill_limit_is_large() {
        let eps = 1e-9;
        let l = distill_loss(&pm(vec![1.0 - eps]), &pm(vec![eps]), true).unwrap();
        assert!((l.value - -(eps.ln())).abs() / -(eps.ln()) < 1e-6);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = PredMask::filled(2, 2, 0.5).unwrap();
        let b = PredMask::filled(2, 3, 0.5).unwrap();
        assert!(distill_loss(&a, &b, true).is_err());
        assert!(bce_loss(&a, &PixelMask::empty(3, 2), true).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::RngStream::new(3, "losses-fd");
        let probs: Vec<f64> = (0..64).map(|_| 0.05 + 0.9 * rng.uniform()).collect();
        let teacher = PredMask::new(8, 8, (0..64).map(|_| 0.05 + 0.9 * rng.uniform()).collect()).unwrap();
        let bits: Vec<bool> = (0..64).map(|_| rng.uniform() < 0.4).collect();
        let y = PixelMask::from_bits(8, 8, bits).unwrap();
        let h = 1e-6;
        for full in [true, false] {
            let eval = |p: Vec<f64>| -> (LossValue, LossValue) {
                let s = PredMask::new(8, 8, p).unwrap();
                (bce_loss(&s, &y, full).unwrap(), distill_loss(&teacher, &s, full).unwrap())
            };
            let (ce, dist) = eval(probs.clone());
            for i in 0..64 {
                let mut up = probs.clone();
                let mut dn = probs.clone();
                up[i] += h;
                dn[i] -= h;
                let ((cu, du), (cd, dd)) = (eval(up), eval(dn));
                let fd_ce = (cu.value - cd.value) / (2.0 * h);
                let fd_dist = (du.value - dd.value) / (2.0 * h);
                for (a, n) in [(ce.grad[i], fd_ce), (dist.grad[i], fd_dist)] {
                    let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                    assert!(err < 1e-6, "pixel {i} full={full}: {a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn total_loss_weights() {
        let ce = LossValue { value: 0.8, grad: vec![1.0, -2.0] };
        let dist = LossValue { value: 0.3, grad: vec![0.5, 0.25] };
        let one = total_loss(&ce, &dist, &LossConfig { lambda: 1.0, full_bce: true }).unwrap();
        assert_eq!(one.value, ce.value);
        assert_eq!(one.clean_grad, ce.grad);
        assert!(one.masked_grad.iter().all(|&g| g == 0.0));
        let half = total_loss(&ce, &dist, &LossConfig::default()).unwrap();
        assert_eq!(half.value, (0.8 + 0.3) / 2.0);
        let zero = total_loss(&ce, &dist, &LossConfig { lambda: 0.0, full_bce: true }).unwrap();
        assert_eq!(zero.value, dist.value);
        assert_eq!(zero.masked_grad, dist.grad);
        assert!(total_loss(&ce, &dist, &LossConfig { lambda: 1.5, full_bce: true }).is_err());
    }
}
