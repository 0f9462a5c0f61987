//! Mask R-CNN objective: `total = rpn + faster_rcnn + mask`.

use candle_core::{Result as CandleResult, Tensor};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::mask::{BinaryMask, ProbMap};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

/// The three branch losses of one step. `total` is always their plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rpn: f64,
    pub l_faster_rcnn: f64,
    pub l_mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_rpn: f64, l_faster_rcnn: f64, l_mask: f64) -> Self {
        Self {
            l_rpn,
            l_faster_rcnn,
            l_mask,
            total: l_rpn + l_faster_rcnn + l_mask,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_rpn, self.l_faster_rcnn, self.l_mask, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Individual loss terms before they are grouped per branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub classifier: f64,
    pub box_reg: f64,
    pub mask: f64,
}

impl LossTerms {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown::new(
            self.rpn_objectness + self.rpn_box,
            self.classifier + self.box_reg,
            self.mask,
        )
    }
}

/// Sum of the three branch losses; fails if any term is NaN or infinite.
pub fn total_loss(parts: &LossBreakdown) -> Result<f64, ModelError> {
    let terms = [parts.l_rpn, parts.l_faster_rcnn, parts.l_mask];
    if terms.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteLoss(format!(
            "rpn={} faster_rcnn={} mask={}",
            parts.l_rpn, parts.l_faster_rcnn, parts.l_mask
        )));
    }
    Ok(terms[0] + terms[1] + terms[2])
}

/// Mean per-pixel binary cross entropy between predicted probabilities and a binary target.
pub fn mask_bce_loss(pred: &ProbMap, target: &BinaryMask) -> Result<f64, ModelError> {
    if (pred.height(), pred.width()) != target.shape() {
        return Err(ModelError::ShapeMismatch {
            expected: vec![target.height(), target.width()],
            actual: vec![pred.height(), pred.width()],
        });
    }
    let n = pred.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| {
            let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / n as f64)
}

/// Tensor form of [`mask_bce_loss`] on logits, averaged over every element.
pub(crate) fn bce_on_logits(logits: &Tensor, targets: &Tensor) -> CandleResult<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = targets.mul(&p.log()?)?;
    let neg = (1.0 - targets)?.mul(&(1.0 - &p)?.log()?)?;
    pos.add(&neg)?.mean_all()?.neg()
}

/// Smooth L1 with transition at `beta`, summed over all elements.
pub(crate) fn smooth_l1_sum(pred: &Tensor, target: &Tensor, beta: f64) -> CandleResult<Tensor> {
    let d = pred.sub(target)?.abs()?;
    let quad = (d.sqr()? * (0.5 / beta))?;
    let lin = (&d - 0.5 * beta)?;
    d.lt(beta)?.where_cond(&quad, &lin)?.sum_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn total_is_sum() {
        assert_eq!(total_loss(&LossBreakdown::new(0.0, 0.0, 0.0)).unwrap(), 0.0);
        let t = total_loss(&LossBreakdown::new(0.1, 0.05, 0.05)).unwrap();
        assert!((t - 0.2).abs() < 1e-12);
        assert!(matches!(
            total_loss(&LossBreakdown::new(f64::NAN, 0.0, 0.0)),
            Err(ModelError::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn bce_perfect_and_uniform() {
        let target = BinaryMask::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
        let exact = ProbMap::from_mask(&target);
        assert!(mask_bce_loss(&exact, &target).unwrap() <= 1e-6);
        let half = ProbMap::constant(4, 4, 0.5);
        assert!((mask_bce_loss(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(mask_bce_loss(&ProbMap::zeros(3, 4), &target).is_err());
    }

    #[test]
    fn tensor_bce_matches_scalar() {
        let logits = [-3.0f32, -0.5, 0.0, 0.25, 1.0, 4.0];
        let targets = [0.0f32, 1.0, 1.0, 0.0, 1.0, 1.0];
        let dev = Device::Cpu;
        let l = Tensor::new(&logits, &dev).unwrap();
        let t = Tensor::new(&targets, &dev).unwrap();
        let got = bce_on_logits(&l, &t).unwrap().to_scalar::<f32>().unwrap() as f64;
        let probs: Vec<f32> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let pm = ProbMap::from_vec(6, 1, probs).unwrap();
        let tm = BinaryMask::from_vec(6, 1, targets.iter().map(|&t| t > 0.5).collect()).unwrap();
        let want = mask_bce_loss(&pm, &tm).unwrap();
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn smooth_l1_piecewise() {
        let dev = Device::Cpu;
        let p = Tensor::new(&[0.0f32, 0.05, 2.0], &dev).unwrap();
        let z = Tensor::zeros(3, candle_core::DType::F32, &dev).unwrap();
        let beta = 1.0 / 9.0;
        let got = smooth_l1_sum(&p, &z, beta).unwrap().to_scalar::<f32>().unwrap() as f64;
        let want = 0.0 + 0.5 * 0.05f64.powi(2) / beta + (2.0 - 0.5 * beta);
        assert!((got - want).abs() < 1e-5);
    }
}
