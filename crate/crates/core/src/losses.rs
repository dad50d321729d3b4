//! Training losses on the tape.
//!
//! Predictions are tape vars; targets are plain tensors. Every probability is
//! clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before a log. Region losses use
//! smoothing `1` so empty masks are well defined.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;
pub const SMOOTH: f64 = 1.0;

/// Which total-loss form to optimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `mask + cls + lambda_iou * iou`.
    #[default]
    Sum,
    /// `lambda_damage * CE + lambda_fake * BCE + lambda_part * CE + lambda_mask * iou`.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub form: LossForm,
    pub dice: f64,
    pub bce: f64,
    pub iou: f64,
    pub damage: f64,
    pub fake: f64,
    pub part: f64,
    pub mask: f64,
    /// Weight of the per-query domain CE (including the no-object slot).
    pub domain: f64,
    /// Relative weight of queries whose domain target is the no-object slot.
    pub none_weight: f64,
    pub focal_gamma: f64,
    /// `None` disables alpha balancing.
    pub focal_alpha: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            form: LossForm::Sum,
            dice: 1.0,
            bce: 1.0,
            iou: 1.0,
            damage: 1.0,
            fake: 1.0,
            part: 1.0,
            mask: 1.0,
            domain: 1.0,
            none_weight: 0.1,
            focal_gamma: 2.0,
            focal_alpha: Some(0.25),
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            dice: 0.0,
            bce: 0.0,
            iou: 0.0,
            damage: 0.0,
            fake: 0.0,
            part: 0.0,
            mask: 0.0,
            domain: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dice,
            self.bce,
            self.iou,
            self.damage,
            self.fake,
            self.part,
            self.mask,
            self.domain,
            self.none_weight,
            self.focal_gamma,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(
                "loss weights, none_weight and focal_gamma must be finite and >= 0".into(),
            ));
        }
        if let Some(a) = self.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("focal_alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn check_same(op: &'static str, tape: &Tape, pred: Var, gt: &Tensor) -> Result<()> {
    if tape.value(pred).len() != gt.len() {
        return Err(Error::shape(op, tape.shape(pred), gt.shape()));
    }
    Ok(())
}

fn constant_like(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    Ok(tape.constant(Tensor::new(shape, gt.data().to_vec())?))
}

fn clamp_prob(tape: &mut Tape, p: Var) -> Var {
    tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `1 - (2 sum(p g) + s) / (sum p + sum g + s)`.
pub fn dice_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    check_same("dice_loss", tape, pred, gt)?;
    let g = constant_like(tape, pred, gt)?;
    let pg = tape.mul(pred, g)?;
    let inter = tape.sum(pg);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, SMOOTH);
    let sp = tape.sum(pred);
    let den = tape.add_scalar(sp, gt.sum() + SMOOTH);
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `1 - (sum(p g) + s) / (sum(p + g - p g) + s)`.
pub fn soft_iou_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    check_same("soft_iou_loss", tape, pred, gt)?;
    let g = constant_like(tape, pred, gt)?;
    let pg = tape.mul(pred, g)?;
    let inter = tape.sum(pg);
    let num = tape.add_scalar(inter, SMOOTH);
    let sp = tape.sum(pred);
    let union = tape.sub(sp, inter)?;
    let den = tape.add_scalar(union, gt.sum() + SMOOTH);
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean binary cross-entropy of probabilities against `{0, 1}` (or soft) targets.
pub fn bce_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    check_same("bce_loss", tape, pred, gt)?;
    let p = clamp_prob(tape, pred);
    let g = constant_like(tape, pred, gt)?;
    let one_minus_g = constant_like(tape, pred, &gt.map(|v| 1.0 - v))?;
    let lp = tape.log(p);
    let np = tape.neg(p);
    let q = tape.add_scalar(np, 1.0);
    let lq = tape.log(q);
    let a = tape.mul(g, lp)?;
    let b = tape.mul(one_minus_g, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.neg(m))
}

/// Mean `-alpha_t (1 - p_t)^gamma log p_t` over binary targets.
pub fn focal_loss(tape: &mut Tape, pred: Var, gt: &Tensor, gamma: f64, alpha: Option<f64>) -> Result<Var> {
    check_same("focal_loss", tape, pred, gt)?;
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma {gamma} must be >= 0")));
    }
    let p = clamp_prob(tape, pred);
    // p_t = g p + (1 - g)(1 - p) = (1 - g) + (2g - 1) p
    let slope = constant_like(tape, pred, &gt.map(|g| 2.0 * g - 1.0))?;
    let offset = constant_like(tape, pred, &gt.map(|g| 1.0 - g))?;
    let sp = tape.mul(slope, p)?;
    let pt = tape.add(sp, offset)?;
    let log_pt = tape.log(pt);
    let mut term = tape.neg(log_pt);
    if gamma != 0.0 {
        let npt = tape.neg(pt);
        let one_minus = tape.add_scalar(npt, 1.0);
        let modulation = if gamma == 2.0 {
            tape.square(one_minus)
        } else {
            let l = tape.log(one_minus);
            let s = tape.scale(l, gamma);
            tape.exp(s)
        };
        term = tape.mul(modulation, term)?;
    }
    if let Some(a) = alpha {
        let at = constant_like(tape, pred, &gt.map(|g| if g >= 0.5 { a } else { 1.0 - a }))?;
        term = tape.mul(at, term)?;
    }
    Ok(tape.mean(term))
}

/// `-log probs[target]` for a single probability row.
pub fn ce_loss(tape: &mut Tape, probs: Var, target: usize) -> Result<Var> {
    let n = tape.value(probs).len();
    if target >= n {
        return Err(Error::OutOfRange(format!("target class {target} of {n}")));
    }
    let flat = tape.reshape(probs, &[1, n])?;
    let p = tape.slice_cols(flat, target, 1)?;
    let p = clamp_prob(tape, p);
    let l = tape.log(p);
    let s = tape.sum(l);
    Ok(tape.neg(s))
}

/// [`ce_loss`] on the softmax of a `1 x n` logit row.
pub fn ce_from_logits(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let probs = tape.softmax(logits, 1)?;
    ce_loss(tape, probs, target)
}

/// `lambda_dice * dice + lambda_bce * bce`.
pub fn mask_loss(tape: &mut Tape, pred: Var, gt: &Tensor, w: &LossWeights) -> Result<Var> {
    let d = dice_loss(tape, pred, gt)?;
    let b = bce_loss(tape, pred, gt)?;
    let d = tape.scale(d, w.dice);
    let b = tape.scale(b, w.bce);
    tape.add(d, b)
}

/// Classification targets of one matched query.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsTarget {
    pub damage: Option<usize>,
    pub part: Option<usize>,
    /// Multi-hot fake target, `|F|` entries.
    pub fake: Tensor,
}

/// Logit rows (`1 x n`) of one query.
#[derive(Clone, Copy, Debug)]
pub struct QueryLogits {
    pub damage: Var,
    pub fake: Var,
    pub part: Var,
}

/// Component values of one matched pair, each already weighted.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub mask: Var,
    pub cls: Var,
    pub iou: Var,
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// `CE_d + CE_p + focal_f` for [`LossForm::Sum`], the lambda-weighted variant otherwise.
pub fn cls_loss(tape: &mut Tape, logits: QueryLogits, target: &ClsTarget, w: &LossWeights) -> Result<Var> {
    let (wd, wf, wp) = match w.form {
        LossForm::Sum => (1.0, 1.0, 1.0),
        LossForm::Weighted => (w.damage, w.fake, w.part),
    };
    let mut total = zero(tape);
    if let Some(d) = target.damage {
        let l = ce_from_logits(tape, logits.damage, d)?;
        let l = tape.scale(l, wd);
        total = tape.add(total, l)?;
    }
    if let Some(p) = target.part {
        let l = ce_from_logits(tape, logits.part, p)?;
        let l = tape.scale(l, wp);
        total = tape.add(total, l)?;
    }
    let fp = tape.sigmoid(logits.fake);
    let l = match w.form {
        LossForm::Sum => focal_loss(tape, fp, &target.fake, w.focal_gamma, w.focal_alpha)?,
        LossForm::Weighted => bce_loss(tape, fp, &target.fake)?,
    };
    let l = tape.scale(l, wf);
    tape.add(total, l)
}

/// Loss of one matched (query, gt) pair under `w.form`.
pub fn pair_loss(
    tape: &mut Tape,
    mask: Var,
    gt_mask: &Tensor,
    logits: QueryLogits,
    target: &ClsTarget,
    w: &LossWeights,
) -> Result<PairLoss> {
    let cls = cls_loss(tape, logits, target, w)?;
    let iou = soft_iou_loss(tape, mask, gt_mask)?;
    let (mask_term, iou_weight) = match w.form {
        LossForm::Sum => (mask_loss(tape, mask, gt_mask, w)?, w.iou),
        LossForm::Weighted => (zero(tape), w.mask),
    };
    let iou = tape.scale(iou, iou_weight);
    Ok(PairLoss {
        mask: mask_term,
        cls,
        iou,
    })
}
