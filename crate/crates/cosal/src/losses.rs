//! Loss terms: soft IoU saliency loss, focal loss with all-zero inter-group
//! supervision, classification cross-entropy, and their weighted sum.

use crate::error::{CosalError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_sal: f64,
    pub lambda_ctm: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // saliency weighted up: it shares the encoder/attention parameters
        // with the auxiliary losses and is the term evaluation measures
        LossWeights { lambda_sal: 3.0, lambda_ctm: 1.0, lambda_cls: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sal < 0.0 || self.lambda_ctm < 0.0 || self.lambda_cls < 0.0 {
            return Err(CosalError::invalid("loss weights must be nonnegative"));
        }
        if self.lambda_sal == 0.0 && self.lambda_ctm == 0.0 && self.lambda_cls == 0.0 {
            return Err(CosalError::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { gamma: 2.0, alpha: 0.25 }
    }
}

const SOFT_IOU_EPS: f64 = 1e-6;

fn check_binary<S: Scalar>(gt: &Tensor<S>, what: &str) -> Result<()> {
    if gt.data.iter().any(|&v| v != S::zero() && v != S::one()) {
        return Err(CosalError::invalid(format!("{what} must be binary {{0,1}}")));
    }
    Ok(())
}

/// Soft IoU loss: per image 1 − (Σp·g + ε)/(Σp + Σg − Σp·g + ε), mean over N.
/// `pred` holds probabilities in [0,1]; `gt` is a binary constant.
pub fn soft_iou_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: ValueId,
    gt: &Tensor<S>,
) -> Result<ValueId> {
    let vp = tape.value(pred).clone();
    if vp.shape != gt.shape {
        return Err(CosalError::shape(format!(
            "soft_iou shapes {:?} vs {:?}",
            vp.shape, gt.shape
        )));
    }
    check_binary(gt, "soft_iou ground truth")?;
    let n = vp.shape[0];
    let per = vp.numel() / n;
    let eps = S::from_f(SOFT_IOU_EPS);
    let mut inters = vec![S::zero(); n];
    let mut unions = vec![S::zero(); n];
    let mut total = S::zero();
    for i in 0..n {
        let (mut inter, mut sp, mut sg) = (S::zero(), S::zero(), S::zero());
        for e in 0..per {
            let p = vp.data[i * per + e];
            let g = gt.data[i * per + e];
            inter += p * g;
            sp += p;
            sg += g;
        }
        let union = sp + sg - inter;
        inters[i] = inter;
        unions[i] = union;
        total += S::one() - (inter + eps) / (union + eps);
    }
    let loss = total / S::from_f(n as f64);
    let gt = gt.clone();
    Ok(tape.record(Tensor::scalar(loss), &[pred], move |gout| {
        let go = gout.data[0];
        let inv_n = S::one() / S::from_f(n as f64);
        let mut grad = vec![S::zero(); vp.numel()];
        for i in 0..n {
            let denom = unions[i] + eps;
            let num = inters[i] + eps;
            for e in 0..per {
                let g = gt.data[i * per + e];
                // d inter/dp = g ; d union/dp = 1 - g
                let d = -(g * denom - num * (S::one() - g)) / (denom * denom);
                grad[i * per + e] = go * inv_n * d;
            }
        }
        vec![(pred.0, Tensor::from_vec(vp.shape.clone(), grad))]
    }))
}

/// Focal loss on logits: −α_t (1−p_t)^γ log p_t, mean over all pixels and
/// images. Computed in log-space via softplus for stability.
pub fn focal_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: ValueId,
    target: &Tensor<S>,
    cfg: FocalConfig,
) -> Result<ValueId> {
    let vx = tape.value(logits).clone();
    if vx.shape != target.shape {
        return Err(CosalError::shape(format!(
            "focal shapes {:?} vs {:?}",
            vx.shape, target.shape
        )));
    }
    check_binary(target, "focal target")?;
    let gamma = cfg.gamma;
    let alpha = cfg.alpha;
    let count = vx.numel() as f64;
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    let mut total = 0.0;
    for (&x, &y) in vx.data.iter().zip(&target.data) {
        let x = x.to_f();
        let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
        total += if y == S::one() {
            alpha * (1.0 - s).powf(gamma) * softplus(-x)
        } else {
            (1.0 - alpha) * s.powf(gamma) * softplus(x)
        };
    }
    let loss = Tensor::scalar(S::from_f(total / count));
    let target = target.clone();
    Ok(tape.record(loss, &[logits], move |gout| {
        let go = gout.data[0].to_f() / count;
        let mut grad = Vec::with_capacity(vx.numel());
        for (&x, &y) in vx.data.iter().zip(&target.data) {
            let x = x.to_f();
            let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
            let d = if y == S::one() {
                let log_s = -softplus(-x);
                alpha * gamma * s * (1.0 - s).powf(gamma) * log_s
                    - alpha * (1.0 - s).powf(gamma + 1.0)
            } else {
                let log_1ms = -softplus(x);
                (1.0 - alpha) * (s.powf(gamma + 1.0) - gamma * s.powf(gamma) * (1.0 - s) * log_1ms)
            };
            grad.push(S::from_f(go * d));
        }
        vec![(logits.0, Tensor::from_vec(vx.shape.clone(), grad))]
    }))
}

/// GCM loss: focal on intra-group maps against ground truth plus focal on
/// cross-group maps against all-zero maps. The sum of the two per-pixel
/// means stands in for a mean over the concatenated pair (factor 2, folded
/// into λ2).
pub fn gcm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    m_plus: ValueId,
    m_minus: ValueId,
    gt: &Tensor<S>,
    cfg: FocalConfig,
) -> Result<ValueId> {
    let zeros = tape.value(m_minus).zeros_like();
    let l_plus = focal_loss(tape, m_plus, gt, cfg)?;
    let l_minus = focal_loss(tape, m_minus, &zeros, cfg)?;
    tape.add(l_plus, l_minus)
}

/// Cross-entropy over class logits, mean over the batch.
pub fn classification_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: ValueId,
    labels: &[usize],
) -> Result<ValueId> {
    let vx = tape.value(logits).clone();
    if vx.rank() != 2 || vx.shape[0] != labels.len() {
        return Err(CosalError::shape(format!(
            "classification logits {:?} vs {} labels",
            vx.shape,
            labels.len()
        )));
    }
    let (n, k) = (vx.shape[0], vx.shape[1]);
    for &l in labels {
        if l >= k {
            return Err(CosalError::invalid(format!("label {l} out of range [0,{k})")));
        }
    }
    let mut total = 0.0;
    let mut probs = vec![0.0_f64; n * k];
    for i in 0..n {
        let row = &vx.data[i * k..(i + 1) * k];
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f()));
        let mut sum = 0.0;
        for j in 0..k {
            let e = (row[j].to_f() - mx).exp();
            probs[i * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            probs[i * k + j] /= sum;
        }
        let lse = mx + sum.ln();
        total += lse - row[labels[i]].to_f();
    }
    let loss = Tensor::scalar(S::from_f(total / n as f64));
    let labels = labels.to_vec();
    Ok(tape.record(loss, &[logits], move |gout| {
        let go = gout.data[0].to_f() / n as f64;
        let mut grad = Vec::with_capacity(n * k);
        for i in 0..n {
            for j in 0..k {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                grad.push(S::from_f(go * (probs[i * k + j] - onehot)));
            }
        }
        vec![(logits.0, Tensor::from_vec(vec![n, k], grad))]
    }))
}

/// Named loss parts, so NaN aborts can identify the branch.
pub struct LossParts {
    pub sal: Option<ValueId>,
    pub ctm: Option<ValueId>,
    pub cls: Option<ValueId>,
}

/// Weighted sum λ1·ℒ_sal + λ2·ℒ_ctm + λ3·ℒ_cls. A non-finite part aborts
/// with a diagnostic naming the branch.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    parts: &LossParts,
    weights: &LossWeights,
) -> Result<ValueId> {
    weights.validate()?;
    let named = [
        ("l_sal", parts.sal, weights.lambda_sal),
        ("l_ctm", parts.ctm, weights.lambda_ctm),
        ("l_cls", parts.cls, weights.lambda_cls),
    ];
    let mut acc: Option<ValueId> = None;
    for (name, id, w) in named {
        let Some(id) = id else { continue };
        let v = tape.value(id).item();
        if !v.is_finite() {
            return Err(CosalError::NonFinite(name.to_string()));
        }
        let scaled = tape.scale(id, S::from_f(w));
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| CosalError::invalid("total_loss with no parts"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    #[test]
    fn soft_iou_perfect_prediction_is_zero() {
        let mut t = Tape::<f64>::new();
        let gt = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let p = t.constant(gt.clone());
        let l = soft_iou_loss(&mut t, p, &gt).unwrap();
        assert!(t.value(l).item().abs() < 1e-6);
    }

    #[test]
    fn soft_iou_hand_case_half_on_ones() {
        // pred ≡ 0.5 on 2×2 all-ones gt: inter = 2, union = 4, loss = 0.5.
        let mut t = Tape::<f64>::new();
        let gt = Tensor::<f64>::ones(&[1, 1, 2, 2]).unwrap();
        let p = t.constant(Tensor::<f64>::full(&[1, 1, 2, 2], 0.5).unwrap());
        let l = soft_iou_loss(&mut t, p, &gt).unwrap();
        assert!((t.value(l).item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn soft_iou_degenerate_empty_mask() {
        let mut t = Tape::<f64>::new();
        let gt = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        let p = t.constant(Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap());
        let l = soft_iou_loss(&mut t, p, &gt).unwrap();
        assert!(t.value(l).item().abs() < 1e-6);
    }

    #[test]
    fn soft_iou_rejects_non_binary_gt() {
        let mut t = Tape::<f64>::new();
        let gt = Tensor::<f64>::full(&[1, 1, 2, 2], 0.3).unwrap();
        let p = t.constant(Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap());
        assert!(soft_iou_loss(&mut t, p, &gt).is_err());
    }

    #[test]
    fn soft_iou_grad_check() {
        let gt = Tensor::from_vec(vec![2, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let pred = Tensor::<f64>::randn(&[2, 1, 2, 2], 77).unwrap().map(|v| 0.5 + 0.4 * v.tanh());
        let gt2 = gt.clone();
        let r = grad_check(
            "soft_iou",
            &[pred],
            move |t, ids| soft_iou_loss(t, ids[0], &gt2).unwrap(),
            1e-5,
            1e-4,
        );
        assert!(r.pass, "{r}");
    }

    #[test]
    fn focal_hand_value_at_logit_zero() {
        let mut t = Tape::<f64>::new();
        let target = Tensor::<f64>::ones(&[1, 1, 1, 1]).unwrap();
        let x = t.constant(Tensor::<f64>::zeros(&[1, 1, 1, 1]).unwrap());
        let l = focal_loss(&mut t, x, &target, FocalConfig::default()).unwrap();
        let expect = 0.25 * 0.25 * 2.0_f64.ln();
        assert!((t.value(l).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        // γ=0, α=0.5 → 0.5 × binary cross-entropy.
        let cfg = FocalConfig { gamma: 0.0, alpha: 0.5 };
        let x = Tensor::<f64>::randn(&[2, 1, 3, 3], 5).unwrap();
        let y = Tensor::from_vec(
            vec![2, 1, 3, 3],
            (0..18).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        let mut t = Tape::<f64>::new();
        let xid = t.constant(x.clone());
        let l = focal_loss(&mut t, xid, &y, cfg).unwrap();
        let mut bce = 0.0;
        for (&xi, &yi) in x.data.iter().zip(&y.data) {
            let s = 1.0 / (1.0 + (-xi).exp());
            bce += -(yi * s.ln() + (1.0 - yi) * (1.0 - s).ln());
        }
        bce /= 18.0;
        assert!((t.value(l).item() - 0.5 * bce).abs() < 1e-6);
    }

    #[test]
    fn focal_confident_correct_tends_to_zero() {
        let mut t = Tape::<f64>::new();
        let target = Tensor::<f64>::ones(&[1, 1, 1, 1]).unwrap();
        let x = t.constant(Tensor::<f64>::full(&[1, 1, 1, 1], 30.0).unwrap());
        let l = focal_loss(&mut t, x, &target, FocalConfig::default()).unwrap();
        assert!(t.value(l).item() < 1e-10);
    }

    #[test]
    fn focal_grad_check() {
        let target = Tensor::from_vec(
            vec![1, 1, 3, 3],
            (0..9).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        let x = Tensor::<f64>::randn(&[1, 1, 3, 3], 91).unwrap();
        let tgt = target.clone();
        let r = grad_check(
            "focal",
            &[x],
            move |t, ids| focal_loss(t, ids[0], &tgt, FocalConfig::default()).unwrap(),
            1e-5,
            1e-4,
        );
        assert!(r.pass, "{r}");
    }

    #[test]
    fn ce_uniform_logits_ln_k() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::<f64>::zeros(&[2, 4]).unwrap());
        let l = classification_loss(&mut t, x, &[1, 3]).unwrap();
        assert!((t.value(l).item() - 4.0_f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn ce_matches_brute_force() {
        let x = Tensor::<f64>::randn(&[3, 5], 17).unwrap();
        let labels = [2usize, 0, 4];
        let mut t = Tape::<f64>::new();
        let xid = t.constant(x.clone());
        let l = classification_loss(&mut t, xid, &labels).unwrap();
        let mut expect = 0.0;
        for i in 0..3 {
            let row = &x.data[i * 5..(i + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[labels[i]].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((t.value(l).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn ce_label_out_of_range() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::<f64>::zeros(&[1, 3]).unwrap());
        assert!(classification_loss(&mut t, x, &[3]).is_err());
    }

    #[test]
    fn ce_grad_check() {
        let x = Tensor::<f64>::randn(&[3, 4], 23).unwrap();
        let r = grad_check(
            "cross_entropy",
            &[x],
            |t, ids| classification_loss(t, ids[0], &[0, 2, 1]).unwrap(),
            1e-5,
            1e-4,
        );
        assert!(r.pass, "{r}");
    }

    #[test]
    fn total_loss_weighting() {
        let mut t = Tape::<f64>::new();
        let one = t.leaf(Tensor::scalar(1.0), true);
        let parts = LossParts { sal: Some(one), ctm: Some(one), cls: Some(one) };
        let w = LossWeights::default();
        let l = total_loss(&mut t, &parts, &w).unwrap();
        let expect = w.lambda_sal + w.lambda_ctm + w.lambda_cls;
        assert!((t.value(l).item() - expect).abs() < 1e-12);

        let only_sal = LossWeights { lambda_sal: 1.0, lambda_ctm: 0.0, lambda_cls: 0.0 };
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::scalar(0.7), true);
        let b = t.leaf(Tensor::scalar(5.0), true);
        let parts = LossParts { sal: Some(a), ctm: Some(b), cls: None };
        let l = total_loss(&mut t, &parts, &only_sal).unwrap();
        assert!((t.value(l).item() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn total_loss_nan_names_branch() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::scalar(0.5), true);
        let bad = t.leaf(Tensor::scalar(f64::NAN), true);
        let parts = LossParts { sal: Some(a), ctm: Some(bad), cls: None };
        let err = total_loss(&mut t, &parts, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("l_ctm"), "{err}");
    }

    #[test]
    fn gcm_loss_identical_groups_finite() {
        // gt and the all-zero target conflict on the same maps; the loss must
        // stay positive and the gradients finite.
        let gt = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]);
        let mut t = Tape::<f64>::new();
        let m = t.leaf(Tensor::<f64>::randn(&[1, 1, 2, 2], 3).unwrap(), true);
        let l = gcm_loss(&mut t, m, m, &gt, FocalConfig::default()).unwrap();
        assert!(t.value(l).item() > 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.get(m).unwrap().all_finite());
    }

    #[test]
    fn gcm_loss_batch_size_invariant() {
        // Duplicating every image leaves the per-image normalization unchanged.
        let gt2 = Tensor::from_vec(vec![2, 1, 2, 2], (0..8).map(|i| (i % 2) as f64).collect());
        let m2 = Tensor::<f64>::randn(&[2, 1, 2, 2], 8).unwrap();
        let mut gt4_data = gt2.data.clone();
        gt4_data.extend_from_slice(&gt2.data);
        let gt4 = Tensor::from_vec(vec![4, 1, 2, 2], gt4_data);
        let mut m4_data = m2.data.clone();
        m4_data.extend_from_slice(&m2.data);
        let m4 = Tensor::from_vec(vec![4, 1, 2, 2], m4_data);

        let mut t = Tape::<f64>::new();
        let a = t.constant(m2);
        let l2 = gcm_loss(&mut t, a, a, &gt2, FocalConfig::default()).unwrap();
        let b = t.constant(m4);
        let l4 = gcm_loss(&mut t, b, b, &gt4, FocalConfig::default()).unwrap();
        assert!((t.value(l2).item() - t.value(l4).item()).abs() < 1e-10);
    }
}
