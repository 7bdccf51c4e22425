//! Group collaboration: affinity attention over all images of a group
//! (GAM), consensus distillation, and the cross-multiplication head that
//! pushes consensuses of different groups apart (GCM).

use crate::error::{CosalError, Result};
use crate::model::ParamIds;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Intermediate attention tensors, kept addressable for inspection/export.
pub struct AffinityAttention {
    /// NHW×NHW raw affinity between every pixel pair of the group.
    pub s_f: ValueId,
    /// NHW×N per-image maxima.
    pub a_prime: ValueId,
    /// NHW averaged attention logits.
    pub a_f: ValueId,
    /// N×1×H×W attention maps: softmax over the full NHW axis, rescaled by
    /// N·H·W so the mean is 1.
    pub a_s: ValueId,
}

/// Pairwise affinity of two single-image feature maps: S[i,j] is the inner
/// product of θ-embedded pixel i of `f_n` with φ-embedded pixel j of `f_m`.
pub fn pairwise_affinity<S: Scalar>(
    tape: &mut Tape<S>,
    f_n: ValueId,
    f_m: ValueId,
    theta: ValueId,
    phi: ValueId,
) -> Result<ValueId> {
    let sn = tape.value(f_n).shape.clone();
    let sm = tape.value(f_m).shape.clone();
    if sn.len() != 3 || sm.len() != 3 || sn[0] != sm[0] {
        return Err(CosalError::shape(format!(
            "pairwise_affinity expects C×H×W pairs with equal C, got {sn:?} / {sm:?}"
        )));
    }
    let c = sn[0];
    if tape.value(theta).shape != vec![c, c, 1, 1] || tape.value(phi).shape != vec![c, c, 1, 1] {
        return Err(CosalError::shape("embedding weights must be C×C×1×1".to_string()));
    }
    let zero_bias = tape.constant(Tensor::zeros(&[c])?);
    let fn4 = tape.reshape(f_n, &[1, c, sn[1], sn[2]])?;
    let fm4 = tape.reshape(f_m, &[1, c, sm[1], sm[2]])?;
    let en = tape.conv2d(fn4, theta, zero_bias, 1, 0)?;
    let em = tape.conv2d(fm4, phi, zero_bias, 1, 0)?;
    let hw_n = sn[1] * sn[2];
    let hw_m = sm[1] * sm[2];
    // rows: θ-pixels of f_n (HW×C); cols: φ-pixels of f_m (C×HW)
    let en_chw = tape.reshape(en, &[c, hw_n])?;
    let en_rows = tape.permute(en_chw, &[1, 0])?;
    let em_cols = tape.reshape(em, &[c, hw_m])?;
    tape.matmul(en_rows, em_cols)
}

/// Global affinity attention over a whole group 𝓕: N×C×H×W, N ≥ 2.
pub fn group_affinity_attention<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValueId,
    theta: ValueId,
    phi: ValueId,
) -> Result<AffinityAttention> {
    let shape = tape.value(features).shape.clone();
    if shape.len() != 4 {
        return Err(CosalError::shape("group features must be N×C×H×W".to_string()));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if n < 2 {
        return Err(CosalError::invalid("group_affinity_attention needs N >= 2"));
    }
    let hw = h * w;
    let nhw = n * hw;
    let zero_bias = tape.constant(Tensor::zeros(&[c])?);
    let emb_t = tape.conv2d(features, theta, zero_bias, 1, 0)?;
    let emb_p = tape.conv2d(features, phi, zero_bias, 1, 0)?;
    // θ-pixels as rows (NHW×C): N,C,H,W → N,H,W,C
    let t_rows = tape.permute(emb_t, &[0, 2, 3, 1])?;
    let t_rows = tape.reshape(t_rows, &[nhw, c])?;
    // φ-pixels as columns (C×NHW): N,C,H,W → C,N,H,W
    let p_cols = tape.permute(emb_p, &[1, 0, 2, 3])?;
    let p_cols = tape.reshape(p_cols, &[c, nhw])?;
    let s_f = tape.matmul(t_rows, p_cols)?;
    // Per-image maxima: NHW × N × HW, max over each image's pixel block.
    let blocks = tape.reshape(s_f, &[nhw, n, hw])?;
    let (a_prime, _) = tape.reduce_max(blocks, 2)?;
    let a_f = tape.reduce_mean(a_prime, &[1], false)?;
    let soft = tape.softmax(a_f, 0)?;
    let rescaled = tape.scale(soft, S::from_f(nhw as f64));
    let a_s = tape.reshape(rescaled, &[n, 1, h, w])?;
    Ok(AffinityAttention { s_f, a_prime, a_f, a_s })
}

/// Distill the 1×C×1×1 consensus: attention-weight the features, then
/// average pool over batch and spatial dimensions.
pub fn attention_consensus<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValueId,
    a_s: ValueId,
) -> Result<ValueId> {
    let weighted = tape.mul(a_s, features)?;
    tape.reduce_mean(weighted, &[0, 2, 3], true)
}

/// Depth-wise correlation with the 1×1 consensus kernel, which reduces to
/// per-channel scaling of the feature maps.
pub fn depthwise_correlate<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValueId,
    consensus: ValueId,
) -> Result<ValueId> {
    let fs = tape.value(features).shape.clone();
    let cs = tape.value(consensus).shape.clone();
    if cs.len() != 4 || cs[0] != 1 || cs[2] != 1 || cs[3] != 1 || fs[1] != cs[1] {
        return Err(CosalError::shape(format!(
            "consensus must be 1×C×1×1 matching features, got {cs:?} for {fs:?}"
        )));
    }
    tape.mul(features, consensus)
}

/// Parameter-free spatial gate from the consensus: the squared, rectified
/// cosine similarity between each position's feature vector and the
/// consensus vector. High where the image agrees with the group, low on
/// objects only this image contains. Returns N×1×h×w.
pub fn consensus_gate<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValueId,
    consensus: ValueId,
) -> Result<ValueId> {
    let fn_ = tape.channel_rms_norm(features, 1e-6)?;
    let en = tape.channel_rms_norm(consensus, 1e-6)?;
    let prod = tape.mul(fn_, en)?;
    let sim = tape.reduce_mean(prod, &[1], true)?;
    let sim = tape.relu(sim);
    tape.mul(sim, sim)
}

/// Intra- and inter-group cross-multiplication.
/// Returns (F⁺ = [𝓕₁·e₁, 𝓕₂·e₂], F⁻ = [𝓕₁·e₂, 𝓕₂·e₁]).
#[allow(clippy::type_complexity)]
pub fn gcm_cross<S: Scalar>(
    tape: &mut Tape<S>,
    f1: ValueId,
    f2: ValueId,
    e1: ValueId,
    e2: ValueId,
) -> Result<([ValueId; 2], [ValueId; 2])> {
    let c1 = tape.value(f1).shape[1];
    let c2 = tape.value(f2).shape[1];
    if c1 != c2 {
        return Err(CosalError::shape(format!("gcm_cross channel mismatch {c1} vs {c2}")));
    }
    let plus = [
        depthwise_correlate(tape, f1, e1)?,
        depthwise_correlate(tape, f2, e2)?,
    ];
    let minus = [
        depthwise_correlate(tape, f1, e2)?,
        depthwise_correlate(tape, f2, e1)?,
    ];
    Ok((plus, minus))
}

/// GCM prediction head: two 3×3 conv+relu layers, a 1×1 conv to one
/// channel, then bilinear upsampling to mask resolution. Weights are shared
/// across all F⁺/F⁻ stacks.
pub fn gcm_predict<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValueId,
    ids: &ParamIds,
    upscale: usize,
) -> Result<ValueId> {
    let (w0, b0) = ids.gcm[0];
    let y = tape.conv2d(features, w0, b0, 1, 1)?;
    let y = tape.relu(y);
    let (w1, b1) = ids.gcm[1];
    let y = tape.conv2d(y, w1, b1, 1, 1)?;
    let y = tape.relu(y);
    let (w2, b2) = ids.gcm[2];
    let y = tape.conv2d(y, w2, b2, 1, 0)?;
    // fixed logit gain so the focal targets are reachable at the small
    // constant learning rate (see the decoder output head)
    let y = tape.scale(y, S::from_f(4.0));
    tape.upsample_bilinear(y, upscale)
}

/// GAM output path: depth-wise correlate features with the consensus, then
/// apply the 3×3 output projection.
pub fn gam_output<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValueId,
    consensus: ValueId,
    ids: &ParamIds,
) -> Result<ValueId> {
    let out = depthwise_correlate(tape, features, consensus)?;
    let (w, b) = ids.gam_proj;
    tape.conv2d(out, w, b, 1, 1)
}

/// Baseline consensus for the GAM-ablated model: plain mean pooling over
/// batch and spatial dimensions.
pub fn mean_consensus<S: Scalar>(tape: &mut Tape<S>, features: ValueId) -> Result<ValueId> {
    tape.reduce_mean(features, &[0, 2, 3], true)
}
