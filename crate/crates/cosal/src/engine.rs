//! Training and inference driver: Adam, the episode loop, dataset
//! evaluation, group inference, attention dumps, and consensus export.

use std::fs;
use std::path::Path;

use crate::checkpoint::{AblationFlags, AdamMoments, Checkpoint};
use crate::collab::{
    self, attention_consensus, gam_output, gcm_cross, gcm_predict, group_affinity_attention,
    mean_consensus,
};
use crate::data::{self, DatasetManifest, Split};
use crate::error::{CosalError, Result};
use crate::losses::{
    classification_loss, gcm_loss, soft_iou_loss, total_loss, FocalConfig, LossParts, LossWeights,
};
use crate::metrics::{GroupAccumulator, MetricsReport, METRIC_EPS};
use crate::model::{bind_params, classify, decode, encode, init_params, ModelConfig, ParamIds};
use crate::rng::{mix_seed, Rng};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub k: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 50,
            k: 8,
            lr: 1e-4,
            weights: LossWeights::default(),
            flags: AblationFlags::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.k < 2 {
            return Err(CosalError::invalid("K must be >= 2"));
        }
        if self.epochs == 0 {
            return Err(CosalError::invalid("epochs must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CosalError::invalid("lr must be positive"));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.99;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update over the visit-ordered parameter list. Parameters whose
/// gradient is absent (disabled branches) are left untouched, moments
/// included.
pub fn adam_step<S: Scalar>(
    params: &mut crate::model::ModelParams<S>,
    grads: &[Option<&Tensor<S>>],
    moments: &mut AdamMoments<S>,
    lr: f64,
) -> Result<()> {
    moments.t += 1;
    let t = moments.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let mut idx = 0usize;
    let mut failure: Option<CosalError> = None;
    params.visit_mut(|name, p| {
        let i = idx;
        idx += 1;
        if failure.is_some() {
            return;
        }
        let Some(g) = grads[i] else { return };
        if g.shape != p.shape {
            failure = Some(CosalError::shape(format!("gradient shape mismatch for {name}")));
            return;
        }
        if !g.all_finite() {
            failure = Some(CosalError::NonFinite(format!("gradient of {name}")));
            return;
        }
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        for j in 0..p.data.len() {
            let gj = g.data[j].to_f();
            let mj = ADAM_BETA1 * m.data[j].to_f() + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v.data[j].to_f() + (1.0 - ADAM_BETA2) * gj * gj;
            m.data[j] = S::from_f(mj);
            v.data[j] = S::from_f(vj);
            let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
            p.data[j] = S::from_f(p.data[j].to_f() - step);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Group forward state up to the decoder input.
struct GroupForward {
    deep: ValueId,
    consensus: ValueId,
    attention: Option<collab::AffinityAttention>,
    logits: ValueId,
}

fn forward_group<S: Scalar>(
    tape: &mut Tape<S>,
    images: ValueId,
    ids: &ParamIds,
    config: &ModelConfig,
    use_gam: bool,
) -> Result<GroupForward> {
    let levels = encode(tape, images, ids, config)?;
    let deep = *levels.last().unwrap();
    let (consensus, attention, modulated) = if use_gam {
        let att = group_affinity_attention(tape, deep, ids.theta, ids.phi)?;
        let attended = tape.mul(att.a_s, deep)?;
        let e = attention_consensus(tape, deep, att.a_s)?;
        (e, Some(att), attended)
    } else {
        let e = mean_consensus(tape, deep)?;
        (e, None, deep)
    };
    let f_out = gam_output(tape, modulated, consensus, ids)?;
    let gate = attention.as_ref().map(|a| a.a_s);
    let logits = decode(tape, f_out, &levels, gate, ids, config)?;
    Ok(GroupForward { deep, consensus, attention, logits })
}

/// Per-episode loss values as plain numbers.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLosses {
    pub sal: f64,
    pub ctm: f64,
    pub cls: f64,
    pub total: f64,
}

struct EpisodeBatch<S: Scalar> {
    images: [Tensor<S>; 2],
    masks: [Tensor<S>; 2],
    classes: [usize; 2],
}

fn train_episode<S: Scalar>(
    params: &mut crate::model::ModelParams<S>,
    moments: &mut AdamMoments<S>,
    cfg: &TrainConfig,
    batch: &EpisodeBatch<S>,
) -> Result<EpisodeLosses> {
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params, true);
    let half = S::from_f(0.5);

    let mut deeps = Vec::with_capacity(2);
    let mut consensuses = Vec::with_capacity(2);
    let mut sal_parts = Vec::with_capacity(2);
    let mut cls_logits = Vec::with_capacity(2);
    for g in 0..2 {
        let images = tape.constant(batch.images[g].clone());
        let fwd = forward_group(&mut tape, images, &ids, &cfg.model, cfg.flags.use_gam)?;
        let pred = tape.sigmoid(fwd.logits);
        sal_parts.push(soft_iou_loss(&mut tape, pred, &batch.masks[g])?);
        if cfg.flags.use_acm {
            cls_logits.push(classify(&mut tape, fwd.deep, &ids)?);
        }
        deeps.push(fwd.deep);
        consensuses.push(fwd.consensus);
    }
    let sal_sum = tape.add(sal_parts[0], sal_parts[1])?;
    let sal = tape.scale(sal_sum, half);

    let ctm = if cfg.flags.use_gcm {
        let (plus, minus) =
            gcm_cross(&mut tape, deeps[0], deeps[1], consensuses[0], consensuses[1])?;
        let upscale = cfg.model.deep_scale();
        let mut parts = Vec::with_capacity(2);
        for g in 0..2 {
            let m_plus = gcm_predict(&mut tape, plus[g], &ids, upscale)?;
            let m_minus = gcm_predict(&mut tape, minus[g], &ids, upscale)?;
            parts.push(gcm_loss(&mut tape, m_plus, m_minus, &batch.masks[g], FocalConfig::default())?);
        }
        let sum = tape.add(parts[0], parts[1])?;
        Some(tape.scale(sum, half))
    } else {
        None
    };

    let cls = if cfg.flags.use_acm {
        let all = tape.concat(&cls_logits, 0)?;
        let mut labels = vec![batch.classes[0]; batch.images[0].shape[0]];
        labels.extend(vec![batch.classes[1]; batch.images[1].shape[0]]);
        Some(classification_loss(&mut tape, all, &labels)?)
    } else {
        None
    };

    let parts = LossParts { sal: Some(sal), ctm, cls };
    let total = total_loss(&mut tape, &parts, &cfg.weights)?;
    let grads = tape.backward(total)?;
    let ordered = ids.ordered();
    let grad_refs: Vec<Option<&Tensor<S>>> = ordered.iter().map(|&id| grads.get(id)).collect();
    let losses = EpisodeLosses {
        sal: tape.value(sal).item().to_f(),
        ctm: ctm.map(|id| tape.value(id).item().to_f()).unwrap_or(0.0),
        cls: cls.map(|id| tape.value(id).item().to_f()).unwrap_or(0.0),
        total: tape.value(total).item().to_f(),
    };
    adam_step(params, &grad_refs, moments, cfg.lr)?;
    Ok(losses)
}

pub fn episodes_per_epoch(manifest: &DatasetManifest, k: usize) -> usize {
    let train_classes: std::collections::BTreeSet<usize> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.class_id)
        .collect();
    // one episode per unordered pair of training classes, with a floor so
    // tiny datasets still see every image a few times per epoch
    let t = train_classes.len();
    let pairs = t * t.saturating_sub(1) / 2;
    let train_images =
        manifest.records.iter().filter(|r| r.split == Split::Train).count();
    pairs.max(train_images.div_ceil(2 * k))
}

fn checkpoint_from<S: Scalar>(
    cfg: &TrainConfig,
    params: &crate::model::ModelParams<S>,
    moments: &AdamMoments<S>,
    rng: &Rng,
    episode: u64,
) -> Checkpoint<S> {
    Checkpoint {
        config: cfg.model.clone(),
        flags: cfg.flags,
        lr: cfg.lr,
        lambdas: [cfg.weights.lambda_sal, cfg.weights.lambda_ctm, cfg.weights.lambda_cls],
        k: cfg.k as u64,
        epochs: cfg.epochs as u64,
        seed: cfg.seed,
        episode,
        rng_words: rng.state_words(),
        params: params.clone(),
        adam: moments.clone(),
    }
}

/// Run (or resume) training. The checkpoint is rewritten after every epoch
/// and the per-episode loss log is appended to `loss_csv` if given. On a
/// non-finite loss the last good checkpoint is saved before erroring out.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out: &Path,
    loss_csv: Option<&Path>,
    resume: Option<Checkpoint<S>>,
) -> Result<Checkpoint<S>> {
    cfg.validate()?;
    let per_epoch = episodes_per_epoch(manifest, cfg.k);
    let total_episodes = (per_epoch * cfg.epochs) as u64;

    let (mut params, mut moments, mut rng, start_episode) = match resume {
        Some(ck) => {
            if ck.config != cfg.model {
                return Err(CosalError::invalid("resume checkpoint model config mismatch"));
            }
            (ck.params, ck.adam, Rng::from_state_words(ck.rng_words), ck.episode)
        }
        None => {
            let params = init_params::<S>(&cfg.model, mix_seed(&[cfg.seed, 0x696e6974]))?;
            let moments = AdamMoments::zeros_for(&params);
            (params, moments, Rng::new(mix_seed(&[cfg.seed, 0x747261696e])), 0)
        }
    };

    let mut log = String::new();
    if start_episode == 0 {
        log.push_str("step,l_sal,l_ctm,l_cls,total\n");
    }
    let flush_log = |log: &mut String| -> Result<()> {
        if let Some(path) = loss_csv {
            if !log.is_empty() {
                use std::io::Write;
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| CosalError::io(path, e))?;
                f.write_all(log.as_bytes()).map_err(|e| CosalError::io(path, e))?;
                log.clear();
            }
        }
        Ok(())
    };

    let mut episode = start_episode;
    while episode < total_episodes {
        let episode_seed = rng.next_u64();
        let ep = data::sample_episode(manifest, cfg.k, episode_seed)?;
        let (mut img_a, mask_a) = data::load_group::<S>(manifest, &ep.items_a)?;
        let (mut img_b, mask_b) = data::load_group::<S>(manifest, &ep.items_b)?;
        // Per-group hue rotation so foreground hues can't be memorized;
        // within-group color agreement is untouched.
        let mut aug_rng = Rng::new(mix_seed(&[episode_seed, 0x687565]));
        data::hue_rotate(&mut img_a, aug_rng.next_f64() * std::f64::consts::TAU);
        data::hue_rotate(&mut img_b, aug_rng.next_f64() * std::f64::consts::TAU);
        let batch = EpisodeBatch {
            images: [img_a, img_b],
            masks: [mask_a, mask_b],
            classes: [ep.class_a, ep.class_b],
        };
        match train_episode(&mut params, &mut moments, cfg, &batch) {
            Ok(losses) => {
                log.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6}\n",
                    episode, losses.sal, losses.ctm, losses.cls, losses.total
                ));
            }
            Err(e) => {
                // keep the last state that produced finite losses
                checkpoint_from(cfg, &params, &moments, &rng, episode).save(out)?;
                flush_log(&mut log)?;
                return Err(e);
            }
        }
        episode += 1;
        if episode % per_epoch as u64 == 0 {
            checkpoint_from(cfg, &params, &moments, &rng, episode).save(out)?;
            flush_log(&mut log)?;
        }
    }
    let ck = checkpoint_from(cfg, &params, &moments, &rng, episode);
    ck.save(out)?;
    flush_log(&mut log)?;
    Ok(ck)
}

/// GAM-path inference on one group: N×3×S×S images to N×1×S×S probability
/// maps. GCM and ACM play no part here.
pub fn infer_group<S: Scalar>(ck: &Checkpoint<S>, images: &Tensor<S>) -> Result<Tensor<S>> {
    if images.rank() != 4 || images.shape[0] < 2 {
        return Err(CosalError::invalid("inference needs a group of at least 2 images"));
    }
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &ck.params, false);
    let input = tape.constant(images.clone());
    let fwd = forward_group(&mut tape, input, &ids, &ck.config, ck.flags.use_gam)?;
    let pred = tape.sigmoid(fwd.logits);
    Ok(tape.value(pred).clone())
}

/// Attention maps A_S for one group, at deep-feature resolution, with the
/// raw min/max per image. Requires an attention-trained checkpoint.
pub fn attention_maps<S: Scalar>(
    ck: &Checkpoint<S>,
    images: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<(f64, f64)>)> {
    if !ck.flags.use_gam {
        return Err(CosalError::invalid("checkpoint was trained without the attention module"));
    }
    if images.rank() != 4 || images.shape[0] < 2 {
        return Err(CosalError::invalid("attention needs a group of at least 2 images"));
    }
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &ck.params, false);
    let input = tape.constant(images.clone());
    let fwd = forward_group(&mut tape, input, &ids, &ck.config, true)?;
    let a_s = tape.value(fwd.attention.unwrap().a_s).clone();
    let per = a_s.numel() / a_s.shape[0];
    let mut ranges = Vec::with_capacity(a_s.shape[0]);
    for i in 0..a_s.shape[0] {
        let chunk = &a_s.data[i * per..(i + 1) * per];
        let lo = chunk.iter().fold(f64::INFINITY, |a, &b| a.min(b.to_f()));
        let hi = chunk.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f()));
        ranges.push((lo, hi));
    }
    Ok((a_s, ranges))
}

/// Consensus vector of one group as plain f64s.
pub fn group_consensus<S: Scalar>(ck: &Checkpoint<S>, images: &Tensor<S>) -> Result<Vec<f64>> {
    if images.rank() != 4 || images.shape[0] < 2 {
        return Err(CosalError::invalid("consensus needs a group of at least 2 images"));
    }
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &ck.params, false);
    let input = tape.constant(images.clone());
    let fwd = forward_group(&mut tape, input, &ids, &ck.config, ck.flags.use_gam)?;
    Ok(tape.value(fwd.consensus).data.iter().map(|v| v.to_f()).collect())
}

/// Chunk a class's image list into inference sub-batches of at most `k`,
/// keeping every chunk at least 2 long.
fn chunk_group(indices: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = indices.chunks(k.max(2)).map(|c| c.to_vec()).collect();
    if chunks.len() > 1 && chunks.last().unwrap().len() < 2 {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

/// Evaluate a checkpoint on one split, grouping images by class.
pub fn evaluate_dataset<S: Scalar>(
    ck: &Checkpoint<S>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<MetricsReport> {
    let classes = manifest.classes_in_split(split);
    if classes.is_empty() {
        return Err(CosalError::invalid("split has no classes"));
    }
    let size = manifest.size;
    let mut groups = Vec::with_capacity(classes.len());
    for class_id in classes {
        let indices = manifest.class_indices(split, class_id);
        if indices.len() < 2 {
            return Err(CosalError::invalid(format!("class {class_id} has fewer than 2 images")));
        }
        let mut acc = GroupAccumulator::default();
        for chunk in chunk_group(&indices, ck.k as usize) {
            let (images, masks) = data::load_group::<S>(manifest, &chunk)?;
            let preds = infer_group(ck, &images)?;
            let hw = size * size;
            for i in 0..chunk.len() {
                let pred: Vec<f64> = preds.data[i * hw..(i + 1) * hw]
                    .iter()
                    .map(|v| v.to_f().clamp(0.0, 1.0))
                    .collect();
                let gt: Vec<f64> =
                    masks.data[i * hw..(i + 1) * hw].iter().map(|v| v.to_f()).collect();
                acc.push(&pred, &gt, size, size)?;
            }
        }
        let name = manifest.records[indices[0]].class_name.clone();
        groups.push(acc.finish(name)?);
    }
    Ok(MetricsReport { groups })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparabilityStats {
    /// mean pairwise cosine distance between sub-batch consensuses of the
    /// same group
    pub d1: f64,
    /// mean pairwise cosine distance across groups
    pub d2: f64,
    pub ratio: f64,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na * nb;
    if denom == 0.0 {
        // a zero vector is at distance 0 from itself, 1 from anything else
        return if na == nb { 0.0 } else { 1.0 };
    }
    1.0 - dot / denom
}

/// Export per-sub-batch consensus vectors of every group in a split and the
/// intra/inter separability statistics.
pub fn export_consensus<S: Scalar>(
    ck: &Checkpoint<S>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<(String, SeparabilityStats)> {
    let classes = manifest.classes_in_split(split);
    if classes.len() < 2 {
        return Err(CosalError::invalid("consensus export needs at least 2 groups"));
    }
    let mut vectors: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for &class_id in &classes {
        let indices = manifest.class_indices(split, class_id);
        for (sub, chunk) in chunk_group(&indices, ck.k as usize).into_iter().enumerate() {
            let (images, _) = data::load_group::<S>(manifest, &chunk)?;
            vectors.push((class_id, sub, group_consensus(ck, &images)?));
        }
    }
    let c = vectors[0].2.len();
    let mut csv = String::from("group_id,sub_batch,");
    csv.push_str(&(0..c).map(|i| format!("c{i}")).collect::<Vec<_>>().join(","));
    csv.push('\n');
    for (gid, sub, v) in &vectors {
        csv.push_str(&format!("{gid},{sub},"));
        csv.push_str(&v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d = cosine_distance(&vectors[i].2, &vectors[j].2);
            if vectors[i].0 == vectors[j].0 {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(CosalError::invalid("need multiple sub-batches per group and 2+ groups"));
    }
    let d1 = intra / n_intra as f64;
    let d2 = inter / n_inter as f64;
    let stats = SeparabilityStats { d1, d2, ratio: d2 / (d1 + METRIC_EPS) };
    csv.push_str(&format!("# d1={d1:.6} d2={d2:.6} ratio={:.6}\n", stats.ratio));
    Ok((csv, stats))
}
