//! Desk-scale backbone: a small pyramid encoder, an FPN-style top-down
//! decoder, and the GAP+FC auxiliary classifier head.

use crate::error::{CosalError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input resolution in pixels.
    pub input_size: usize,
    pub base_channels: usize,
    /// Pyramid depth; level 0 is full resolution, each deeper level halves it.
    pub levels: usize,
    /// Channel width of the deepest level, consumed by GAM/GCM.
    pub embed_channels: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            base_channels: 16,
            levels: 3,
            embed_channels: 32,
            num_classes: 12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(CosalError::invalid("levels must be >= 2"));
        }
        if self.embed_channels < 8 {
            return Err(CosalError::invalid("embed_channels must be >= 8"));
        }
        if self.deep_size() < 4 {
            return Err(CosalError::invalid("deepest spatial size must be >= 4"));
        }
        Ok(())
    }

    /// Channel width of encoder level `l`.
    pub fn level_channels(&self, l: usize) -> usize {
        if l + 1 == self.levels {
            self.embed_channels
        } else {
            self.base_channels << l
        }
    }

    /// Spatial size of encoder level `l`.
    pub fn level_size(&self, l: usize) -> usize {
        self.input_size >> l
    }

    /// Spatial size of the deepest level (the GAM/GCM feature resolution).
    pub fn deep_size(&self) -> usize {
        self.level_size(self.levels - 1)
    }

    /// Upsampling factor from the deepest level back to input resolution.
    pub fn deep_scale(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Decoder channel width.
    pub fn decoder_channels(&self) -> usize {
        self.embed_channels
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    /// Per level: a stack of 3×3 convs (two per level, three at the deepest);
    /// levels past the first are entered through a 2×2 average pool.
    pub enc: Vec<Vec<ConvParams<S>>>,
    /// Per level: 1×1 lateral conv into the decoder width.
    pub lat: Vec<ConvParams<S>>,
    /// Per merge step: two top-down 3×3 convs (levels-1 steps).
    pub dec: Vec<[ConvParams<S>; 2]>,
    /// Final 1×1 conv to a single logit channel.
    pub out_head: ConvParams<S>,
    /// GAM linear embeddings, bias-free 1×1 convs C→C.
    pub theta: Tensor<S>,
    pub phi: Tensor<S>,
    /// 3×3 projection applied to the GAM output before decoding.
    pub gam_proj: ConvParams<S>,
    /// GCM head: two 3×3 convs then a 1×1 to one channel.
    pub gcm: Vec<ConvParams<S>>,
    /// ACM fully connected layer: weight C×K, bias K.
    pub acm_w: Tensor<S>,
    pub acm_b: Tensor<S>,
}

fn kaiming<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::randn_with(shape, rng).unwrap();
    for v in &mut t.data {
        *v = *v * S::from_f(std);
    }
    t
}

fn conv_init<S: Scalar>(
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut crate::rng::Rng,
) -> ConvParams<S> {
    ConvParams {
        w: kaiming(&[cout, cin, k, k], cin * k * k, rng),
        b: Tensor::zeros(&[cout]).unwrap(),
    }
}

/// Deterministic Kaiming-style init; biases are zero.
pub fn init_params<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<S>> {
    config.validate()?;
    let mut rng = crate::rng::Rng::new(crate::rng::mix_seed(&[seed, 0x6d6f64656c]));
    let d = config.decoder_channels();
    let c = config.embed_channels;

    let mut enc = Vec::new();
    for l in 0..config.levels {
        let cin = if l == 0 { 3 } else { config.level_channels(l - 1) };
        let cl = config.level_channels(l);
        let mut stack = vec![conv_init(cl, cin, 3, &mut rng), conv_init(cl, cl, 3, &mut rng)];
        if l + 1 == config.levels {
            // extra deep conv: the affinity/consensus path needs the largest
            // receptive field the budget allows
            stack.push(conv_init(cl, cl, 3, &mut rng));
        }
        enc.push(stack);
    }
    let lat = (0..config.levels)
        .map(|l| conv_init(d, config.level_channels(l), 1, &mut rng))
        .collect();
    let dec: Vec<[ConvParams<S>; 2]> = (0..config.levels - 1)
        .map(|_| [conv_init(d, d, 3, &mut rng), conv_init(d, d, 3, &mut rng)])
        .collect();
    let out_head = conv_init(1, d, 1, &mut rng);
    // doubled embedding init so the affinity logits have usable spread (and
    // the softmax usable contrast) from the first episodes
    let mut theta = kaiming(&[c, c, 1, 1], c, &mut rng);
    let mut phi = kaiming(&[c, c, 1, 1], c, &mut rng);
    for v in theta.data.iter_mut().chain(phi.data.iter_mut()) {
        *v = *v * S::from_f(4.0);
    }
    let gam_proj = conv_init(c, c, 3, &mut rng);
    let gcm = vec![
        conv_init(c, c, 3, &mut rng),
        conv_init(c, c, 3, &mut rng),
        conv_init(1, c, 1, &mut rng),
    ];
    let acm_w = kaiming(&[c, config.num_classes], c, &mut rng);
    let acm_b = Tensor::zeros(&[config.num_classes]).unwrap();
    Ok(ModelParams {
        enc,
        lat,
        dec,
        out_head,
        theta,
        phi,
        gam_proj,
        gcm,
        acm_w,
        acm_b,
    })
}

impl<S: Scalar> ModelParams<S> {
    /// Visit every parameter with a stable dotted name, in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<S>)) {
        for (l, stack) in self.enc.iter().enumerate() {
            for (i, p) in stack.iter().enumerate() {
                f(&format!("enc.l{l}.conv{}.w", i + 1), &p.w);
                f(&format!("enc.l{l}.conv{}.b", i + 1), &p.b);
            }
        }
        for (l, p) in self.lat.iter().enumerate() {
            f(&format!("dec.lat{l}.w"), &p.w);
            f(&format!("dec.lat{l}.b"), &p.b);
        }
        for (l, pair) in self.dec.iter().enumerate() {
            f(&format!("dec.td{l}.conv1.w"), &pair[0].w);
            f(&format!("dec.td{l}.conv1.b"), &pair[0].b);
            f(&format!("dec.td{l}.conv2.w"), &pair[1].w);
            f(&format!("dec.td{l}.conv2.b"), &pair[1].b);
        }
        f("dec.out.w", &self.out_head.w);
        f("dec.out.b", &self.out_head.b);
        f("gam.theta.w", &self.theta);
        f("gam.phi.w", &self.phi);
        f("gam.proj.w", &self.gam_proj.w);
        f("gam.proj.b", &self.gam_proj.b);
        for (i, p) in self.gcm.iter().enumerate() {
            f(&format!("gcm.conv{i}.w"), &p.w);
            f(&format!("gcm.conv{i}.b"), &p.b);
        }
        f("acm.fc.w", &self.acm_w);
        f("acm.fc.b", &self.acm_b);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>)) {
        for (l, stack) in self.enc.iter_mut().enumerate() {
            for (i, p) in stack.iter_mut().enumerate() {
                f(&format!("enc.l{l}.conv{}.w", i + 1), &mut p.w);
                f(&format!("enc.l{l}.conv{}.b", i + 1), &mut p.b);
            }
        }
        for (l, p) in self.lat.iter_mut().enumerate() {
            f(&format!("dec.lat{l}.w"), &mut p.w);
            f(&format!("dec.lat{l}.b"), &mut p.b);
        }
        for (l, pair) in self.dec.iter_mut().enumerate() {
            f(&format!("dec.td{l}.conv1.w"), &mut pair[0].w);
            f(&format!("dec.td{l}.conv1.b"), &mut pair[0].b);
            f(&format!("dec.td{l}.conv2.w"), &mut pair[1].w);
            f(&format!("dec.td{l}.conv2.b"), &mut pair[1].b);
        }
        f("dec.out.w", &mut self.out_head.w);
        f("dec.out.b", &mut self.out_head.b);
        f("gam.theta.w", &mut self.theta);
        f("gam.phi.w", &mut self.phi);
        f("gam.proj.w", &mut self.gam_proj.w);
        f("gam.proj.b", &mut self.gam_proj.b);
        for (i, p) in self.gcm.iter_mut().enumerate() {
            f(&format!("gcm.conv{i}.w"), &mut p.w);
            f(&format!("gcm.conv{i}.b"), &mut p.b);
        }
        f("acm.fc.w", &mut self.acm_w);
        f("acm.fc.b", &mut self.acm_b);
    }

    pub fn named(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            enc: self
                .enc
                .iter()
                .map(|stack| {
                    stack
                        .iter()
                        .map(|p| ConvParams { w: p.w.cast(), b: p.b.cast() })
                        .collect()
                })
                .collect(),
            lat: self.lat.iter().map(|p| ConvParams { w: p.w.cast(), b: p.b.cast() }).collect(),
            dec: self
                .dec
                .iter()
                .map(|p| {
                    [
                        ConvParams { w: p[0].w.cast(), b: p[0].b.cast() },
                        ConvParams { w: p[1].w.cast(), b: p[1].b.cast() },
                    ]
                })
                .collect(),
            out_head: ConvParams { w: self.out_head.w.cast(), b: self.out_head.b.cast() },
            theta: self.theta.cast(),
            phi: self.phi.cast(),
            gam_proj: ConvParams { w: self.gam_proj.w.cast(), b: self.gam_proj.b.cast() },
            gcm: self.gcm.iter().map(|p| ConvParams { w: p.w.cast(), b: p.b.cast() }).collect(),
            acm_w: self.acm_w.cast(),
            acm_b: self.acm_b.cast(),
        }
    }
}

/// Tape handles for every parameter, mirroring [`ModelParams`].
pub struct ParamIds {
    pub enc: Vec<Vec<(ValueId, ValueId)>>,
    pub lat: Vec<(ValueId, ValueId)>,
    pub dec: Vec<[(ValueId, ValueId); 2]>,
    pub out_head: (ValueId, ValueId),
    pub theta: ValueId,
    pub phi: ValueId,
    pub gam_proj: (ValueId, ValueId),
    pub gcm: Vec<(ValueId, ValueId)>,
    pub acm_w: ValueId,
    pub acm_b: ValueId,
}

impl ParamIds {
    /// Ids in the same fixed order as [`ModelParams::visit`].
    pub fn ordered(&self) -> Vec<ValueId> {
        let mut out = Vec::new();
        for stack in &self.enc {
            for p in stack {
                out.extend([p.0, p.1]);
            }
        }
        for p in &self.lat {
            out.extend([p.0, p.1]);
        }
        for p in &self.dec {
            out.extend([p[0].0, p[0].1, p[1].0, p[1].1]);
        }
        out.extend([self.out_head.0, self.out_head.1]);
        out.extend([self.theta, self.phi, self.gam_proj.0, self.gam_proj.1]);
        for p in &self.gcm {
            out.extend([p.0, p.1]);
        }
        out.extend([self.acm_w, self.acm_b]);
        out
    }
}

/// Insert every parameter as a tape leaf.
pub fn bind_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    requires_grad: bool,
) -> ParamIds {
    let mut bind = |t: &Tensor<S>| tape.leaf(t.clone(), requires_grad);
    ParamIds {
        enc: params
            .enc
            .iter()
            .map(|stack| stack.iter().map(|p| (bind(&p.w), bind(&p.b))).collect())
            .collect(),
        lat: params.lat.iter().map(|p| (bind(&p.w), bind(&p.b))).collect(),
        dec: params
            .dec
            .iter()
            .map(|p| {
                [
                    (bind(&p[0].w), bind(&p[0].b)),
                    (bind(&p[1].w), bind(&p[1].b)),
                ]
            })
            .collect(),
        out_head: (bind(&params.out_head.w), bind(&params.out_head.b)),
        theta: bind(&params.theta),
        phi: bind(&params.phi),
        gam_proj: (bind(&params.gam_proj.w), bind(&params.gam_proj.b)),
        gcm: params.gcm.iter().map(|p| (bind(&p.w), bind(&p.b))).collect(),
        acm_w: bind(&params.acm_w),
        acm_b: bind(&params.acm_b),
    }
}

/// Pyramid encoder. `images` is N×3×H×W in [0,1]; returns one feature map
/// per level, the last being the N×C×h×w stack consumed by GAM/GCM.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    images: ValueId,
    ids: &ParamIds,
    config: &ModelConfig,
) -> Result<Vec<ValueId>> {
    let shape = tape.value(images).shape.clone();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(CosalError::shape(format!("encode expects N×3×H×W, got {shape:?}")));
    }
    let mut levels = Vec::with_capacity(config.levels);
    // Center [0,1] inputs so the zero-bias first conv starts balanced.
    let offset = tape.constant(Tensor::full(&shape, S::from_f(-0.5))?);
    let mut x = tape.add(images, offset)?;
    for l in 0..config.levels {
        if l > 0 {
            x = tape.avg_pool2(x)?;
        }
        for &(w, b) in &ids.enc[l] {
            let y = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(y);
        }
        levels.push(x);
    }
    Ok(levels)
}

/// FPN-style top-down decoder; `f_out` replaces the deepest skip (it is the
/// GAM-modulated deep feature). When a group attention map is given
/// (N×1×h×w at the deepest resolution), the shallower lateral features are
/// gated by its upsampled copy, so fine detail from single-image skips only
/// survives where the group agrees. Returns N×1×input×input logits.
pub fn decode<S: Scalar>(
    tape: &mut Tape<S>,
    f_out: ValueId,
    skips: &[ValueId],
    attention: Option<ValueId>,
    ids: &ParamIds,
    config: &ModelConfig,
) -> Result<ValueId> {
    let deep = config.levels - 1;
    let fshape = tape.value(f_out).shape.clone();
    let sshape = tape.value(skips[deep]).shape.clone();
    if fshape[2] != sshape[2] || fshape[3] != sshape[3] {
        return Err(CosalError::shape(format!(
            "decode: f_out {fshape:?} does not match deepest skip {sshape:?}"
        )));
    }
    let (lw, lb) = ids.lat[deep];
    let mut p = tape.conv2d(f_out, lw, lb, 1, 0)?;
    let mut gate = attention;
    for l in (0..deep).rev() {
        let up = tape.upsample_bilinear(p, 2)?;
        let (lw, lb) = ids.lat[l];
        let mut lateral = tape.conv2d(skips[l], lw, lb, 1, 0)?;
        if let Some(g) = gate {
            let g_up = tape.upsample_bilinear(g, 2)?;
            lateral = tape.mul(lateral, g_up)?;
            gate = Some(g_up);
        }
        let merged = tape.add(up, lateral)?;
        let (d1w, d1b) = ids.dec[l][0];
        let y = tape.conv2d(merged, d1w, d1b, 1, 1)?;
        let y = tape.relu(y);
        let (d2w, d2b) = ids.dec[l][1];
        let y = tape.conv2d(y, d2w, d2b, 1, 1)?;
        p = tape.relu(y);
    }
    let (ow, ob) = ids.out_head;
    let logits = tape.conv2d(p, ow, ob, 1, 0)?;
    // Fixed output gain, same reasoning as the classifier gain: saturating
    // the sigmoid needs O(1) logits, and the head weights cannot grow that
    // far at the small constant learning rate within the training budget.
    Ok(tape.scale(logits, S::from_f(8.0)))
}

/// ACM classifier: global average pool then one fully connected layer.
/// Returns N×num_classes logits (softmax folded into the loss).
pub fn classify<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValueId,
    ids: &ParamIds,
) -> Result<ValueId> {
    let pooled = tape.reduce_mean(features, &[2, 3], false)?; // N×C
    // Fixed input gain: with a small constant learning rate the FC weights
    // move slowly, so the pooled activations are scaled up to give the
    // classifier a usable logit range within the training budget.
    let pooled = tape.scale(pooled, S::from_f(16.0));
    let z = tape.matmul(pooled, ids.acm_w)?;
    tape.add(z, ids.acm_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig { input_size: 16, base_channels: 4, levels: 2, embed_channels: 8, num_classes: 3 }
    }

    #[test]
    fn init_deterministic_and_biases_zero() {
        let cfg = ModelConfig::default();
        let a = init_params::<f32>(&cfg, 5).unwrap();
        let b = init_params::<f32>(&cfg, 5).unwrap();
        let mut names_a = Vec::new();
        a.visit(|n, t| names_a.push((n.to_string(), t.clone())));
        let mut idx = 0;
        b.visit(|n, t| {
            assert_eq!(names_a[idx].0, n);
            assert_eq!(&names_a[idx].1, t, "{n} differs between same-seed inits");
            idx += 1;
        });
        a.visit(|n, t| {
            if n.ends_with(".b") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{n} bias not zero");
            }
        });
    }

    #[test]
    fn init_weight_std_matches_fan_in() {
        let cfg = ModelConfig::default();
        let p = init_params::<f64>(&cfg, 9).unwrap();
        // Large layer: enc.l2.conv2 is 32×32×3×3 = 9216 weights, fan_in 288.
        let w = &p.enc[2][1].w;
        let n = w.numel() as f64;
        let mean: f64 = w.data.iter().sum::<f64>() / n;
        let var: f64 = w.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = (2.0 / 288.0_f64).sqrt();
        assert!((var.sqrt() - expect).abs() / expect < 0.1, "std {} vs {}", var.sqrt(), expect);
    }

    #[test]
    fn encode_shapes_match_config() {
        let cfg = ModelConfig::default();
        let params = init_params::<f32>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, &params, false);
        let imgs = tape.constant(Tensor::<f32>::full(&[2, 3, 64, 64], 0.5).unwrap());
        let levels = encode(&mut tape, imgs, &ids, &cfg).unwrap();
        assert_eq!(tape.value(levels[2]).shape, vec![2, 32, 16, 16]);
        assert_eq!(tape.value(levels[0]).shape, vec![2, 16, 64, 64]);
    }

    #[test]
    fn encode_zero_image_finite_and_weight_shared() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, &params, false);
        let imgs = tape.constant(Tensor::<f64>::zeros(&[2, 3, 16, 16]).unwrap());
        let levels = encode(&mut tape, imgs, &ids, &cfg).unwrap();
        let deep = tape.value(*levels.last().unwrap());
        assert!(deep.all_finite());
        // Identical images → identical per-image features.
        let per = deep.numel() / 2;
        assert_eq!(deep.data[..per], deep.data[per..]);
    }

    #[test]
    fn decode_full_resolution_output() {
        let cfg = ModelConfig::default();
        let params = init_params::<f32>(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, &params, false);
        let imgs = tape.constant(Tensor::<f32>::full(&[2, 3, 64, 64], 0.3).unwrap());
        let levels = encode(&mut tape, imgs, &ids, &cfg).unwrap();
        let logits = decode(&mut tape, levels[2], &levels, None, &ids, &cfg).unwrap();
        assert_eq!(tape.value(logits).shape, vec![2, 1, 64, 64]);
    }

    #[test]
    fn classify_affine_on_constant_features() {
        // Constant feature map c per channel → logits = Wᵀ·(16c) + b exactly.
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 4).unwrap();
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, &params, false);
        let c = 8;
        let mut feat = Tensor::<f64>::zeros(&[1, c, 4, 4]).unwrap();
        for ch in 0..c {
            for e in 0..16 {
                feat.data[ch * 16 + e] = ch as f64 * 0.1;
            }
        }
        let fid = tape.constant(feat);
        let logits = classify(&mut tape, fid, &ids).unwrap();
        assert_eq!(tape.value(logits).shape, vec![1, 3]);
        for k in 0..3 {
            let expect: f64 = (0..c)
                .map(|ch| 16.0 * ch as f64 * 0.1 * params.acm_w.data[ch * 3 + k])
                .sum::<f64>()
                + params.acm_b.data[k];
            let got = tape.value(logits).data[k];
            assert!((got - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn encode_decode_grad_check_toy() {
        let cfg = ModelConfig { input_size: 8, base_channels: 2, levels: 2, embed_channels: 8, num_classes: 2 };
        let params = init_params::<f64>(&cfg, 6).unwrap();
        let imgs = Tensor::<f64>::randn(&[1, 3, 8, 8], 60).unwrap().map(|v| 0.5 + 0.2 * v.tanh());
        // Check a subset of parameters end to end: first encoder conv and out head.
        let inputs = vec![params.enc[0][0].w.clone(), params.out_head.w.clone()];
        let r = crate::tape::grad_check(
            "encode-decode",
            &inputs,
            move |t, ids| {
                let mut p = params.clone();
                p.enc[0][0].w = t.value(ids[0]).clone();
                p.out_head.w = t.value(ids[1]).clone();
                let mut pids = bind_params(t, &p, false);
                pids.enc[0][0].0 = ids[0];
                pids.out_head.0 = ids[1];
                let im = t.constant(imgs.clone());
                let levels = encode(t, im, &pids, &cfg).unwrap();
                let logits = decode(t, levels[1], &levels, None, &pids, &cfg).unwrap();
                let s = t.sigmoid(logits);
                t.sum_all(s)
            },
            1e-5,
            1e-4,
        );
        assert!(r.pass, "{r}");
    }
}
