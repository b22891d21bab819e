//! Differentiable forward and loss graphs for the capsule autoencoder.
//!
//! Everything here builds onto a caller-supplied [`Tape`], so the same code
//! path serves training (gradients w.r.t. parameters), the evasion attack
//! (gradients w.r.t. a perturbation feeding the input), and plain inference.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::config::ScaeConfig;
use super::params::{AttnParams, LayerParams, ScaeParams};

const LN_EPS: f64 = 1e-5;
const ENTROPY_EPS: f64 = 1e-12;
const NORMALIZE_EPS: f64 = 1e-6;

/// Tape handles for one registered layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
}

/// Tape handles for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: LayerVars,
    pub wk: LayerVars,
    pub wv: LayerVars,
    pub wo: LayerVars,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ff1: LayerVars,
    pub ff2: LayerVars,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// Every parameter registered on a tape, mirroring [`ScaeParams`]. Creation
/// order equals the canonical visit order, so [`ParamVars::ordered`] aligns
/// with flat parameter/gradient vectors.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub conv: Vec<LayerVars>,
    pub pose_head: LayerVars,
    pub presence_head: LayerVars,
    pub attribute_head: LayerVars,
    pub attention_head: LayerVars,
    pub templates: Var,
    pub token_proj: LayerVars,
    pub sab: Vec<AttnVars>,
    pub pma_seeds: Var,
    pub pma: AttnVars,
    pub out_proj: LayerVars,
    pub prior_head: LayerVars,
    pub object_head: LayerVars,
    pub posterior_head: LayerVars,
    pub relative_poses: Var,
}

impl ParamVars {
    /// Put every parameter tensor on the tape as a leaf, in canonical order.
    pub fn register<F: Real>(tape: &mut Tape<F>, p: &ScaeParams<F>) -> ParamVars {
        let layer = |tape: &mut Tape<F>, l: &LayerParams<F>| LayerVars {
            w: tape.leaf(l.w.clone()),
            b: tape.leaf(l.b.clone()),
        };
        let conv = p.conv.iter().map(|l| layer(tape, l)).collect();
        let pose_head = layer(tape, &p.pose_head);
        let presence_head = layer(tape, &p.presence_head);
        let attribute_head = layer(tape, &p.attribute_head);
        let attention_head = layer(tape, &p.attention_head);
        let templates = tape.leaf(p.templates.clone());
        let token_proj = layer(tape, &p.token_proj);
        let attn = |tape: &mut Tape<F>, a: &AttnParams<F>| AttnVars {
            wq: LayerVars { w: tape.leaf(a.wq.w.clone()), b: tape.leaf(a.wq.b.clone()) },
            wk: LayerVars { w: tape.leaf(a.wk.w.clone()), b: tape.leaf(a.wk.b.clone()) },
            wv: LayerVars { w: tape.leaf(a.wv.w.clone()), b: tape.leaf(a.wv.b.clone()) },
            wo: LayerVars { w: tape.leaf(a.wo.w.clone()), b: tape.leaf(a.wo.b.clone()) },
            ln1_gamma: tape.leaf(a.ln1_gamma.clone()),
            ln1_beta: tape.leaf(a.ln1_beta.clone()),
            ff1: LayerVars { w: tape.leaf(a.ff1.w.clone()), b: tape.leaf(a.ff1.b.clone()) },
            ff2: LayerVars { w: tape.leaf(a.ff2.w.clone()), b: tape.leaf(a.ff2.b.clone()) },
            ln2_gamma: tape.leaf(a.ln2_gamma.clone()),
            ln2_beta: tape.leaf(a.ln2_beta.clone()),
        };
        let sab = p.sab.iter().map(|a| attn(tape, a)).collect();
        let pma_seeds = tape.leaf(p.pma_seeds.clone());
        let pma = attn(tape, &p.pma);
        let out_proj = layer(tape, &p.out_proj);
        let prior_head = layer(tape, &p.prior_head);
        let object_head = layer(tape, &p.object_head);
        let posterior_head = layer(tape, &p.posterior_head);
        let relative_poses = tape.leaf(p.relative_poses.clone());
        ParamVars {
            conv,
            pose_head,
            presence_head,
            attribute_head,
            attention_head,
            templates,
            token_proj,
            sab,
            pma_seeds,
            pma,
            out_proj,
            prior_head,
            object_head,
            posterior_head,
            relative_poses,
        }
    }

    /// All parameter vars in canonical order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let push_layer = |l: &LayerVars, out: &mut Vec<Var>| {
            out.push(l.w);
            out.push(l.b);
        };
        for l in &self.conv {
            push_layer(l, &mut out);
        }
        for l in [&self.pose_head, &self.presence_head, &self.attribute_head, &self.attention_head] {
            push_layer(l, &mut out);
        }
        out.push(self.templates);
        push_layer(&self.token_proj, &mut out);
        let push_attn = |a: &AttnVars, out: &mut Vec<Var>| {
            for l in [&a.wq, &a.wk, &a.wv, &a.wo] {
                out.push(l.w);
                out.push(l.b);
            }
            out.push(a.ln1_gamma);
            out.push(a.ln1_beta);
            out.push(a.ff1.w);
            out.push(a.ff1.b);
            out.push(a.ff2.w);
            out.push(a.ff2.b);
            out.push(a.ln2_gamma);
            out.push(a.ln2_beta);
        };
        for a in &self.sab {
            push_attn(a, &mut out);
        }
        out.push(self.pma_seeds);
        push_attn(&self.pma, &mut out);
        for l in [&self.out_proj, &self.prior_head, &self.object_head, &self.posterior_head] {
            push_layer(l, &mut out);
        }
        out.push(self.relative_poses);
        out
    }
}

/// Handles to every interesting intermediate of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Squashed pose parameters `[B,M,6]`.
    pub pose: Var,
    /// Forward template→canvas affine rows `[B,M,6]` derived from `pose`.
    pub pose_affine: Var,
    /// Part presences `[B,M]`.
    pub presence: Var,
    /// Part attributes `[B,M,n]`.
    pub attributes: Var,
    /// Prior object presences `[B,K]`.
    pub prior: Var,
    /// Posterior object presences `[B,K,M]`.
    pub posterior: Var,
    /// Raw object affine rows `[B,K,6]`.
    pub object_affine: Var,
    /// Reconstruction `[B,H,W]`.
    pub recon: Var,
}

/// Loss component handles.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rec: Var,
    pub non_rec: Var,
    pub total: Var,
}

/// `x · W + b` over the last axis, preserving leading shape.
pub fn linear<F: Real>(tape: &mut Tape<F>, x: Var, layer: LayerVars) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let in_dim = *shape.last().unwrap();
    let out_dim = tape.value(layer.w).shape()[1];
    let rows = tape.value(x).numel() / in_dim;
    let flat = tape.reshape(x, &[rows, in_dim]);
    let y = tape.matmul(flat, layer.w);
    let yb = tape.add_bias(y, layer.b);
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = out_dim;
    tape.reshape(yb, &out_shape)
}

/// Multihead attention block with residuals and layer norms: queries from
/// `q_in [B,Q,h]`, keys/values from `kv [B,Mk,h]`.
fn attention_block<F: Real>(
    tape: &mut Tape<F>,
    q_in: Var,
    kv: Var,
    blk: &AttnVars,
    heads: usize,
) -> Var {
    let h = *tape.value(q_in).shape().last().unwrap();
    let dh = h / heads;
    let q = linear(tape, q_in, blk.wq);
    let k = linear(tape, kv, blk.wk);
    let v = linear(tape, kv, blk.wv);
    let inv_sqrt = F::of(1.0 / (dh as f64).sqrt());
    let mut contexts = Vec::with_capacity(heads);
    for j in 0..heads {
        let (qj, kj, vj) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, j * dh, dh),
                tape.slice_last(k, j * dh, dh),
                tape.slice_last(v, j * dh, dh),
            )
        };
        let scores = tape.bmm_nt(qj, kj);
        let scaled = tape.scale(scores, inv_sqrt);
        let att = tape.softmax_last(scaled);
        contexts.push(tape.bmm(att, vj));
    }
    let ctx = if heads == 1 { contexts[0] } else { tape.concat_last(&contexts) };
    let o = linear(tape, ctx, blk.wo);
    let s1 = tape.add(q_in, o);
    let h1 = tape.layer_norm_last(s1, blk.ln1_gamma, blk.ln1_beta, F::of(LN_EPS));
    let f1 = linear(tape, h1, blk.ff1);
    let f1r = tape.relu(f1);
    let f2 = linear(tape, f1r, blk.ff2);
    let s2 = tape.add(h1, f2);
    tape.layer_norm_last(s2, blk.ln2_gamma, blk.ln2_beta, F::of(LN_EPS))
}

fn noise_leaf<F: Real>(
    tape: &mut Tape<F>,
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    half_width: f64,
) -> Var {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::of(rng.random_range(-half_width..half_width)))
        .collect();
    tape.leaf(Tensor::from_vec(data, shape))
}

/// Build the full encoder+decoder graph on `tape`, starting from an input var
/// `x` of shape `[B,H,W]` (which may itself be a computed node).
///
/// `training` injects uniform presence-logit noise using `rng`; inference
/// passes `None` and is fully deterministic.
pub fn build_forward<F: Real>(
    tape: &mut Tape<F>,
    config: &ScaeConfig,
    pv: &ParamVars,
    x: Var,
    mut rng: Option<&mut ChaCha12Rng>,
) -> ForwardVars {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "input must be [B,H,W]");
    let (b, hgt) = (shape[0], shape[1]);
    assert_eq!(hgt, config.canvas_size, "input size does not match canvas_size");
    let m = config.num_part_capsules;
    let k = config.num_object_capsules;
    let n = config.attribute_dim;
    let st = config.set_transformer_spec();

    // Part capsule encoder: conv backbone, then 1×1 heads pooled by
    // per-capsule spatial attention.
    let x4 = tape.reshape(x, &[b, 1, hgt, hgt]);
    let mut feat = x4;
    for (i, spec) in config.conv_layers().iter().enumerate() {
        let c = tape.conv2d(feat, pv.conv[i].w, pv.conv[i].b, spec.stride, 1);
        feat = tape.relu(c);
    }
    let fe = config.feature_edge();
    let s = fe * fe;

    let pose_f = tape.conv2d(feat, pv.pose_head.w, pv.pose_head.b, 1, 0);
    let pres_f = tape.conv2d(feat, pv.presence_head.w, pv.presence_head.b, 1, 0);
    let attr_f = tape.conv2d(feat, pv.attribute_head.w, pv.attribute_head.b, 1, 0);
    let attn_f = tape.conv2d(feat, pv.attention_head.w, pv.attention_head.b, 1, 0);

    let attn_rows = tape.reshape(attn_f, &[b * m, 1, s]);
    let attn_soft = tape.softmax_last(attn_rows);

    let pose_rows = tape.reshape(pose_f, &[b * m, 6, s]);
    let pose_pooled = tape.bmm_nt(attn_soft, pose_rows);
    let pose_raw = tape.reshape(pose_pooled, &[b, m, 6]);

    let pres_rows = tape.reshape(pres_f, &[b * m, 1, s]);
    let pres_pooled = tape.bmm_nt(attn_soft, pres_rows);
    let mut pres_logit = tape.reshape(pres_pooled, &[b, m]);

    let attr_rows = tape.reshape(attr_f, &[b * m, n, s]);
    let attr_pooled = tape.bmm_nt(attn_soft, attr_rows);
    let attributes = tape.reshape(attr_pooled, &[b, m, n]);

    // Squash raw pose into bounded interpretable parameters.
    let pose = {
        let r: Vec<Var> = (0..6).map(|i| tape.slice_last(pose_raw, i, 1)).collect();
        let t0 = tape.tanh(r[0]);
        let sx = tape.exp(t0);
        let t1 = tape.tanh(r[1]);
        let sy = tape.exp(t1);
        let t2 = tape.tanh(r[2]);
        let sh = tape.scale(t2, F::of(0.5));
        let t3 = tape.tanh(r[3]);
        let th = tape.scale(t3, F::of(PI));
        let tx = tape.tanh(r[4]);
        let ty = tape.tanh(r[5]);
        tape.concat_last(&[sx, sy, sh, th, tx, ty])
    };

    if let Some(rng) = rng.as_deref_mut() {
        let noise = noise_leaf(tape, rng, &[b, m], config.part_noise_scale);
        pres_logit = tape.add(pres_logit, noise);
    }
    let presence = tape.sigmoid(pres_logit);

    // Object capsule encoder: set transformer over part tokens.
    let pres3 = tape.reshape(presence, &[b, m, 1]);
    let tokens = tape.concat_last(&[pose, pres3, attributes]);
    let mut z = linear(tape, tokens, pv.token_proj);
    for blk in &pv.sab {
        z = attention_block(tape, z, z, blk, st.heads);
    }
    let seeds = tape.expand(pv.pma_seeds, 0, b);
    let pooled = attention_block(tape, seeds, z, &pv.pma, st.heads);
    let proj = linear(tape, pooled, pv.out_proj);
    let features = tape.relu(proj);

    let prior_flat = linear(tape, features, pv.prior_head);
    let mut prior_logit = tape.reshape(prior_flat, &[b, k]);
    if let Some(rng) = rng.as_deref_mut() {
        let noise = noise_leaf(tape, rng, &[b, k], config.object_noise_scale);
        prior_logit = tape.add(prior_logit, noise);
    }
    let prior = tape.sigmoid(prior_logit);

    let object_affine = linear(tape, features, pv.object_head);

    let mut post_logit = linear(tape, features, pv.posterior_head);
    if let Some(rng) = rng.as_deref_mut() {
        let noise = noise_leaf(tape, rng, &[b, k, m], config.object_noise_scale);
        post_logit = tape.add(post_logit, noise);
    }
    let posterior = tape.sigmoid(post_logit);

    // Decoder: warp sigmoid templates by the part poses, composite by
    // presence-weighted maximum.
    let (pose_affine, recon) = build_decoder(tape, config, pv, pose, presence, b);

    ForwardVars {
        pose,
        pose_affine,
        presence,
        attributes,
        prior,
        posterior,
        object_affine,
        recon,
    }
}

/// Decoder subgraph shared by the forward pass and standalone reconstruction:
/// returns the forward affine rows and the composited canvas.
pub fn build_decoder<F: Real>(
    tape: &mut Tape<F>,
    config: &ScaeConfig,
    pv: &ParamVars,
    pose: Var,
    presence: Var,
    batch: usize,
) -> (Var, Var) {
    let hgt = config.canvas_size;
    let templates = tape.sigmoid(pv.templates);
    let half = F::of((hgt as f64 - 1.0) / 2.0);
    let pose_affine = tape.pose_to_affine(pose, half, half);
    let inv = tape.affine_invert(pose_affine);
    let warped = tape.affine_sample(templates, inv, hgt, hgt);
    let composite = tape.weighted_max_composite(presence, warped);
    let recon = tape.clamp_unit(composite);
    debug_assert_eq!(tape.value(recon).shape(), &[batch, hgt, hgt]);
    (pose_affine, recon)
}

/// Entropy-based sparsity pressure on a `[B,K]` presence matrix: mean
/// per-example entropy (pushes each example to commit to few capsules) minus
/// the entropy of the batch-mean distribution (pushes usage to spread across
/// capsules over the batch).
fn sparsity_term<F: Real>(tape: &mut Tape<F>, presence: Var) -> Var {
    let shape = tape.value(presence).shape().to_vec();
    let (b, k) = (shape[0], shape[1]);
    let sums = tape.sum_axis(presence, 1);
    let sums_e = tape.expand(sums, 1, k);
    let u = tape.div_eps(presence, sums_e, F::of(NORMALIZE_EPS));
    let lnu = tape.ln_eps(u, F::of(ENTROPY_EPS));
    let ulnu = tape.mul(u, lnu);
    let neg_entropy_sum = tape.sum_all(ulnu);
    // Mean per-example entropy H_ex = −(1/B) Σ u ln u.
    let h_ex = tape.scale(neg_entropy_sum, F::of(-1.0 / b as f64));
    let usage_sum = tape.sum_axis(u, 0);
    let usage = tape.scale(usage_sum, F::of(1.0 / b as f64));
    let ln_usage = tape.ln_eps(usage, F::of(ENTROPY_EPS));
    let usage_nent = tape.mul(usage, ln_usage);
    // Σ ū ln ū = −H(ū); adding it subtracts the usage entropy.
    let neg_h_usage = tape.sum_all(usage_nent);
    tape.add(h_ex, neg_h_usage)
}

/// Attach the loss terms to an existing forward graph. `x_target` is the
/// reconstruction target (the clean image under adversarial training).
pub fn build_loss<F: Real>(
    tape: &mut Tape<F>,
    config: &ScaeConfig,
    pv: &ParamVars,
    fwd: &ForwardVars,
    x_target: Var,
) -> LossVars {
    let b = tape.value(fwd.recon).shape()[0];
    let m = config.num_part_capsules;
    let k = config.num_object_capsules;

    // Reconstruction: squared L2 image distance, averaged over the batch.
    let diff = tape.sub(fwd.recon, x_target);
    let sq = tape.square(diff);
    let sum = tape.sum_all(sq);
    let rec = tape.scale(sum, F::of(1.0 / b as f64));

    // Pose prediction: each object capsule predicts every part's affine via
    // its own pose composed with a learned relative map; errors weighted by
    // prior[k]·posterior[k,m], averaged over batch and capsule pairs.
    let pred = tape.affine_compose(fwd.object_affine, pv.relative_poses);
    let target = tape.expand(fwd.pose_affine, 1, k);
    let err = tape.sub(pred, target);
    let err_sq = tape.square(err);
    let pair_err = tape.sum_axis(err_sq, 3);
    let prior_e = tape.expand(fwd.prior, 2, m);
    let w = tape.mul(prior_e, fwd.posterior);
    let weighted = tape.mul(w, pair_err);
    let pose_sum = tape.sum_all(weighted);
    let pose_loss = tape.scale(pose_sum, F::of(1.0 / (b * k * m) as f64));

    let prior_sparsity = sparsity_term(tape, fwd.prior);
    let posterior_reduced = tape.sum_axis(fwd.posterior, 2);
    let posterior_sparsity = sparsity_term(tape, posterior_reduced);

    let p_pose = tape.scale(pose_loss, F::of(config.pose_loss_weight));
    let p_prior = tape.scale(prior_sparsity, F::of(config.prior_sparsity_weight));
    let p_post = tape.scale(posterior_sparsity, F::of(config.posterior_sparsity_weight));
    let partial = tape.add(p_pose, p_prior);
    let non_rec = tape.add(partial, p_post);
    let total = tape.add(rec, non_rec);
    LossVars { rec, non_rec, total }
}
