//! Model parameters: storage, deterministic initialization, and a canonical
//! traversal order shared by optimizers, gradients, and checkpoints.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::scalar::Real;
use crate::tensor::Tensor;

use super::config::ScaeConfig;

/// Weights and bias of one convolution or linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

/// One attention block (shared shape for the self-attention layers and the
/// pooling block): projections, two layer norms, and a two-layer feedforward.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<F> {
    pub wq: LayerParams<F>,
    pub wk: LayerParams<F>,
    pub wv: LayerParams<F>,
    pub wo: LayerParams<F>,
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub ff1: LayerParams<F>,
    pub ff2: LayerParams<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
}

/// All learnable tensors of the capsule autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaeParams<F> {
    /// Backbone 3×3 convolutions.
    pub conv: Vec<LayerParams<F>>,
    /// 1×1 heads over the final feature map (m-major channel layout).
    pub pose_head: LayerParams<F>,
    pub presence_head: LayerParams<F>,
    pub attribute_head: LayerParams<F>,
    pub attention_head: LayerParams<F>,
    /// Raw template logits `[M, T, T]`; sigmoid is applied at decode time.
    pub templates: Tensor<F>,
    /// Token embedding into the set transformer width.
    pub token_proj: LayerParams<F>,
    /// Self-attention stack.
    pub sab: Vec<AttnParams<F>>,
    /// Learned pooling seeds `[K, hidden]`.
    pub pma_seeds: Tensor<F>,
    /// Pooling attention block (seeds attend over part tokens).
    pub pma: AttnParams<F>,
    /// Object feature projection `hidden → output`.
    pub out_proj: LayerParams<F>,
    /// Prior presence logit head `output → 1`.
    pub prior_head: LayerParams<F>,
    /// Object affine head `output → 6`, bias initialized to the identity map.
    pub object_head: LayerParams<F>,
    /// Posterior presence logit head `output → M`.
    pub posterior_head: LayerParams<F>,
    /// Learned relative part-in-object affines `[K, M, 6]`.
    pub relative_poses: Tensor<F>,
}

impl<F: Real> ScaeParams<F> {
    /// Deterministic initialization from a seed: He-uniform for conv layers,
    /// Xavier-uniform for linear maps, zero biases (except the object affine
    /// head, whose bias starts at the identity map).
    pub fn init(config: &ScaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let st = config.set_transformer_spec();
        let m = config.num_part_capsules;
        let k = config.num_object_capsules;
        let n = config.attribute_dim;
        let t = config.template_size;

        let mut in_ch = config.channels;
        let mut conv = Vec::new();
        for layer in config.conv_layers() {
            conv.push(conv_layer(&mut rng, layer.channels, in_ch, 3));
            in_ch = layer.channels;
        }
        let feat_ch = in_ch;

        let pose_head = conv_layer(&mut rng, m * 6, feat_ch, 1);
        let presence_head = conv_layer(&mut rng, m, feat_ch, 1);
        let attribute_head = conv_layer(&mut rng, m * n, feat_ch, 1);
        let attention_head = conv_layer(&mut rng, m, feat_ch, 1);

        let templates = uniform(&mut rng, &[m, t, t], 1.0);

        let token_proj = linear_layer(&mut rng, config.token_dim(), st.hidden);
        let sab = (0..st.layers).map(|_| attn_block(&mut rng, st.hidden)).collect();
        let pma_seeds = uniform(
            &mut rng,
            &[k, st.hidden],
            (6.0 / (k + st.hidden) as f64).sqrt(),
        );
        let pma = attn_block(&mut rng, st.hidden);
        let out_proj = linear_layer(&mut rng, st.hidden, st.output);
        let prior_head = linear_layer(&mut rng, st.output, 1);
        let mut object_head = linear_layer(&mut rng, st.output, 6);
        for (i, v) in [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].iter().enumerate() {
            object_head.b.data_mut()[i] = F::of(*v);
        }
        let posterior_head = linear_layer(&mut rng, st.output, m);

        // Relative poses start near the identity with mild jitter so the
        // object→part predictions begin in a sensible range.
        let mut relative_poses = Tensor::zeros(&[k, m, 6]);
        for row in 0..k * m {
            let p = &mut relative_poses.data_mut()[row * 6..row * 6 + 6];
            p[0] = F::of(1.0 + rng.random_range(-0.3..0.3));
            p[1] = F::of(rng.random_range(-0.3..0.3));
            p[2] = F::of(rng.random_range(-3.0..3.0));
            p[3] = F::of(rng.random_range(-0.3..0.3));
            p[4] = F::of(1.0 + rng.random_range(-0.3..0.3));
            p[5] = F::of(rng.random_range(-3.0..3.0));
        }

        ScaeParams {
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

    /// Visit every tensor in the canonical order. The same order is used for
    /// gradient vectors, optimizer state, and checkpoint serialization.
    pub fn visit(&self, mut f: impl FnMut(&Tensor<F>)) {
        self.for_each(|t| f(t));
    }

    /// Mutable canonical traversal.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut Tensor<F>)) {
        for layer in &mut self.conv {
            f(&mut layer.w);
            f(&mut layer.b);
        }
        for layer in [
            &mut self.pose_head,
            &mut self.presence_head,
            &mut self.attribute_head,
            &mut self.attention_head,
        ] {
            f(&mut layer.w);
            f(&mut layer.b);
        }
        f(&mut self.templates);
        f(&mut self.token_proj.w);
        f(&mut self.token_proj.b);
        for block in &mut self.sab {
            visit_attn_mut(block, &mut f);
        }
        f(&mut self.pma_seeds);
        visit_attn_mut(&mut self.pma, &mut f);
        for layer in [
            &mut self.out_proj,
            &mut self.prior_head,
            &mut self.object_head,
            &mut self.posterior_head,
        ] {
            f(&mut layer.w);
            f(&mut layer.b);
        }
        f(&mut self.relative_poses);
    }

    fn for_each(&self, mut f: impl FnMut(&Tensor<F>)) {
        for layer in &self.conv {
            f(&layer.w);
            f(&layer.b);
        }
        for layer in [
            &self.pose_head,
            &self.presence_head,
            &self.attribute_head,
            &self.attention_head,
        ] {
            f(&layer.w);
            f(&layer.b);
        }
        f(&self.templates);
        f(&self.token_proj.w);
        f(&self.token_proj.b);
        for block in &self.sab {
            visit_attn(block, &mut f);
        }
        f(&self.pma_seeds);
        visit_attn(&self.pma, &mut f);
        for layer in [&self.out_proj, &self.prior_head, &self.object_head, &self.posterior_head] {
            f(&layer.w);
            f(&layer.b);
        }
        f(&self.relative_poses);
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(|t| n += t.numel());
        n
    }

    /// Flatten every tensor (canonical order) into one `f64` vector.
    pub fn to_flat_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        self.visit(|t| out.extend(t.data().iter().map(|&x| x.as_f64())));
        out
    }

    /// Overwrite all tensors from a flat `f64` vector in canonical order.
    pub fn load_flat_f64(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(|t| {
            for v in t.data_mut() {
                *v = F::of(flat[pos]);
                pos += 1;
            }
        });
        assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
    }
}

fn visit_attn<F: Real>(block: &AttnParams<F>, f: &mut impl FnMut(&Tensor<F>)) {
    for layer in [&block.wq, &block.wk, &block.wv, &block.wo] {
        f(&layer.w);
        f(&layer.b);
    }
    f(&block.ln1_gamma);
    f(&block.ln1_beta);
    f(&block.ff1.w);
    f(&block.ff1.b);
    f(&block.ff2.w);
    f(&block.ff2.b);
    f(&block.ln2_gamma);
    f(&block.ln2_beta);
}

fn visit_attn_mut<F: Real>(block: &mut AttnParams<F>, f: &mut impl FnMut(&mut Tensor<F>)) {
    for layer in [&mut block.wq, &mut block.wk, &mut block.wv, &mut block.wo] {
        f(&mut layer.w);
        f(&mut layer.b);
    }
    f(&mut block.ln1_gamma);
    f(&mut block.ln1_beta);
    f(&mut block.ff1.w);
    f(&mut block.ff1.b);
    f(&mut block.ff2.w);
    f(&mut block.ff2.b);
    f(&mut block.ln2_gamma);
    f(&mut block.ln2_beta);
}

fn uniform<F: Real>(rng: &mut ChaCha12Rng, shape: &[usize], limit: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        (0..n).map(|_| F::of(rng.random_range(-limit..limit))).collect(),
        shape,
    )
}

/// He-uniform conv kernel `[out, in, k, k]` with zero bias.
fn conv_layer<F: Real>(rng: &mut ChaCha12Rng, out_ch: usize, in_ch: usize, k: usize) -> LayerParams<F> {
    let fan_in = (in_ch * k * k) as f64;
    LayerParams {
        w: uniform(rng, &[out_ch, in_ch, k, k], (6.0 / fan_in).sqrt()),
        b: Tensor::zeros(&[out_ch]),
    }
}

/// Xavier-uniform linear map `[in, out]` with zero bias.
fn linear_layer<F: Real>(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize) -> LayerParams<F> {
    LayerParams {
        w: uniform(rng, &[in_dim, out_dim], (6.0 / (in_dim + out_dim) as f64).sqrt()),
        b: Tensor::zeros(&[out_dim]),
    }
}

/// Layer-norm gains start at one, biases at zero.
fn attn_block<F: Real>(rng: &mut ChaCha12Rng, h: usize) -> AttnParams<F> {
    AttnParams {
        wq: linear_layer(rng, h, h),
        wk: linear_layer(rng, h, h),
        wv: linear_layer(rng, h, h),
        wo: linear_layer(rng, h, h),
        ln1_gamma: Tensor::full(&[h], F::one()),
        ln1_beta: Tensor::zeros(&[h]),
        ff1: linear_layer(rng, h, h),
        ff2: linear_layer(rng, h, h),
        ln2_gamma: Tensor::full(&[h], F::one()),
        ln2_beta: Tensor::zeros(&[h]),
    }
}
