//! Stacked capsule autoencoder: configuration, parameters, and the
//! differentiable forward/loss graphs.

pub mod config;
pub mod graph;
pub mod params;

pub use config::ScaeConfig;
pub use params::ScaeParams;

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::Tensor;

use graph::{build_decoder, build_forward, build_loss, ForwardVars, ParamVars};

/// Part capsule description of a batch of images.
#[derive(Debug, Clone)]
pub struct PartCapsuleSet<F: Real> {
    /// Squashed pose parameters `[B,M,6]`: `(scale_x, scale_y, shear, rotation, t_x, t_y)`.
    pub pose: Tensor<F>,
    /// Presence probabilities `[B,M]` in `(0,1)`.
    pub presence: Tensor<F>,
    /// Free-form attributes `[B,M,n]`.
    pub attributes: Tensor<F>,
}

/// Full encoder output for a batch.
#[derive(Debug, Clone)]
pub struct ScaeOutputs<F: Real> {
    pub parts: PartCapsuleSet<F>,
    /// Prior object presences `[B,K]`.
    pub prior_presence: Tensor<F>,
    /// Posterior object presences `[B,K,M]`.
    pub posterior_presence: Tensor<F>,
    /// Reconstructed canvases `[B,H,W]`, values in `[0,1]`.
    pub reconstruction: Tensor<F>,
}

/// Scalar loss components; `total` is exactly `rec + non_rec` in `F` arithmetic.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<F: Real> {
    pub rec: F,
    pub non_rec: F,
    pub total: F,
}

/// A capsule autoencoder: immutable architecture plus learnable parameters.
#[derive(Debug, Clone)]
pub struct ScaeModel<F: Real> {
    pub config: ScaeConfig,
    pub params: ScaeParams<F>,
}

impl<F: Real> ScaeModel<F> {
    /// Validate `config` and initialize parameters deterministically from `seed`.
    pub fn init(config: ScaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ScaeParams::init(&config, seed);
        Ok(ScaeModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Encode a batch of images `[B,H,W]`. With `training` the presence
    /// logits receive uniform noise drawn from `rng`; otherwise `rng` is
    /// untouched and the result is deterministic.
    pub fn encode(
        &self,
        images: &Tensor<F>,
        training: bool,
        rng: &mut ChaCha12Rng,
    ) -> ScaeOutputs<F> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params);
        let x = tape.leaf(images.clone());
        let rng_opt = if training { Some(rng) } else { None };
        let fwd = build_forward(&mut tape, &self.config, &pv, x, rng_opt);
        extract_outputs(&tape, &fwd)
    }

    /// Decode a part capsule set back to canvases `[B,H,W]` using the
    /// current templates. Deterministic.
    pub fn reconstruct(&self, parts: &PartCapsuleSet<F>) -> Tensor<F> {
        let batch = parts.pose.shape()[0];
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params);
        let pose = tape.leaf(parts.pose.clone());
        let presence = tape.leaf(parts.presence.clone());
        let (_, recon) = build_decoder(&mut tape, &self.config, &pv, pose, presence, batch);
        tape.value(recon).clone()
    }

    /// Forward pass plus loss on a batch, reconstructing toward `x_target`
    /// (pass the input itself for a plain autoencoding loss).
    pub fn compute_loss(
        &self,
        x: &Tensor<F>,
        x_target: &Tensor<F>,
        training: bool,
        rng: &mut ChaCha12Rng,
    ) -> LossBreakdown<F> {
        let graph = LossGraph::build(self, x, x_target, training, rng);
        graph.breakdown()
    }
}

fn extract_outputs<F: Real>(tape: &Tape<F>, fwd: &ForwardVars) -> ScaeOutputs<F> {
    ScaeOutputs {
        parts: PartCapsuleSet {
            pose: tape.value(fwd.pose).clone(),
            presence: tape.value(fwd.presence).clone(),
            attributes: tape.value(fwd.attributes).clone(),
        },
        prior_presence: tape.value(fwd.prior).clone(),
        posterior_presence: tape.value(fwd.posterior).clone(),
        reconstruction: tape.value(fwd.recon).clone(),
    }
}

/// A materialized forward+loss graph exposing the tape for gradient work.
///
/// Training takes gradients of [`LossGraph::total`] with respect to
/// [`LossGraph::param_vars`]; input-space methods differentiate with respect
/// to [`LossGraph::x`].
pub struct LossGraph<F: Real> {
    pub tape: Tape<F>,
    /// Input leaf `[B,H,W]`.
    pub x: Var,
    /// Parameter leaves in canonical order.
    pub param_vars: Vec<Var>,
    pub forward: ForwardVars,
    pub rec: Var,
    pub non_rec: Var,
    pub total: Var,
}

impl<F: Real> LossGraph<F> {
    pub fn build(
        model: &ScaeModel<F>,
        x: &Tensor<F>,
        x_target: &Tensor<F>,
        training: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &model.params);
        let x_var = tape.leaf(x.clone());
        let target_var = tape.leaf(x_target.clone());
        let rng_opt = if training { Some(rng) } else { None };
        let fwd = build_forward(&mut tape, &model.config, &pv, x_var, rng_opt);
        let loss = build_loss(&mut tape, &model.config, &pv, &fwd, target_var);
        LossGraph {
            tape,
            x: x_var,
            param_vars: pv.ordered(),
            forward: fwd,
            rec: loss.rec,
            non_rec: loss.non_rec,
            total: loss.total,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown<F> {
        LossBreakdown {
            rec: self.tape.value(self.rec).item(),
            non_rec: self.tape.value(self.non_rec).item(),
            total: self.tape.value(self.total).item(),
        }
    }

    /// Backprop from the total loss.
    pub fn backward(&self) -> Gradients<F> {
        self.tape.backward(self.total)
    }

    pub fn outputs(&self) -> ScaeOutputs<F> {
        extract_outputs(&self.tape, &self.forward)
    }
}
