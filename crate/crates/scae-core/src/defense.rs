//! Training regimes built around adversarially generated batches.
//!
//! Five regimes share one epoch engine:
//!
//! * **plain** — ordinary reconstruction training, also used to produce the
//!   frozen teacher for distillation;
//! * **at** — adversarial training: on scheduled batches the input is replaced
//!   by sign-gradient adversarial images while the reconstruction target stays
//!   the clean batch;
//! * **ad** — adversarial distillation: the adversarial-training loss blended
//!   with an L2 distance between the frozen teacher's presence vector on the
//!   clean batch and the student's presence vector on the (possibly
//!   perturbed) input;
//! * **hat** — hybrid: a block of distillation epochs followed by a block of
//!   adversarial-training epochs, with the batch counter carried across the
//!   phase boundary;
//! * **ntat** — ablation of hat that replaces the distillation block with
//!   plain training.
//!
//! The optimizer is RMSProp with momentum and a staircase learning-rate
//! decay. All randomness flows through named ChaCha streams derived from one
//! run seed, so a full training run is bit-reproducible.

use std::io::Write as IoWrite;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{generate_training_adversarial_batch, AttackConfig};
use crate::autodiff::{Gradients, Tape, Var};
use crate::classifiers::{
    reduce_posterior, train_linear, ClassifierHead, LinearClassifier, PresenceSource,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::graph::{build_forward, build_loss, ForwardVars, ParamVars};
use crate::model::params::ScaeParams;
use crate::model::{LossBreakdown, LossGraph, ScaeModel};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Guard inside the distillation L2 norm's square root, matching the guard
/// used for perturbation norms elsewhere; keeps the gradient finite at zero.
const NORM_GUARD_EPS: f64 = 1e-20;

/// Stream labels xor-ed into the run seed so that batch shuffling, presence
/// noise, and the adversarial generator never share an RNG stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;
const NOISE_STREAM: u64 = 0x4e4f_4953_4553_5431;
const GENERATOR_STREAM: u64 = 0x4745_4e45_5241_5431;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which training schedule to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Plain,
    At,
    Ad,
    Hat,
    Ntat,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Regime::Plain),
            "at" => Ok(Regime::At),
            "ad" => Ok(Regime::Ad),
            "hat" => Ok(Regime::Hat),
            "ntat" => Ok(Regime::Ntat),
            other => Err(Error::Config(format!(
                "unknown regime '{other}' (expected plain, at, ad, hat, or ntat)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Plain => "plain",
            Regime::At => "at",
            Regime::Ad => "ad",
            Regime::Hat => "hat",
            Regime::Ntat => "ntat",
        }
    }

    /// Regimes whose schedule includes distillation epochs need a teacher.
    pub fn needs_teacher(self) -> bool {
        matches!(self, Regime::Ad | Regime::Hat)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// RMSProp-with-momentum settings plus the staircase learning-rate decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmsPropConfig {
    /// Base learning rate before decay.
    pub lr: f64,
    /// Momentum on the accumulated update.
    pub momentum: f64,
    /// Decay of the running mean of squared gradients.
    pub rms_decay: f64,
    /// Added to the running mean before the square root.
    pub eps: f64,
    /// Multiplier applied once per `decay_steps` optimizer steps.
    pub decay_rate: f64,
    /// Step interval between decay drops (staircase).
    pub decay_steps: u64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 3e-5,
            momentum: 0.9,
            rms_decay: 0.9,
            eps: 1e-6,
            decay_rate: 0.96,
            decay_steps: 10000,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(0.0 < self.rms_decay && self.rms_decay < 1.0) {
            return Err(Error::Config(format!(
                "rms_decay must be in (0,1), got {}",
                self.rms_decay
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("optimizer eps must be positive, got {}", self.eps)));
        }
        if !(0.0 < self.decay_rate && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay_rate must be in (0,1], got {}",
                self.decay_rate
            )));
        }
        if self.decay_steps == 0 {
            return Err(Error::Config("decay_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Settings shared by every training regime.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Training schedule to run.
    pub regime: Regime,
    /// Normal batches between consecutive adversarial batches.
    pub interval: usize,
    /// Weight of the distillation term in the blended loss.
    pub lambda: f64,
    /// Epochs for the single-phase regimes (plain, at, ad).
    pub n_ep: usize,
    /// Epochs in the first phase of hat/ntat.
    pub n_ad: usize,
    /// Epochs in the second phase of hat/ntat.
    pub n_at: usize,
    /// Training batch size.
    pub batch_size: usize,
    /// Optimizer settings.
    pub optimizer: RmsPropConfig,
    /// Attack settings for the training-time generator.
    pub generator: AttackConfig,
    /// Which presence vector the distillation distance compares.
    pub distill_source: PresenceSource,
    /// Label classes for the generator's linear target head.
    pub classes: usize,
    /// Gradient-descent epochs when refitting the linear target head.
    pub head_epochs: usize,
    /// Learning rate for the linear target head refit.
    pub head_lr: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            regime: Regime::Plain,
            interval: 1,
            lambda: 0.5,
            n_ep: 100,
            n_ad: 50,
            n_at: 50,
            batch_size: 100,
            optimizer: RmsPropConfig::default(),
            generator: AttackConfig::training(),
            distill_source: PresenceSource::Prior,
            classes: 10,
            head_epochs: 200,
            head_lr: 0.2,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval < 1 {
            return Err(Error::Config(format!(
                "adversarial-batch interval must be at least 1, got {}",
                self.interval
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.head_epochs < 1 {
            return Err(Error::Config("head_epochs must be at least 1".into()));
        }
        if !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return Err(Error::Config(format!(
                "head_lr must be positive, got {}",
                self.head_lr
            )));
        }
        self.optimizer.validate()?;
        self.generator.validate()
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Learning rate in effect at optimizer step `step` (0-based): the base rate
/// multiplied by `decay_rate` once per completed `decay_steps` interval.
pub fn lr_at_step(cfg: &RmsPropConfig, step: u64) -> f64 {
    let drops = (step / cfg.decay_steps) as i32;
    cfg.lr * cfg.decay_rate.powi(drops)
}

/// RMSProp with momentum over the model's flat parameter vector:
///
/// ```text
/// rms ← rms_decay·rms + (1−rms_decay)·g²
/// mom ← momentum·mom + lr·g/√(rms + eps)
/// p   ← p − mom
/// ```
///
/// State is kept in the model's scalar type so training is bit-reproducible
/// per precision.
pub struct RmsProp<F: Real> {
    cfg: RmsPropConfig,
    rms: Vec<F>,
    mom: Vec<F>,
    step: u64,
}

impl<F: Real> RmsProp<F> {
    pub fn new(param_count: usize, cfg: RmsPropConfig) -> Self {
        RmsProp {
            cfg,
            rms: vec![F::zero(); param_count],
            mom: vec![F::zero(); param_count],
            step: 0,
        }
    }

    /// Optimizer steps taken so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`RmsProp::apply`] will use.
    pub fn current_lr(&self) -> f64 {
        lr_at_step(&self.cfg, self.step)
    }

    /// Apply one update. `grads` must hold one tensor per parameter tensor in
    /// canonical visit order, shapes matching.
    pub fn apply(&mut self, params: &mut ScaeParams<F>, grads: &[Tensor<F>]) {
        let lr = F::of(self.current_lr());
        let rho = F::of(self.cfg.rms_decay);
        let one_minus_rho = F::of(1.0 - self.cfg.rms_decay);
        let momentum = F::of(self.cfg.momentum);
        let eps = F::of(self.cfg.eps);
        let rms = &mut self.rms;
        let mom = &mut self.mom;
        let mut cursor = 0usize;
        let mut ti = 0usize;
        params.visit_mut(|t| {
            let g = &grads[ti];
            assert_eq!(g.shape(), t.shape(), "gradient {ti} has mismatched shape");
            ti += 1;
            for (p, &gv) in t.data_mut().iter_mut().zip(g.data().iter()) {
                let r = rho * rms[cursor] + one_minus_rho * gv * gv;
                rms[cursor] = r;
                let m = momentum * mom[cursor] + lr * gv / (r + eps).sqrt();
                mom[cursor] = m;
                *p = *p - m;
                cursor += 1;
            }
        });
        assert_eq!(ti, grads.len(), "gradient list length does not match parameter tensors");
        debug_assert_eq!(cursor, rms.len());
        self.step += 1;
    }
}

// ---------------------------------------------------------------------------
// Batch schedule
// ---------------------------------------------------------------------------

/// Decide whether the next batch is adversarial and advance the counter:
/// after `k` normal batches the next one is adversarial, which resets the
/// count. `n_bch` stays in `[0, k]`.
pub fn is_adversarial_batch(n_bch: &mut usize, k: usize) -> bool {
    if *n_bch == k {
        *n_bch = 0;
        true
    } else {
        *n_bch += 1;
        false
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Retargeted loss: the usual non-reconstruction terms on the actual input
/// `x`, but the reconstruction error measured against `x_target` instead of
/// `x` itself. With `x_target = x` this is exactly the plain training loss.
pub fn loss_at<F: Real>(
    model: &ScaeModel<F>,
    x: &Tensor<F>,
    x_target: &Tensor<F>,
    training: bool,
    rng: &mut ChaCha12Rng,
) -> LossBreakdown<F> {
    model.compute_loss(x, x_target, training, rng)
}

/// Component values of the blended distillation loss.
#[derive(Clone, Copy, Debug)]
pub struct AdLossBreakdown<F: Real> {
    pub rec: F,
    pub non_rec: F,
    /// Retargeted loss of the student on the input (rec + non_rec).
    pub at_total: F,
    /// Mean per-example L2 distance between teacher and student presences.
    pub distill: F,
    /// `(1−λ)·at_total + λ·distill`.
    pub total: F,
}

/// Forward + blended-loss graph for one distillation batch.
///
/// The teacher's presence vector enters as a constant leaf, so no gradient
/// can reach the teacher; everything differentiable belongs to the student.
pub struct AdLossGraph<F: Real> {
    pub tape: Tape<F>,
    /// Input leaf `[B,H,W]`.
    pub x: Var,
    /// Student parameter leaves in canonical order.
    pub param_vars: Vec<Var>,
    pub forward: ForwardVars,
    pub rec: Var,
    pub non_rec: Var,
    pub at_total: Var,
    pub distill: Var,
    pub total: Var,
}

impl<F: Real> AdLossGraph<F> {
    pub fn breakdown(&self) -> AdLossBreakdown<F> {
        AdLossBreakdown {
            rec: self.tape.value(self.rec).item(),
            non_rec: self.tape.value(self.non_rec).item(),
            at_total: self.tape.value(self.at_total).item(),
            distill: self.tape.value(self.distill).item(),
            total: self.tape.value(self.total).item(),
        }
    }

    pub fn backward(&self) -> Gradients<F> {
        self.tape.backward(self.total)
    }
}

/// The teacher's presence features on a batch, evaluated without noise.
pub fn teacher_presence<F: Real>(
    teacher: &ScaeModel<F>,
    x: &Tensor<F>,
    source: PresenceSource,
) -> Tensor<F> {
    // Inference ignores the RNG; any seed works.
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let out = teacher.encode(x, false, &mut rng);
    match source {
        PresenceSource::Prior => out.prior_presence,
        PresenceSource::Posterior => reduce_posterior(&out.posterior_presence),
    }
}

/// Build the blended distillation loss for a student batch:
/// `(1−λ)·loss_at(x_input → x_target) + λ·distill`, where `distill` is the
/// batch mean of per-example L2 distances between `teacher_presence`
/// (precomputed on the clean batch) and the student's matching presence
/// vector on `x_input`.
pub fn build_ad_loss_graph<F: Real>(
    student: &ScaeModel<F>,
    teacher_presence: &Tensor<F>,
    x_input: &Tensor<F>,
    x_target: &Tensor<F>,
    lambda: f64,
    source: PresenceSource,
    training: bool,
    rng: &mut ChaCha12Rng,
) -> AdLossGraph<F> {
    let batch = x_input.shape()[0];
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, &student.params);
    let x_var = tape.leaf(x_input.clone());
    let target_var = tape.leaf(x_target.clone());
    let rng_opt = if training { Some(rng) } else { None };
    let fwd = build_forward(&mut tape, &student.config, &pv, x_var, rng_opt);
    let loss = build_loss(&mut tape, &student.config, &pv, &fwd, target_var);

    let student_presence = match source {
        PresenceSource::Prior => fwd.prior,
        PresenceSource::Posterior => tape.sum_axis(fwd.posterior, 2),
    };
    let teacher_leaf = tape.leaf(teacher_presence.clone());
    let diff = tape.sub(student_presence, teacher_leaf);
    let sq = tape.square(diff);
    let row_sums = tape.sum_axis(sq, 1);
    let norms = tape.sqrt_eps(row_sums, F::of(NORM_GUARD_EPS));
    let norm_sum = tape.sum_all(norms);
    let distill = tape.scale(norm_sum, F::of(1.0 / batch as f64));

    let weighted_at = tape.scale(loss.total, F::of(1.0 - lambda));
    let weighted_distill = tape.scale(distill, F::of(lambda));
    let total = tape.add(weighted_at, weighted_distill);

    AdLossGraph {
        tape,
        x: x_var,
        param_vars: pv.ordered(),
        forward: fwd,
        rec: loss.rec,
        non_rec: loss.non_rec,
        at_total: loss.total,
        distill,
        total,
    }
}

/// Evaluate the blended distillation loss:
/// `(1−λ)·loss_at(x_input → x_clean) + λ·‖presence_tch(x_clean) − presence_stu(x_input)‖₂`.
#[allow(clippy::too_many_arguments)]
pub fn loss_ad<F: Real>(
    x_clean: &Tensor<F>,
    x_input: &Tensor<F>,
    teacher: &ScaeModel<F>,
    student: &ScaeModel<F>,
    lambda: f64,
    source: PresenceSource,
    training: bool,
    rng: &mut ChaCha12Rng,
) -> AdLossBreakdown<F> {
    let tch = teacher_presence(teacher, x_clean, source);
    let graph = build_ad_loss_graph(student, &tch, x_input, x_clean, lambda, source, training, rng);
    graph.breakdown()
}

// ---------------------------------------------------------------------------
// Adversarial generators
// ---------------------------------------------------------------------------

/// Produces the input images for a scheduled adversarial batch.
pub trait AdversarialGenerator<F: Real> {
    /// Return one image per row of `xs`; rows that could not be attacked stay
    /// clean. `first_sample_id` keys the per-sample RNG streams.
    fn generate(
        &self,
        model: &ScaeModel<F>,
        head: &ClassifierHead<F>,
        xs: &Tensor<F>,
        first_sample_id: u64,
    ) -> Result<Tensor<F>>;
}

/// The sign-gradient training generator.
#[derive(Clone, Debug)]
pub struct SignGenerator {
    pub cfg: AttackConfig,
    pub base_seed: u64,
}

impl<F: Real> AdversarialGenerator<F> for SignGenerator {
    fn generate(
        &self,
        model: &ScaeModel<F>,
        head: &ClassifierHead<F>,
        xs: &Tensor<F>,
        first_sample_id: u64,
    ) -> Result<Tensor<F>> {
        generate_training_adversarial_batch(model, head, xs, &self.cfg, self.base_seed, first_sample_id)
    }
}

/// Degenerate generator returning each batch unchanged; with it, adversarial
/// training collapses to plain training step for step.
#[derive(Clone, Copy, Debug)]
pub struct IdentityGenerator;

impl<F: Real> AdversarialGenerator<F> for IdentityGenerator {
    fn generate(
        &self,
        _model: &ScaeModel<F>,
        _head: &ClassifierHead<F>,
        xs: &Tensor<F>,
        _first_sample_id: u64,
    ) -> Result<Tensor<F>> {
        Ok(xs.clone())
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Loss and schedule statistics for one epoch; loss components are
/// per-example means over the whole epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total_loss: f64,
    pub rec: f64,
    pub non_rec: f64,
    pub distill: f64,
    pub adv_batches: usize,
    pub normal_batches: usize,
}

/// Per-epoch training statistics plus an optional checkpoint path filled in
/// by the caller that saved the model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// Serialize as CSV with columns
    /// `epoch,total_loss,rec,non_rec,distill,adv_batches`.
    pub fn write_csv<W: IoWrite>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,total_loss,rec,non_rec,distill,adv_batches")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.epoch, e.total_loss, e.rec, e.non_rec, e.distill, e.adv_batches
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

// ---------------------------------------------------------------------------
// Training engine
// ---------------------------------------------------------------------------

/// What the epoch engine does with each batch inside one phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Plain,
    At,
    Ad,
}

/// Refit the generator's linear target head on the student's current
/// posterior presences (evaluated without noise, in batch-size chunks).
fn fit_generator_head<F: Real>(
    model: &ScaeModel<F>,
    train: &Dataset<F>,
    cfg: &DefenseConfig,
) -> LinearClassifier<F> {
    let k = model.config.num_object_capsules;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut features = Vec::with_capacity(train.len() * k);
    let mut i = 0;
    while i < train.len() {
        let j = (i + cfg.batch_size).min(train.len());
        let idx: Vec<usize> = (i..j).collect();
        let batch = train.gather(&idx);
        let out = model.encode(&batch.images, false, &mut rng);
        features.extend_from_slice(reduce_posterior(&out.posterior_presence).data());
        i = j;
    }
    let features = Tensor::from_vec(features, &[train.len(), k]);
    train_linear(&features, train.labels(), cfg.classes, cfg.head_epochs, cfg.head_lr)
}

/// Run a sequence of `(phase, epochs)` blocks over the dataset with one
/// optimizer, one batch counter, and one pair of RNG streams, so multi-phase
/// schedules behave exactly like their single-phase prefixes.
fn run_schedule<F: Real, G: AdversarialGenerator<F>>(
    model: &mut ScaeModel<F>,
    train: &Dataset<F>,
    cfg: &DefenseConfig,
    teacher: Option<&ScaeModel<F>>,
    generator: Option<&G>,
    phases: &[(Phase, usize)],
    seed: u64,
    mut on_epoch: impl FnMut(&ScaeModel<F>, &EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for &(phase, _) in phases {
        if phase != Phase::Plain && generator.is_none() {
            return Err(Error::Config("adversarial phase scheduled without a generator".into()));
        }
        if phase == Phase::Ad && teacher.is_none() {
            return Err(Error::Config("distillation phase scheduled without a teacher".into()));
        }
    }

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut noise_rng = ChaCha12Rng::seed_from_u64(seed ^ NOISE_STREAM);
    let mut optimizer = RmsProp::new(model.param_count(), cfg.optimizer.clone());
    let mut n_bch = 0usize;
    let mut sample_cursor = 0u64;
    let mut report = TrainReport::default();
    let mut epoch = 0usize;
    let n = train.len() as f64;

    for &(phase, count) in phases {
        for _ in 0..count {
            // The generator targets a linear head kept in sync with the
            // student; refit it at every adversarial-phase epoch start.
            let head = if phase == Phase::Plain {
                None
            } else {
                Some(ClassifierHead::Linear(fit_generator_head(model, train, cfg)))
            };

            let mut sums = [0.0f64; 4]; // total, rec, non_rec, distill
            let mut adv_batches = 0usize;
            let mut normal_batches = 0usize;

            for batch in train.batches(cfg.batch_size, true, &mut shuffle_rng) {
                let b = batch.labels.len();
                let first_id = sample_cursor;
                sample_cursor += b as u64;
                let adversarial =
                    phase != Phase::Plain && is_adversarial_batch(&mut n_bch, cfg.interval);
                if adversarial {
                    adv_batches += 1;
                } else {
                    normal_batches += 1;
                }

                let x_clean = batch.images;
                let x_input = if adversarial {
                    let gen = generator.expect("checked above");
                    let target = head.as_ref().expect("adversarial phases fit a head");
                    // A failed generation degenerates the batch to normal
                    // training on the clean images.
                    match gen.generate(&*model, target, &x_clean, first_id) {
                        Ok(adv) => adv,
                        Err(_) => x_clean.clone(),
                    }
                } else {
                    x_clean.clone()
                };

                let w = b as f64;
                match phase {
                    Phase::Plain | Phase::At => {
                        let graph = LossGraph::build(model, &x_input, &x_clean, true, &mut noise_rng);
                        let grads = graph.backward();
                        let grad_tensors: Vec<Tensor<F>> = graph
                            .param_vars
                            .iter()
                            .map(|&v| grads.get(&graph.tape, v))
                            .collect();
                        let bd = graph.breakdown();
                        drop(graph);
                        sums[0] += bd.total.as_f64() * w;
                        sums[1] += bd.rec.as_f64() * w;
                        sums[2] += bd.non_rec.as_f64() * w;
                        optimizer.apply(&mut model.params, &grad_tensors);
                    }
                    Phase::Ad => {
                        let tch = teacher.expect("checked above");
                        let tch_presence = teacher_presence(tch, &x_clean, cfg.distill_source);
                        let graph = build_ad_loss_graph(
                            model,
                            &tch_presence,
                            &x_input,
                            &x_clean,
                            cfg.lambda,
                            cfg.distill_source,
                            true,
                            &mut noise_rng,
                        );
                        let grads = graph.backward();
                        let grad_tensors: Vec<Tensor<F>> = graph
                            .param_vars
                            .iter()
                            .map(|&v| grads.get(&graph.tape, v))
                            .collect();
                        let bd = graph.breakdown();
                        drop(graph);
                        sums[0] += bd.total.as_f64() * w;
                        sums[1] += bd.rec.as_f64() * w;
                        sums[2] += bd.non_rec.as_f64() * w;
                        sums[3] += bd.distill.as_f64() * w;
                        optimizer.apply(&mut model.params, &grad_tensors);
                    }
                }
            }

            let stats = EpochStats {
                epoch,
                total_loss: sums[0] / n,
                rec: sums[1] / n,
                non_rec: sums[2] / n,
                distill: sums[3] / n,
                adv_batches,
                normal_batches,
            };
            on_epoch(&*model, &stats);
            report.epochs.push(stats);
            epoch += 1;
        }
    }
    Ok(report)
}

/// Plain reconstruction training for `cfg.n_ep` epochs.
pub fn train_plain<F: Real>(
    model: &mut ScaeModel<F>,
    train: &Dataset<F>,
    cfg: &DefenseConfig,
    seed: u64,
    on_epoch: impl FnMut(&ScaeModel<F>, &EpochStats),
) -> Result<TrainReport> {
    run_schedule(
        model,
        train,
        cfg,
        None,
        None::<&SignGenerator>,
        &[(Phase::Plain, cfg.n_ep)],
        seed,
        on_epoch,
    )
}

/// Adversarial training for `cfg.n_ep` epochs: every `interval`-th batch is
/// replaced by generated adversarial images, reconstruction targets stay
/// clean.
pub fn train_at<F: Real, G: AdversarialGenerator<F>>(
    model: &mut ScaeModel<F>,
    train: &Dataset<F>,
    cfg: &DefenseConfig,
    generator: &G,
    seed: u64,
    on_epoch: impl FnMut(&ScaeModel<F>, &EpochStats),
) -> Result<TrainReport> {
    run_schedule(
        model,
        train,
        cfg,
        None,
        Some(generator),
        &[(Phase::At, cfg.n_ep)],
        seed,
        on_epoch,
    )
}

/// Adversarial distillation for `cfg.n_ep` epochs against a frozen teacher.
pub fn train_ad<F: Real, G: AdversarialGenerator<F>>(
    model: &mut ScaeModel<F>,
    train: &Dataset<F>,
    cfg: &DefenseConfig,
    teacher: &ScaeModel<F>,
    generator: &G,
    seed: u64,
    on_epoch: impl FnMut(&ScaeModel<F>, &EpochStats),
) -> Result<TrainReport> {
    run_schedule(
        model,
        train,
        cfg,
        Some(teacher),
        Some(generator),
        &[(Phase::Ad, cfg.n_ep)],
        seed,
        on_epoch,
    )
}

/// Hybrid schedule: `cfg.n_ad` distillation epochs, then `cfg.n_at`
/// adversarial-training epochs, with optimizer state and the batch counter
/// carried across the boundary.
pub fn train_hat<F: Real, G: AdversarialGenerator<F>>(
    model: &mut ScaeModel<F>,
    train: &Dataset<F>,
    cfg: &DefenseConfig,
    teacher: &ScaeModel<F>,
    generator: &G,
    seed: u64,
    on_epoch: impl FnMut(&ScaeModel<F>, &EpochStats),
) -> Result<TrainReport> {
    run_schedule(
        model,
        train,
        cfg,
        Some(teacher),
        Some(generator),
        &[(Phase::Ad, cfg.n_ad), (Phase::At, cfg.n_at)],
        seed,
        on_epoch,
    )
}

/// Ablation of the hybrid schedule: `cfg.n_ad` plain epochs, then `cfg.n_at`
/// adversarial-training epochs. No teacher involved.
pub fn train_ntat<F: Real, G: AdversarialGenerator<F>>(
    model: &mut ScaeModel<F>,
    train: &Dataset<F>,
    cfg: &DefenseConfig,
    generator: &G,
    seed: u64,
    on_epoch: impl FnMut(&ScaeModel<F>, &EpochStats),
) -> Result<TrainReport> {
    run_schedule(
        model,
        train,
        cfg,
        None,
        Some(generator),
        &[(Phase::Plain, cfg.n_ad), (Phase::At, cfg.n_at)],
        seed,
        on_epoch,
    )
}

/// Dispatch on `cfg.regime` with the sign-gradient generator. Regimes with a
/// distillation phase require `teacher`.
pub fn train_regime<F: Real>(
    model: &mut ScaeModel<F>,
    train: &Dataset<F>,
    cfg: &DefenseConfig,
    teacher: Option<&ScaeModel<F>>,
    seed: u64,
    on_epoch: impl FnMut(&ScaeModel<F>, &EpochStats),
) -> Result<TrainReport> {
    let generator = SignGenerator {
        cfg: cfg.generator.clone(),
        base_seed: seed ^ GENERATOR_STREAM,
    };
    match cfg.regime {
        Regime::Plain => train_plain(model, train, cfg, seed, on_epoch),
        Regime::At => train_at(model, train, cfg, &generator, seed, on_epoch),
        Regime::Ad => {
            let teacher = teacher.ok_or_else(|| {
                Error::Config("regime 'ad' requires a teacher model".into())
            })?;
            train_ad(model, train, cfg, teacher, &generator, seed, on_epoch)
        }
        Regime::Hat => {
            let teacher = teacher.ok_or_else(|| {
                Error::Config("regime 'hat' requires a teacher model".into())
            })?;
            train_hat(model, train, cfg, teacher, &generator, seed, on_epoch)
        }
        Regime::Ntat => train_ntat(model, train, cfg, &generator, seed, on_epoch),
    }
}
