//! Adversarial perturbation engines: an optimizer-based evasion attack for
//! evaluation and a fast sign-gradient generator for training, sharing the
//! target-capsule selection and arctanh change-of-variables machinery.
//!
//! Both minimize `‖p‖₂ + α · Σ_{i∈S} prior_i(x+p)` over a perturbation
//! parameterized in arctanh space (which keeps `x+p` inside `[0,1]` with no
//! clipping), bisecting `α` between rounds. Per-sample runs are driven by
//! per-sample RNG streams, so attacking a batch at once is bitwise identical
//! to attacking each sample alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::Tape;
use crate::classifiers::ClassifierHead;
use crate::error::{Error, Result};
use crate::model::graph::{build_forward, ParamVars};
use serde::{Deserialize, Serialize};

use crate::model::ScaeModel;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Hyperparameters shared by both perturbation engines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Initial trade-off weight α.
    pub alpha_init: f64,
    /// Multiplier applied to α while no upper bracket exists.
    pub alpha_blowup: f64,
    /// Rounds (α updates).
    pub n_outer: usize,
    /// Optimizer steps per round.
    pub n_inner: usize,
    /// Sign-step size β (training generator only).
    pub beta: f64,
    /// Arctanh safety factor keeping the change of variables finite.
    pub eps_clamp: f64,
    /// Adaptive-moment optimizer settings (evasion attack only).
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl AttackConfig {
    /// Evaluation-time profile: 9 inner steps, 300 rounds.
    pub fn evaluation() -> Self {
        AttackConfig {
            alpha_init: 100.0,
            alpha_blowup: 10.0,
            n_outer: 300,
            n_inner: 9,
            beta: 1.0,
            eps_clamp: 0.999999,
            adam_lr: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    /// Training-time generator profile: 5 inner steps, 30 rounds.
    pub fn training() -> Self {
        AttackConfig {
            n_outer: 30,
            n_inner: 5,
            ..AttackConfig::evaluation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outer < 1 || self.n_inner < 1 {
            return Err(Error::Config("attack needs at least one round and one step".into()));
        }
        if !(self.eps_clamp > 0.0 && self.eps_clamp < 1.0) {
            return Err(Error::Config(format!(
                "eps_clamp must lie strictly inside (0,1), got {}",
                self.eps_clamp
            )));
        }
        if self.alpha_init <= 0.0 {
            return Err(Error::Config("alpha_init must be positive".into()));
        }
        if self.alpha_blowup <= 1.0 {
            return Err(Error::Config("alpha_blowup must exceed 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one per-sample attack run.
#[derive(Debug, Clone)]
pub struct AttackResult<F: Real> {
    /// Best perturbation `[H,W]` (zeros when no adversary was found).
    pub perturbation: Tensor<F>,
    /// `x + p`, always inside `[0,1]` (the clean image when unsuccessful).
    pub adversarial: Tensor<F>,
    /// `‖p‖₂` of the best perturbation; infinite when unsuccessful.
    pub l2_norm: f64,
    pub success: bool,
    /// Attacked object capsules (indices into the prior presence vector).
    pub target_set: Vec<usize>,
    /// Classifier label of the clean input.
    pub clean_label: u8,
    /// Classifier label of `adversarial` (equals `clean_label` on failure).
    pub adv_label: u8,
}

/// Capsules whose prior presence strictly exceeds the mean presence.
pub fn select_target_capsules<F: Real>(prior_presence: &[F]) -> Vec<usize> {
    let k = prior_presence.len();
    let mean = prior_presence.iter().copied().sum::<F>() / F::of(k as f64);
    (0..k).filter(|&i| prior_presence[i] > mean).collect()
}

/// Map an image into arctanh space: `w = arctanh((2x−1)·ε)`.
pub fn to_w<F: Real>(x: &Tensor<F>, eps_clamp: f64) -> Tensor<F> {
    x.map(|v| {
        let z = (2.0 * v.as_f64() - 1.0) * eps_clamp;
        F::of(z.atanh())
    })
}

/// Map back: `x_adv = ½(tanh(w+p′)+1)`, `p = x_adv − x`. The tanh keeps
/// `x_adv` strictly inside `(0,1)` for every `p′`.
pub fn from_w<F: Real>(w: &Tensor<F>, p_prime: &Tensor<F>, x: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    assert_eq!(w.shape(), p_prime.shape());
    assert_eq!(w.shape(), x.shape());
    let x_adv = Tensor::from_vec(
        w.data()
            .iter()
            .zip(p_prime.data())
            .map(|(&wv, &pv)| F::of(0.5 * ((wv + pv).as_f64().tanh() + 1.0)))
            .collect(),
        w.shape(),
    );
    let p = Tensor::from_vec(
        x_adv
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| a - b)
            .collect(),
        x.shape(),
    );
    (x_adv, p)
}

/// Reference objective: `‖x_adv − x‖₂ + α · Σ_{i∈S} prior_i(x_adv)`,
/// recomputed from a plain (tape-free) forward pass. The in-graph objective
/// used for gradients must agree with this value.
pub fn attack_objective<F: Real>(
    model: &ScaeModel<F>,
    x_adv: &Tensor<F>,
    x: &Tensor<F>,
    target_set: &[usize],
    alpha: f64,
) -> f64 {
    let batch = Tensor::from_vec(x_adv.data().to_vec(), &[1, x_adv.shape()[0], x_adv.shape()[1]]);
    let out = model.encode(&batch, false, &mut ChaCha12Rng::seed_from_u64(0));
    let l2: f64 = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| {
            let d = (a - b).as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let targeted: f64 = target_set
        .iter()
        .map(|&i| out.prior_presence.data()[i].as_f64())
        .sum();
    l2 + alpha * targeted
}

/// Bisection step for α: a successful round lowers the upper bracket to α,
/// a failed one raises the lower bracket; the next α is the midpoint, or
/// `α·blowup` while no upper bracket exists yet.
pub fn update_alpha(
    alpha: f64,
    alpha_ub: f64,
    alpha_lb: f64,
    round_succeeded: bool,
    blowup: f64,
) -> (f64, f64, f64) {
    let (ub, lb) = if round_succeeded {
        (alpha, alpha_lb)
    } else {
        (alpha_ub, alpha)
    };
    let next = if ub.is_infinite() {
        alpha * blowup
    } else {
        (ub + lb) / 2.0
    };
    (next, ub, lb)
}

/// Sign with a zero fixed point (`signum` would map 0 → 1).
pub fn sign0<F: Real>(g: F) -> F {
    if g > F::zero() {
        F::one()
    } else if g < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Elementwise adaptive-moment optimizer state over one flat buffer.
#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    m: Vec<F>,
    v: Vec<F>,
    t: u32,
}

impl<F: Real> AdamState<F> {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![F::zero(); n], v: vec![F::zero(); n], t: 0 }
    }

    /// One update of `params` in place given `grads`.
    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = F::of(beta1);
        let b2 = F::of(beta2);
        let bc1 = F::of(1.0 - beta1.powi(self.t as i32));
        let bc2 = F::of(1.0 - beta2.powi(self.t as i32));
        let lr = F::of(lr);
        let eps = F::of(eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StepRule {
    Adam,
    Sign,
}

/// Per-sample RNG stream: a function of the caller's base seed and the
/// sample id only, so results never depend on batch composition.
fn sample_rng(base_seed: u64, sample_id: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(
        base_seed.wrapping_add((sample_id + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    )
}

struct SampleState<F: Real> {
    /// Row in the active batch.
    row: usize,
    /// Position in the caller's batch.
    index: usize,
    clean_label: u8,
    target_set: Vec<usize>,
    alpha: f64,
    alpha_ub: f64,
    alpha_lb: f64,
    rng: ChaCha12Rng,
    best: Option<(f64, Tensor<F>, u8)>,
}

fn l2_between<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Shared attack loop. `xs` is `[B,H,W]`; sample `i` uses the RNG stream for
/// id `first_sample_id + i`.
fn run_batch<F: Real>(
    model: &ScaeModel<F>,
    classifier: &ClassifierHead<F>,
    xs: &Tensor<F>,
    cfg: &AttackConfig,
    rule: StepRule,
    base_seed: u64,
    first_sample_id: u64,
) -> Result<Vec<Result<AttackResult<F>>>> {
    cfg.validate()?;
    let shape = xs.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("attack input must be [B,H,W], got {shape:?}")));
    }
    let (b, h, wd) = (shape[0], shape[1], shape[2]);
    let px = h * wd;
    let k = model.config.num_object_capsules;

    // One clean pass fixes each sample's label and target set for good.
    let mut throwaway = ChaCha12Rng::seed_from_u64(0);
    let clean = model.encode(xs, false, &mut throwaway);
    let clean_labels = classifier.predict(&clean.prior_presence, &clean.posterior_presence);

    let mut results: Vec<Option<Result<AttackResult<F>>>> = (0..b).map(|_| None).collect();
    let mut states: Vec<SampleState<F>> = Vec::new();
    for i in 0..b {
        let prior_row = &clean.prior_presence.data()[i * k..(i + 1) * k];
        let target_set = select_target_capsules(prior_row);
        if target_set.is_empty() {
            results[i] = Some(Err(Error::NoActiveCapsule));
            continue;
        }
        states.push(SampleState {
            row: states.len(),
            index: i,
            clean_label: clean_labels[i],
            target_set,
            alpha: cfg.alpha_init,
            alpha_ub: f64::INFINITY,
            alpha_lb: 0.0,
            rng: sample_rng(base_seed, first_sample_id + i as u64),
            best: None,
        });
    }

    if !states.is_empty() {
        let a = states.len();
        // Active-batch views of the clean images and their arctanh images.
        let mut x_active = Tensor::<F>::zeros(&[a, h, wd]);
        for s in &states {
            x_active.data_mut()[s.row * px..(s.row + 1) * px]
                .copy_from_slice(&xs.data()[s.index * px..(s.index + 1) * px]);
        }
        let w = to_w(&x_active, cfg.eps_clamp);
        let mut target_mask = Tensor::<F>::zeros(&[a, k]);
        for s in &states {
            for &t in &s.target_set {
                target_mask.data_mut()[s.row * k + t] = F::one();
            }
        }

        for _round in 0..cfg.n_outer {
            // Fresh perturbation and optimizer state each round.
            let mut p_prime = Tensor::<F>::zeros(&[a, h, wd]);
            for s in &mut states {
                for v in &mut p_prime.data_mut()[s.row * px..(s.row + 1) * px] {
                    *v = F::of(s.rng.random_range(0.0..1.0));
                }
            }
            let mut adam = AdamState::<F>::new(a * px);
            let mut round_success = vec![false; a];
            let mut round_dead = vec![false; a];
            let alphas = Tensor::<F>::from_vec(
                {
                    let mut v = vec![F::zero(); a];
                    for s in &states {
                        v[s.row] = F::of(s.alpha);
                    }
                    v
                },
                &[a],
            );

            for _step in 0..cfg.n_inner {
                let mut tape = Tape::new();
                let pv = ParamVars::register(&mut tape, &model.params);
                let p_var = tape.leaf(p_prime.clone());
                let w_var = tape.leaf(w.clone());
                let pre = tape.add(w_var, p_var);
                let th = tape.tanh(pre);
                let half = tape.scale(th, F::of(0.5));
                let x_adv = tape.add_scalar(half, F::of(0.5));
                let fwd = build_forward(&mut tape, &model.config, &pv, x_adv, None);

                let x_leaf = tape.leaf(x_active.clone());
                let diff = tape.sub(x_adv, x_leaf);
                let sq = tape.square(diff);
                let s2 = tape.sum_axis(sq, 2);
                let s1 = tape.sum_axis(s2, 1);
                let norms = tape.sqrt_eps(s1, F::of(1e-20));
                let mask_leaf = tape.leaf(target_mask.clone());
                let targeted = tape.mul(fwd.prior, mask_leaf);
                let tsum = tape.sum_axis(targeted, 1);
                let alpha_leaf = tape.leaf(alphas.clone());
                let weighted = tape.mul(alpha_leaf, tsum);
                let per_sample = tape.add(norms, weighted);
                let root = tape.sum_all(per_sample);

                // Candidate bookkeeping on the pre-update iterate.
                let objectives = tape.value(per_sample).clone();
                let adv_vals = tape.value(x_adv).clone();
                let labels =
                    classifier.predict(tape.value(fwd.prior), tape.value(fwd.posterior));
                for s in &mut states {
                    if !objectives.data()[s.row].as_f64().is_finite() {
                        round_dead[s.row] = true;
                    }
                    if round_dead[s.row] {
                        continue;
                    }
                    if labels[s.row] != s.clean_label {
                        round_success[s.row] = true;
                        let adv_row = &adv_vals.data()[s.row * px..(s.row + 1) * px];
                        let l2 = l2_between(adv_row, &x_active.data()[s.row * px..(s.row + 1) * px]);
                        if s.best.as_ref().is_none_or(|(b2, _, _)| l2 < *b2) {
                            s.best = Some((
                                l2,
                                Tensor::from_vec(adv_row.to_vec(), &[h, wd]),
                                labels[s.row],
                            ));
                        }
                    }
                }

                let grads = tape.backward(root);
                let g = grads.get(&tape, p_var);
                match rule {
                    StepRule::Adam => adam.step(
                        p_prime.data_mut(),
                        g.data(),
                        cfg.adam_lr,
                        cfg.adam_beta1,
                        cfg.adam_beta2,
                        cfg.adam_eps,
                    ),
                    StepRule::Sign => {
                        let beta = F::of(cfg.beta);
                        for (pv, &gv) in p_prime.data_mut().iter_mut().zip(g.data()) {
                            *pv -= beta * sign0(gv);
                        }
                    }
                }
            }

            // The final iterate of the round also gets assessed.
            let (x_adv, _) = from_w(&w, &p_prime, &x_active);
            let out = model.encode(&x_adv, false, &mut ChaCha12Rng::seed_from_u64(0));
            let labels = classifier.predict(&out.prior_presence, &out.posterior_presence);
            for s in &mut states {
                if round_dead[s.row] {
                    continue;
                }
                let adv_row = &x_adv.data()[s.row * px..(s.row + 1) * px];
                if adv_row.iter().any(|v| !v.as_f64().is_finite()) {
                    round_dead[s.row] = true;
                    continue;
                }
                if labels[s.row] != s.clean_label {
                    round_success[s.row] = true;
                    let l2 = l2_between(adv_row, &x_active.data()[s.row * px..(s.row + 1) * px]);
                    if s.best.as_ref().is_none_or(|(b2, _, _)| l2 < *b2) {
                        s.best = Some((l2, Tensor::from_vec(adv_row.to_vec(), &[h, wd]), labels[s.row]));
                    }
                }
            }

            for s in &mut states {
                let succeeded = round_success[s.row] && !round_dead[s.row];
                let (next, ub, lb) =
                    update_alpha(s.alpha, s.alpha_ub, s.alpha_lb, succeeded, cfg.alpha_blowup);
                s.alpha = next;
                s.alpha_ub = ub;
                s.alpha_lb = lb;
            }
        }

        for s in states {
            let x_row = Tensor::from_vec(
                xs.data()[s.index * px..(s.index + 1) * px].to_vec(),
                &[h, wd],
            );
            let result = match s.best {
                Some((l2, adv, label)) => {
                    let p = Tensor::from_vec(
                        adv.data().iter().zip(x_row.data()).map(|(&a, &b)| a - b).collect(),
                        &[h, wd],
                    );
                    AttackResult {
                        perturbation: p,
                        adversarial: adv,
                        l2_norm: l2,
                        success: true,
                        target_set: s.target_set,
                        clean_label: s.clean_label,
                        adv_label: label,
                    }
                }
                None => AttackResult {
                    perturbation: Tensor::zeros(&[h, wd]),
                    adversarial: x_row,
                    l2_norm: f64::INFINITY,
                    success: false,
                    target_set: s.target_set,
                    clean_label: s.clean_label,
                    adv_label: s.clean_label,
                },
            };
            results[s.index] = Some(Ok(result));
        }
    }

    Ok(results.into_iter().map(|r| r.expect("every sample resolved")).collect())
}

/// Optimizer-based evasion attack on a batch `[B,H,W]`; per-sample outcomes.
pub fn run_evasion_attack_batch<F: Real>(
    model: &ScaeModel<F>,
    classifier: &ClassifierHead<F>,
    xs: &Tensor<F>,
    cfg: &AttackConfig,
    base_seed: u64,
    first_sample_id: u64,
) -> Result<Vec<Result<AttackResult<F>>>> {
    run_batch(model, classifier, xs, cfg, StepRule::Adam, base_seed, first_sample_id)
}

/// Optimizer-based evasion attack on a single image `[H,W]`.
pub fn run_evasion_attack<F: Real>(
    model: &ScaeModel<F>,
    classifier: &ClassifierHead<F>,
    x: &Tensor<F>,
    cfg: &AttackConfig,
    base_seed: u64,
    sample_id: u64,
) -> Result<AttackResult<F>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("attack input must be [H,W], got {shape:?}")));
    }
    let batch = Tensor::from_vec(x.data().to_vec(), &[1, shape[0], shape[1]]);
    let mut results = run_batch(model, classifier, &batch, cfg, StepRule::Adam, base_seed, sample_id)?;
    results.pop().expect("one sample in, one result out")
}

/// Sign-gradient generator for training batches: the same loop with
/// `p′ ← p′ − β·sign(∇L)`. Returns one image per input row — the minimal-L2
/// successful adversary, or the clean row when every round failed (including
/// the no-active-capsule case, which cannot be attacked at all).
pub fn generate_training_adversarial_batch<F: Real>(
    model: &ScaeModel<F>,
    classifier: &ClassifierHead<F>,
    xs: &Tensor<F>,
    cfg: &AttackConfig,
    base_seed: u64,
    first_sample_id: u64,
) -> Result<Tensor<F>> {
    let results = run_batch(model, classifier, xs, cfg, StepRule::Sign, base_seed, first_sample_id)?;
    let shape = xs.shape();
    let px = shape[1] * shape[2];
    let mut out = xs.clone();
    for (i, r) in results.iter().enumerate() {
        if let Ok(res) = r {
            if res.success {
                out.data_mut()[i * px..(i + 1) * px].copy_from_slice(res.adversarial.data());
            }
        }
    }
    Ok(out)
}

/// Single-image training generator: minimal-L2 adversary or the clean image.
pub fn generate_training_adversarial<F: Real>(
    model: &ScaeModel<F>,
    classifier: &ClassifierHead<F>,
    x: &Tensor<F>,
    cfg: &AttackConfig,
    base_seed: u64,
    sample_id: u64,
) -> Result<Tensor<F>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("attack input must be [H,W], got {shape:?}")));
    }
    let batch = Tensor::from_vec(x.data().to_vec(), &[1, shape[0], shape[1]]);
    let out = generate_training_adversarial_batch(model, classifier, &batch, cfg, base_seed, sample_id)?;
    Ok(Tensor::from_vec(out.data().to_vec(), &[shape[0], shape[1]]))
}
