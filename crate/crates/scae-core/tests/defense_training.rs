//! Training-regime properties: loss identities, schedule traces, frozen
//! teacher, descent sanity, and phase-collapse equivalences checked bitwise.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use scae_core::attack::AttackConfig;
use scae_core::classifiers::PresenceSource;
use scae_core::data::{dataset_from_bytes, DataConfig, Dataset};
use scae_core::defense::{
    build_ad_loss_graph, loss_ad, loss_at, teacher_presence, train_ad, train_at, train_hat,
    train_ntat, train_plain, train_regime, DefenseConfig, IdentityGenerator, Regime, RmsProp,
    SignGenerator,
};
use scae_core::model::{LossGraph, ScaeConfig, ScaeModel};
use scae_core::Tensor;

fn toy_model(seed: u64) -> ScaeModel<f64> {
    ScaeModel::init(ScaeConfig::toy(), seed).unwrap()
}

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Deterministic synthetic digits on the toy canvas.
fn toy_dataset(n: usize) -> Dataset<f64> {
    let canvas = ScaeConfig::toy().canvas_size;
    let raw: Vec<u8> = (0..n * 6 * 6).map(|i| ((i * 37 + 11) % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let cfg = DataConfig {
        canvas_size: canvas,
        ..DataConfig::default()
    };
    dataset_from_bytes(&raw, 6, 6, labels, &cfg).unwrap()
}

fn random_batch(b: usize, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let canvas = ScaeConfig::toy().canvas_size;
    let mut r = rng(seed);
    let data: Vec<f64> = (0..b * canvas * canvas).map(|_| r.random_range(0.05..0.95)).collect();
    Tensor::from_vec(data, &[b, canvas, canvas])
}

fn param_bits(model: &ScaeModel<f64>) -> Vec<u64> {
    model.params.to_flat_f64().iter().map(|v| v.to_bits()).collect()
}

fn quick_cfg() -> DefenseConfig {
    DefenseConfig {
        n_ep: 2,
        n_ad: 1,
        n_at: 1,
        batch_size: 8,
        head_epochs: 5,
        ..DefenseConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Loss identities
// ---------------------------------------------------------------------------

#[test]
fn retargeting_changes_only_the_reconstruction_term() {
    let model = toy_model(3);
    let x_adv = random_batch(3, 10);
    let x_clean = random_batch(3, 11);
    let a = loss_at(&model, &x_adv, &x_clean, false, &mut rng(0));
    let b = loss_at(&model, &x_adv, &x_adv, false, &mut rng(0));
    // Same input, different target: the non-reconstruction terms must agree
    // exactly and the totals differ by exactly the reconstruction gap.
    assert_eq!(a.non_rec, b.non_rec);
    let total_gap = a.total - b.total;
    let rec_gap = a.rec - b.rec;
    assert!(
        (total_gap - rec_gap).abs() <= 1e-12 * rec_gap.abs().max(1.0),
        "total gap {total_gap} != rec gap {rec_gap}"
    );
}

#[test]
fn clean_target_recovers_the_plain_training_loss() {
    let model = toy_model(4);
    let x = random_batch(4, 20);
    let via_at = loss_at(&model, &x, &x, false, &mut rng(0));
    let plain = model.compute_loss(&x, &x, false, &mut rng(0));
    assert_eq!(via_at.total.to_bits(), plain.total.to_bits());
    assert_eq!(via_at.rec.to_bits(), plain.rec.to_bits());
}

#[test]
fn loss_over_targets_is_minimized_at_the_models_own_reconstruction() {
    let model = toy_model(5);
    let x = random_batch(2, 30);
    let mut r = rng(0);
    let out = model.encode(&x, false, &mut r);
    let recon = out.reconstruction.clone();
    let at_recon = loss_at(&model, &x, &recon, false, &mut rng(0)).total;
    for probe in 0..4 {
        let y = random_batch(2, 40 + probe);
        let at_y = loss_at(&model, &x, &y, false, &mut rng(0)).total;
        assert!(
            at_recon < at_y,
            "target probe {probe}: loss at reconstruction {at_recon} not below {at_y}"
        );
    }
}

#[test]
fn zero_lambda_blend_equals_the_retargeted_loss_bitwise() {
    let teacher = toy_model(6);
    let student = toy_model(7);
    let x_clean = random_batch(3, 50);
    let x_input = random_batch(3, 51);
    let blended = loss_ad(
        &x_clean,
        &x_input,
        &teacher,
        &student,
        0.0,
        PresenceSource::Prior,
        false,
        &mut rng(0),
    );
    let at = loss_at(&student, &x_input, &x_clean, false, &mut rng(0));
    assert_eq!(blended.total.to_bits(), at.total.to_bits());
    assert_eq!(blended.at_total.to_bits(), at.total.to_bits());
}

#[test]
fn self_distillation_on_clean_input_vanishes() {
    let model = toy_model(8);
    let x = random_batch(3, 60);
    let blended = loss_ad(
        &x,
        &x,
        &model,
        &model,
        1.0,
        PresenceSource::Prior,
        false,
        &mut rng(0),
    );
    // The distance is exactly zero up to the norm guard epsilon (sqrt(1e-20)
    // per example).
    assert!(
        blended.distill.abs() < 1e-9,
        "self-distillation distance {}",
        blended.distill
    );
    assert!((blended.total - blended.distill).abs() < 1e-30);
}

#[test]
fn blended_loss_is_linear_in_lambda() {
    for source in [PresenceSource::Prior, PresenceSource::Posterior] {
        let teacher = toy_model(9);
        let student = toy_model(10);
        let x_clean = random_batch(3, 70);
        let x_input = random_batch(3, 71);
        let at = |lambda: f64| {
            loss_ad(&x_clean, &x_input, &teacher, &student, lambda, source, false, &mut rng(0)).total
        };
        let lo = at(0.0);
        let hi = at(1.0);
        let mid = at(0.5);
        assert!(
            (mid - 0.5 * (lo + hi)).abs() < 1e-6,
            "λ=0.5 value {mid} is not the midpoint of {lo} and {hi}"
        );
    }
}

#[test]
fn distillation_gradients_flow_to_the_student_only() {
    let teacher = toy_model(11);
    let student = toy_model(12);
    let x = random_batch(2, 80);
    let tch = teacher_presence(&teacher, &x, PresenceSource::Prior);
    let graph = build_ad_loss_graph(
        &student,
        &tch,
        &x,
        &x,
        1.0,
        PresenceSource::Prior,
        false,
        &mut rng(0),
    );
    let grads = graph.backward();
    // At λ=1 the objective is the pure distillation distance, and it still
    // reaches a healthy share of student parameters.
    let nonzero = graph
        .param_vars
        .iter()
        .filter(|&&v| grads.get(&graph.tape, v).data().iter().any(|g| *g != 0.0))
        .count();
    assert!(
        nonzero >= graph.param_vars.len() / 2,
        "only {nonzero} of {} parameter tensors receive distillation gradient",
        graph.param_vars.len()
    );
}

// ---------------------------------------------------------------------------
// Optimizer behaviour on the real model
// ---------------------------------------------------------------------------

#[test]
fn one_tiny_optimizer_step_strictly_decreases_the_batch_loss() {
    let mut model = toy_model(13);
    let x = random_batch(8, 90);
    let mut cfg = quick_cfg();
    cfg.optimizer.lr = 1e-6;
    let before = {
        let graph = LossGraph::build(&model, &x, &x, false, &mut rng(0));
        let grads = graph.backward();
        let gt: Vec<Tensor<f64>> = graph
            .param_vars
            .iter()
            .map(|&v| grads.get(&graph.tape, v))
            .collect();
        let total = graph.breakdown().total;
        let mut opt = RmsProp::new(model.param_count(), cfg.optimizer.clone());
        opt.apply(&mut model.params, &gt);
        total
    };
    let after = model.compute_loss(&x, &x, false, &mut rng(0)).total;
    assert!(
        after < before,
        "loss went from {before} to {after} after a lr=1e-6 step"
    );
}

// ---------------------------------------------------------------------------
// Schedule traces and phase equivalences
// ---------------------------------------------------------------------------

#[test]
fn adversarial_training_with_an_identity_generator_is_plain_training() {
    let ds = toy_dataset(24);
    let cfg = quick_cfg();
    let mut plain = toy_model(14);
    let mut at = toy_model(14);
    train_plain(&mut plain, &ds, &cfg, 99, |_, _| {}).unwrap();
    train_at(&mut at, &ds, &cfg, &IdentityGenerator, 99, |_, _| {}).unwrap();
    assert_eq!(param_bits(&plain), param_bits(&at));
}

#[test]
fn zero_lambda_distillation_training_matches_adversarial_training() {
    let ds = toy_dataset(24);
    let mut cfg = quick_cfg();
    cfg.lambda = 0.0;
    let teacher = toy_model(77);
    let mut at = toy_model(15);
    let mut ad = toy_model(15);
    train_at(&mut at, &ds, &cfg, &IdentityGenerator, 5, |_, _| {}).unwrap();
    train_ad(&mut ad, &ds, &cfg, &teacher, &IdentityGenerator, 5, |_, _| {}).unwrap();
    assert_eq!(param_bits(&at), param_bits(&ad));
}

#[test]
fn the_teacher_is_bit_identical_after_distillation_training() {
    let ds = toy_dataset(16);
    let cfg = quick_cfg();
    let teacher = toy_model(16);
    let snapshot = param_bits(&teacher);
    let mut student = toy_model(17);
    train_ad(&mut student, &ds, &cfg, &teacher, &IdentityGenerator, 5, |_, _| {}).unwrap();
    assert_eq!(param_bits(&teacher), snapshot);
    // The student must have moved, or the run did nothing.
    assert_ne!(param_bits(&student), param_bits(&toy_model(17)));
}

#[test]
fn batch_counter_carries_across_hybrid_phases() {
    // 24 samples in batches of 8 → 3 batches per epoch. With interval 1 and
    // a counter that persists, the adversarial pattern over two epochs is
    // [N,A,N] then [A,N,A]; a per-phase reset would repeat [N,A,N].
    let ds = toy_dataset(24);
    let cfg = quick_cfg();
    let teacher = toy_model(18);
    let mut model = toy_model(19);
    let report = train_hat(&mut model, &ds, &cfg, &teacher, &IdentityGenerator, 1, |_, _| {}).unwrap();
    let adv: Vec<usize> = report.epochs.iter().map(|e| e.adv_batches).collect();
    let normal: Vec<usize> = report.epochs.iter().map(|e| e.normal_batches).collect();
    assert_eq!(adv, vec![1, 2]);
    assert_eq!(normal, vec![2, 1]);
    for e in &report.epochs {
        let diff = e.adv_batches.abs_diff(e.normal_batches);
        assert!(diff <= 1, "epoch {}: |adv − normal| = {diff}", e.epoch);
    }
}

#[test]
fn distillation_epochs_report_a_distillation_component() {
    let ds = toy_dataset(16);
    let cfg = quick_cfg();
    let teacher = toy_model(20);
    let mut model = toy_model(21);
    let report = train_hat(&mut model, &ds, &cfg, &teacher, &IdentityGenerator, 2, |_, _| {}).unwrap();
    assert_eq!(report.epochs.len(), cfg.n_ad + cfg.n_at);
    assert!(report.epochs[0].distill > 0.0, "distillation epoch reported no distance");
    assert_eq!(report.epochs[1].distill, 0.0, "adversarial epoch reported a distance");
    for e in &report.epochs {
        assert!(e.total_loss.is_finite() && e.rec.is_finite() && e.non_rec.is_finite());
    }
}

#[test]
fn hybrid_without_its_second_phase_is_distillation_training() {
    let ds = toy_dataset(16);
    let mut hat_cfg = quick_cfg();
    hat_cfg.n_ad = 2;
    hat_cfg.n_at = 0;
    let mut ad_cfg = hat_cfg.clone();
    ad_cfg.n_ep = 2;
    let teacher = toy_model(22);
    let mut hat = toy_model(23);
    let mut ad = toy_model(23);
    train_hat(&mut hat, &ds, &hat_cfg, &teacher, &IdentityGenerator, 4, |_, _| {}).unwrap();
    train_ad(&mut ad, &ds, &ad_cfg, &teacher, &IdentityGenerator, 4, |_, _| {}).unwrap();
    assert_eq!(param_bits(&hat), param_bits(&ad));
}

#[test]
fn the_ablation_without_its_second_phase_is_plain_training() {
    let ds = toy_dataset(16);
    let mut ntat_cfg = quick_cfg();
    ntat_cfg.n_ad = 2;
    ntat_cfg.n_at = 0;
    let mut plain_cfg = ntat_cfg.clone();
    plain_cfg.n_ep = 2;
    let mut ntat = toy_model(24);
    let mut plain = toy_model(24);
    train_ntat(&mut ntat, &ds, &ntat_cfg, &IdentityGenerator, 6, |_, _| {}).unwrap();
    train_plain(&mut plain, &ds, &plain_cfg, 6, |_, _| {}).unwrap();
    assert_eq!(param_bits(&ntat), param_bits(&plain));
}

#[test]
fn same_seed_same_data_reproduces_training_bitwise() {
    let ds = toy_dataset(16);
    let mut cfg = quick_cfg();
    cfg.regime = Regime::Plain;
    cfg.n_ep = 2;
    let mut a = toy_model(25);
    let mut b = toy_model(25);
    train_regime(&mut a, &ds, &cfg, None, 31, |_, _| {}).unwrap();
    train_regime(&mut b, &ds, &cfg, None, 31, |_, _| {}).unwrap();
    assert_eq!(param_bits(&a), param_bits(&b));

    // A different seed must not reproduce the same parameters.
    let mut c = toy_model(25);
    train_regime(&mut c, &ds, &cfg, None, 32, |_, _| {}).unwrap();
    assert_ne!(param_bits(&a), param_bits(&c));
}

#[test]
fn distillation_regimes_require_a_teacher() {
    let ds = toy_dataset(8);
    let mut cfg = quick_cfg();
    cfg.regime = Regime::Ad;
    let mut model = toy_model(26);
    assert!(train_regime(&mut model, &ds, &cfg, None, 0, |_, _| {}).is_err());
    cfg.regime = Regime::Hat;
    assert!(train_regime(&mut model, &ds, &cfg, None, 0, |_, _| {}).is_err());
}

#[test]
fn epoch_hook_sees_every_epoch_in_order() {
    let ds = toy_dataset(16);
    let mut cfg = quick_cfg();
    cfg.n_ep = 3;
    let mut model = toy_model(27);
    let mut seen = Vec::new();
    train_plain(&mut model, &ds, &cfg, 0, |_, stats| seen.push(stats.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
}

#[test]
fn the_sign_generator_runs_inside_a_training_epoch() {
    // Two batches with interval 1: the second goes through the real
    // sign-gradient generator with a one-round, one-step budget.
    let ds = toy_dataset(16);
    let mut cfg = quick_cfg();
    cfg.n_ep = 1;
    cfg.generator = AttackConfig {
        n_outer: 1,
        n_inner: 1,
        ..AttackConfig::training()
    };
    let generator = SignGenerator {
        cfg: cfg.generator.clone(),
        base_seed: 123,
    };
    let mut model = toy_model(28);
    let before = param_bits(&model);
    let report = train_at(&mut model, &ds, &cfg, &generator, 8, |_, _| {}).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(report.epochs[0].adv_batches, 1);
    assert_eq!(report.epochs[0].normal_batches, 1);
    assert!(report.epochs[0].total_loss.is_finite());
    assert_ne!(param_bits(&model), before);
}
