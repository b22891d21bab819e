//! Finite-difference verification of every autodiff op.
//!
//! Each case builds a scalar objective from random inputs, runs the reverse
//! pass, and compares every input coordinate against a central difference of
//! the re-run forward pass. A weighted reduction (random fixed weights) is
//! used instead of a plain sum so that gradients cannot cancel by symmetry.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use scae_core::autodiff::{Tape, Var};
use scae_core::Tensor;

const FD_H: f64 = 1e-5;
const RTOL: f64 = 1e-5;
const ATOL: f64 = 1e-7;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(data, shape)
}

/// Runs `build` on the given inputs and checks the analytic gradient of every
/// input coordinate against a central finite difference.
fn fd_check(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    assert_eq!(tape.value(root).numel(), 1, "{name}: objective must be scalar");
    let grads = tape.backward(root);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(&tape, v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let r = build(&mut t, &vs);
        t.value(r).item()
    };

    for (ti, tensor) in inputs.iter().enumerate() {
        for j in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += FD_H;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let an = analytic[ti].data()[j];
            let tol = ATOL + RTOL * fd.abs().max(an.abs());
            assert!(
                (fd - an).abs() <= tol,
                "{name}: input {ti} coord {j}: finite diff {fd} vs analytic {an} (tol {tol})"
            );
        }
    }
}

/// Weighted scalar reduction so per-element gradients stay distinguishable.
fn weighted(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(out, w);
    tape.sum_all(prod)
}

#[test]
fn add_sub_mul_neg() {
    let mut r = rng(11);
    let a = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    fd_check("add", &[a.clone(), b.clone()], |t, v| {
        let out = t.add(v[0], v[1]);
        weighted(t, out, &w)
    });
    fd_check("sub", &[a.clone(), b.clone()], |t, v| {
        let out = t.sub(v[0], v[1]);
        weighted(t, out, &w)
    });
    fd_check("mul", &[a.clone(), b.clone()], |t, v| {
        let out = t.mul(v[0], v[1]);
        weighted(t, out, &w)
    });
    fd_check("neg", &[a], |t, v| {
        let out = t.neg(v[0]);
        weighted(t, out, &w)
    });
}

#[test]
fn div_eps_scale_add_scalar() {
    let mut r = rng(12);
    let a = rand_tensor(&mut r, &[4], -1.0, 1.0);
    // Keep the denominator clear of -eps so FD stays well conditioned.
    let b = rand_tensor(&mut r, &[4], 0.3, 1.5);
    let w = rand_tensor(&mut r, &[4], -1.0, 1.0);
    fd_check("div_eps", &[a.clone(), b], |t, v| {
        let out = t.div_eps(v[0], v[1], 1e-8);
        weighted(t, out, &w)
    });
    fd_check("scale", &[a.clone()], |t, v| {
        let out = t.scale(v[0], -2.5);
        weighted(t, out, &w)
    });
    fd_check("add_scalar", &[a], |t, v| {
        let out = t.add_scalar(v[0], 0.7);
        weighted(t, out, &w)
    });
}

#[test]
fn unary_nonlinearities() {
    let mut r = rng(13);
    let a = rand_tensor(&mut r, &[3, 2], -1.5, 1.5);
    let w = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    fd_check("sigmoid", &[a.clone()], |t, v| {
        let out = t.sigmoid(v[0]);
        weighted(t, out, &w)
    });
    fd_check("tanh", &[a.clone()], |t, v| {
        let out = t.tanh(v[0]);
        weighted(t, out, &w)
    });
    fd_check("exp", &[a.clone()], |t, v| {
        let out = t.exp(v[0]);
        weighted(t, out, &w)
    });
    fd_check("square", &[a], |t, v| {
        let out = t.square(v[0]);
        weighted(t, out, &w)
    });
    // Positive-domain ops.
    let p = rand_tensor(&mut r, &[5], 0.1, 2.0);
    let wp = rand_tensor(&mut r, &[5], -1.0, 1.0);
    fd_check("ln_eps", &[p.clone()], |t, v| {
        let out = t.ln_eps(v[0], 1e-12);
        weighted(t, out, &wp)
    });
    fd_check("sqrt_eps", &[p], |t, v| {
        let out = t.sqrt_eps(v[0], 1e-12);
        weighted(t, out, &wp)
    });
    // Kinked ops, sampled away from their kinks.
    let mut off_kink = rand_tensor(&mut r, &[6], 0.2, 0.8);
    for (i, x) in off_kink.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *x = -*x; // mix of clearly negative and clearly positive
        }
    }
    let wk = rand_tensor(&mut r, &[6], -1.0, 1.0);
    fd_check("relu", &[off_kink.clone()], |t, v| {
        let out = t.relu(v[0]);
        weighted(t, out, &wk)
    });
    fd_check("clamp_unit", &[off_kink], |t, v| {
        let out = t.clamp_unit(v[0]);
        weighted(t, out, &wk)
    });
}

#[test]
fn bias_and_matmul_family() {
    let mut r = rng(14);
    let x = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    fd_check("add_bias", &[x, b], |t, v| {
        let out = t.add_bias(v[0], v[1]);
        weighted(t, out, &w)
    });

    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let m = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
    let wm = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    fd_check("matmul", &[a, m], |t, v| {
        let out = t.matmul(v[0], v[1]);
        weighted(t, out, &wm)
    });

    let ba = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let bb = rand_tensor(&mut r, &[2, 4, 5], -1.0, 1.0);
    let wb = rand_tensor(&mut r, &[2, 3, 5], -1.0, 1.0);
    fd_check("bmm", &[ba.clone(), bb], |t, v| {
        let out = t.bmm(v[0], v[1]);
        weighted(t, out, &wb)
    });

    let bc = rand_tensor(&mut r, &[2, 5, 4], -1.0, 1.0);
    let wnt = rand_tensor(&mut r, &[2, 3, 5], -1.0, 1.0);
    fd_check("bmm_nt", &[ba, bc], |t, v| {
        let out = t.bmm_nt(v[0], v[1]);
        weighted(t, out, &wnt)
    });
}

#[test]
fn shape_manipulation_ops() {
    let mut r = rng(15);
    let a = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let wt = rand_tensor(&mut r, &[2, 4, 3], -1.0, 1.0);
    fd_check("transpose_12", &[a.clone()], |t, v| {
        let out = t.transpose_12(v[0]);
        weighted(t, out, &wt)
    });
    let wr = rand_tensor(&mut r, &[6, 4], -1.0, 1.0);
    fd_check("reshape", &[a.clone()], |t, v| {
        let out = t.reshape(v[0], &[6, 4]);
        weighted(t, out, &wr)
    });
    let we = rand_tensor(&mut r, &[2, 5, 3, 4], -1.0, 1.0);
    fd_check("expand_axis1", &[a.clone()], |t, v| {
        let out = t.expand(v[0], 1, 5);
        weighted(t, out, &we)
    });
    let ws = rand_tensor(&mut r, &[2, 4], -1.0, 1.0);
    fd_check("sum_axis1", &[a.clone()], |t, v| {
        let out = t.sum_axis(v[0], 1);
        weighted(t, out, &ws)
    });
    fd_check("sum_all", &[a.clone()], |t, v| t.sum_all(v[0]));
    fd_check("mean_all", &[a.clone()], |t, v| t.mean_all(v[0]));

    let b = rand_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
    let wc = rand_tensor(&mut r, &[2, 3, 6], -1.0, 1.0);
    fd_check("concat_last", &[a.clone(), b], |t, v| {
        let out = t.concat_last(&[v[0], v[1]]);
        weighted(t, out, &wc)
    });
    let wsl = rand_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
    fd_check("slice_last", &[a], |t, v| {
        let out = t.slice_last(v[0], 1, 2);
        weighted(t, out, &wsl)
    });
}

#[test]
fn softmax_and_layernorm() {
    let mut r = rng(16);
    let a = rand_tensor(&mut r, &[3, 5], -2.0, 2.0);
    let w = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
    fd_check("softmax_last", &[a.clone()], |t, v| {
        let out = t.softmax_last(v[0]);
        weighted(t, out, &w)
    });
    let gamma = rand_tensor(&mut r, &[5], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[5], -0.5, 0.5);
    fd_check("layer_norm_last", &[a, gamma, beta], |t, v| {
        let out = t.layer_norm_last(v[0], v[1], v[2], 1e-5);
        weighted(t, out, &w)
    });
}

#[test]
fn conv2d_stride1_and_stride2() {
    let mut r = rng(17);
    let x = rand_tensor(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
    let k = rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3], -0.5, 0.5);
    let w1 = rand_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    fd_check("conv2d_s1", &[x.clone(), k.clone(), b.clone()], |t, v| {
        let out = t.conv2d(v[0], v[1], v[2], 1, 1);
        weighted(t, out, &w1)
    });
    let w2 = rand_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    fd_check("conv2d_s2", &[x.clone(), k, b], |t, v| {
        let out = t.conv2d(v[0], v[1], v[2], 2, 1);
        weighted(t, out, &w2)
    });
    // 1×1 convolution with no padding (capsule head pattern).
    let k1 = rand_tensor(&mut r, &[4, 2, 1, 1], -1.0, 1.0);
    let b1 = rand_tensor(&mut r, &[4], -0.5, 0.5);
    let w3 = rand_tensor(&mut r, &[2, 4, 5, 5], -1.0, 1.0);
    fd_check("conv2d_1x1", &[x, k1, b1], |t, v| {
        let out = t.conv2d(v[0], v[1], v[2], 1, 0);
        weighted(t, out, &w3)
    });
}

#[test]
fn pose_and_affine_ops() {
    let mut r = rng(18);
    // Pose rows: scales positive, moderate shear/rotation/translation.
    let mut pose = Tensor::<f64>::zeros(&[2, 3, 6]);
    for row in 0..6 {
        let p = &mut pose.data_mut()[row * 6..row * 6 + 6];
        p[0] = r.random_range(0.5..1.5);
        p[1] = r.random_range(0.5..1.5);
        p[2] = r.random_range(-0.4..0.4);
        p[3] = r.random_range(-1.0..1.0);
        p[4] = r.random_range(-0.6..0.6);
        p[5] = r.random_range(-0.6..0.6);
    }
    let w = rand_tensor(&mut r, &[2, 3, 6], -1.0, 1.0);
    fd_check("pose_to_affine", &[pose.clone()], |t, v| {
        let out = t.pose_to_affine(v[0], 7.0, 7.0);
        weighted(t, out, &w)
    });

    // Well-conditioned affines for inversion.
    let mut aff = Tensor::<f64>::zeros(&[1, 4, 6]);
    for row in 0..4 {
        let p = &mut aff.data_mut()[row * 6..row * 6 + 6];
        p[0] = r.random_range(0.8..1.4);
        p[1] = r.random_range(-0.3..0.3);
        p[2] = r.random_range(-2.0..2.0);
        p[3] = r.random_range(-0.3..0.3);
        p[4] = r.random_range(0.8..1.4);
        p[5] = r.random_range(-2.0..2.0);
    }
    let wi = rand_tensor(&mut r, &[1, 4, 6], -1.0, 1.0);
    fd_check("affine_invert", &[aff.clone()], |t, v| {
        let out = t.affine_invert(v[0]);
        weighted(t, out, &wi)
    });

    let obj = rand_tensor(&mut r, &[2, 3, 6], -1.0, 1.0);
    let rel = rand_tensor(&mut r, &[3, 4, 6], -1.0, 1.0);
    let wc = rand_tensor(&mut r, &[2, 3, 4, 6], -1.0, 1.0);
    fd_check("affine_compose", &[obj, rel], |t, v| {
        let out = t.affine_compose(v[0], v[1]);
        weighted(t, out, &wc)
    });
}

#[test]
fn affine_sample_gradcheck() {
    let mut r = rng(19);
    let templates = rand_tensor(&mut r, &[2, 4, 4], 0.0, 1.0);
    // Canvas→template maps near identity with mild scaling and offsets; FD
    // stays valid as long as no sample lands exactly on a lattice line.
    let mut aff = Tensor::<f64>::zeros(&[2, 2, 6]);
    for row in 0..4 {
        let p = &mut aff.data_mut()[row * 6..row * 6 + 6];
        p[0] = r.random_range(0.6..0.9);
        p[1] = r.random_range(-0.15..0.15);
        p[2] = r.random_range(-1.2..1.2) + 0.037;
        p[3] = r.random_range(-0.15..0.15);
        p[4] = r.random_range(0.6..0.9);
        p[5] = r.random_range(-1.2..1.2) + 0.041;
    }
    let w = rand_tensor(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
    fd_check("affine_sample", &[templates, aff], |t, v| {
        let out = t.affine_sample(v[0], v[1], 5, 5);
        weighted(t, out, &w)
    });
}

#[test]
fn weighted_max_composite_gradcheck() {
    let mut r = rng(20);
    // Spread presences apart so h-perturbations cannot flip the argmax.
    let presence = Tensor::from_vec(vec![0.9, 0.4, 0.25, 0.7, 0.95, 0.1], &[2, 3]);
    let images = rand_tensor(&mut r, &[2, 3, 3, 3], 0.05, 1.0);
    let w = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
    fd_check("weighted_max_composite", &[presence, images], |t, v| {
        let out = t.weighted_max_composite(v[0], v[1]);
        weighted(t, out, &w)
    });
}

#[test]
fn composed_graph_mixing_many_ops() {
    // A deeper chain resembling the real model: conv → pooling-style bmm →
    // softmax attention → layernorm → nonlinearity → reduction.
    let mut r = rng(21);
    let x = rand_tensor(&mut r, &[1, 1, 6, 6], -1.0, 1.0);
    let k = rand_tensor(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
    let kb = rand_tensor(&mut r, &[2], -0.2, 0.2);
    let proj = rand_tensor(&mut r, &[2, 3], -0.8, 0.8);
    let gamma = rand_tensor(&mut r, &[3], 0.8, 1.2);
    let beta = rand_tensor(&mut r, &[3], -0.2, 0.2);
    fd_check("composed_graph", &[x, k, kb, proj, gamma, beta], |t, v| {
        let c = t.conv2d(v[0], v[1], v[2], 2, 1); // [1,2,3,3]
        let flat = t.reshape(c, &[1, 2, 9]);
        let tr = t.transpose_12(flat); // [1,9,2]
        let resh = t.reshape(tr, &[9, 2]);
        let tok = t.matmul(resh, v[3]); // [9,3]
        let tok3 = t.reshape(tok, &[1, 9, 3]);
        let scores = t.bmm_nt(tok3, tok3); // [1,9,9]
        let att = t.softmax_last(scores);
        let mixed = t.bmm(att, tok3); // [1,9,3]
        let normed = t.layer_norm_last(mixed, v[4], v[5], 1e-5);
        let act = t.tanh(normed);
        let sq = t.square(act);
        t.mean_all(sq)
    });
}
