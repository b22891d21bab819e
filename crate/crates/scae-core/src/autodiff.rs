//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Forward ops execute eagerly and record just enough to replay the chain rule
//! backwards. The op set is exactly what the capsule autoencoder, its losses,
//! and the attacks need — including a handful of geometry ops (affine algebra,
//! bilinear template sampling, presence-weighted max compositing) that do not
//! decompose nicely into elementwise primitives.
//!
//! Conventions: tensors are row-major ([`Tensor`]), scalars live in shape
//! `[1]`, and `backward` may only be called on a scalar root.

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the root with respect to `var`; zeros if `var` did not
    /// influence the root.
    pub fn get(&self, tape: &Tape<F>, var: Var) -> Tensor<F> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(var).shape()),
        }
    }

    /// Borrowed gradient, `None` when `var` did not influence the root.
    pub fn try_get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads[var.0].as_ref()
    }
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    DivEps { a: usize, b: usize, eps: F },
    Neg(usize),
    Scale { a: usize, c: F },
    AddScalar { a: usize },
    AddBias { x: usize, b: usize },
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    BmmNT { a: usize, b: usize },
    Transpose12(usize),
    Reshape(usize),
    Expand { a: usize, axis: usize, n: usize },
    SumAxis { a: usize, axis: usize },
    SumAll(usize),
    ConcatLast(Vec<usize>),
    SliceLast { a: usize, start: usize, len: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    LnEps { a: usize, eps: F },
    SqrtEps { a: usize },
    Square(usize),
    ClampUnit(usize),
    SoftmaxLast(usize),
    LayerNormLast { x: usize, gamma: usize, beta: usize, eps: F },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    PoseToAffine { p: usize, half_w: F, half_h: F },
    AffineInvert(usize),
    AffineCompose { a: usize, b: usize },
    AffineSample { templates: usize, affines: usize, out_h: usize, out_w: usize },
    WeightedMaxComposite { presence: usize, images: usize, argmax: Vec<u32> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Append-only computation tape. Build a fresh tape per forward pass.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into `(rows, cols)` where `cols` is the last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1 required");
    (shape.iter().product::<usize>() / cols, cols)
}

/// Splits a shape around `axis` into `(pre, n, post)` flat extents.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre: usize = shape[..axis].iter().product();
    let post: usize = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

/// out[m,n] += a[m,k] · b[k,n] over flat slices.
fn matmul_acc<F: Real>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ over flat slices.
fn matmul_nt_acc<F: Real>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n] over flat slices.
fn matmul_tn_acc<F: Real>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// 3×3 product of affine rows `(a11,a12,t1,a21,a22,t2)` with implicit last row
/// `(0,0,1)`, returning the six active entries of `l · r`.
fn affine_mul<F: Real>(l: &[F], r: &[F]) -> [F; 6] {
    [
        l[0] * r[0] + l[1] * r[3],
        l[0] * r[1] + l[1] * r[4],
        l[0] * r[2] + l[1] * r[5] + l[2],
        l[3] * r[0] + l[4] * r[3],
        l[3] * r[1] + l[4] * r[4],
        l[3] * r[2] + l[4] * r[5] + l[5],
    ]
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a variable.
    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input (parameter, constant, or data) on the tape.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(data, ta.shape())
        };
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
            Tensor::from_vec(data, ta.shape())
        };
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            Tensor::from_vec(data, ta.shape())
        };
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Elementwise `a / (b + eps)`.
    pub fn div_eps(&mut self, a: Var, b: Var, eps: F) -> Var {
        self.binary_same_shape(a, b, "div_eps");
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| x / (y + eps))
                .collect();
            Tensor::from_vec(data, ta.shape())
        };
        self.push(v, Op::DivEps { a: a.0, b: b.0, eps })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a.0))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale { a: a.0, c })
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar { a: a.0 })
    }

    /// `x[..., c] + b[c]` with the bias broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (rows, cols) = rows_cols(self.value(x).shape());
        assert_eq!(self.value(b).shape(), &[cols], "add_bias: bias must match last axis");
        let v = {
            let (tx, tb) = (self.value(x), self.value(b));
            let mut data = tx.data().to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += tb.data()[c];
                }
            }
            Tensor::from_vec(data, tx.shape())
        };
        self.push(v, Op::AddBias { x: x.0, b: b.0 })
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 2, "matmul: lhs must be rank 2");
        assert_eq!(sb.len(), 2, "matmul: rhs must be rank 2");
        assert_eq!(sa[1], sb[0], "matmul: inner dimensions differ");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_vec(out, &[m, n]), Op::Matmul { a: a.0, b: b.0 })
    }

    /// Batched `[B,m,k] · [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 3, "bmm: lhs must be rank 3");
        assert_eq!(sb.len(), 3, "bmm: rhs must be rank 3");
        assert_eq!(sa[0], sb[0], "bmm: batch dimensions differ");
        assert_eq!(sa[2], sb[1], "bmm: inner dimensions differ");
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            matmul_acc(
                &mut out[i * m * n..(i + 1) * m * n],
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
        }
        self.push(Tensor::from_vec(out, &[bs, m, n]), Op::Bmm { a: a.0, b: b.0 })
    }

    /// Batched `[B,m,k] · [B,n,k]ᵀ -> [B,m,n]` (attention scores pattern).
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 3, "bmm_nt: lhs must be rank 3");
        assert_eq!(sb.len(), 3, "bmm_nt: rhs must be rank 3");
        assert_eq!(sa[0], sb[0], "bmm_nt: batch dimensions differ");
        assert_eq!(sa[2], sb[2], "bmm_nt: contracted dimensions differ");
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            matmul_nt_acc(
                &mut out[i * m * n..(i + 1) * m * n],
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
            );
        }
        self.push(Tensor::from_vec(out, &[bs, m, n]), Op::BmmNT { a: a.0, b: b.0 })
    }

    /// `[B,X,Y] -> [B,Y,X]`.
    pub fn transpose_12(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3, "transpose_12: input must be rank 3");
        let (bs, x, y) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); bs * x * y];
        for b in 0..bs {
            for i in 0..x {
                for j in 0..y {
                    out[b * x * y + j * x + i] = src[b * x * y + i * y + j];
                }
            }
        }
        self.push(Tensor::from_vec(out, &[bs, y, x]), Op::Transpose12(a.0))
    }

    /// Same elements, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshaped(shape);
        self.push(v, Op::Reshape(a.0))
    }

    /// Insert a new axis of extent `n` at `axis`, repeating the input.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Var {
        let s = self.value(a).shape().to_vec();
        assert!(axis <= s.len(), "expand: axis out of range");
        let mut out_shape = s.clone();
        out_shape.insert(axis, n);
        let pre: usize = s[..axis].iter().product();
        let post: usize = s[axis..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); pre * n * post];
        for p in 0..pre {
            let chunk = &src[p * post..(p + 1) * post];
            for i in 0..n {
                out[(p * n + i) * post..(p * n + i + 1) * post].copy_from_slice(chunk);
            }
        }
        self.push(Tensor::from_vec(out, &out_shape), Op::Expand { a: a.0, axis, n })
    }

    /// Sum out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let s = self.value(a).shape().to_vec();
        assert!(axis < s.len(), "sum_axis: axis out of range");
        let (pre, n, post) = around_axis(&s, axis);
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let src = self.value(a).data();
        let mut out = vec![F::zero(); pre * post];
        for p in 0..pre {
            for i in 0..n {
                let chunk = &src[(p * n + i) * post..(p * n + i + 1) * post];
                let orow = &mut out[p * post..(p + 1) * post];
                for q in 0..post {
                    orow[q] += chunk[q];
                }
            }
        }
        self.push(Tensor::from_vec(out, &out_shape), Op::SumAxis { a: a.0, axis })
    }

    /// Sum every element into a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    /// Mean of every element.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Concatenate along the last axis; all leading axes must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last: no inputs");
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last: leading shapes differ");
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![F::zero(); rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Tensor::from_vec(out, &shape),
            Op::ConcatLast(parts.iter().map(|v| v.0).collect()),
        )
    }

    /// Take `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = rows_cols(self.value(a).shape());
        assert!(start + len <= cols, "slice_last: range out of bounds");
        let src = self.value(a).data();
        let mut out = vec![F::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::from_vec(out, &shape), Op::SliceLast { a: a.0, start, len })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(F::zero()));
        self.push(v, Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a.0))
    }

    /// `ln(x + eps)`, defined for non-negative inputs.
    pub fn ln_eps(&mut self, a: Var, eps: F) -> Var {
        let v = self.value(a).map(|x| (x + eps).ln());
        self.push(v, Op::LnEps { a: a.0, eps })
    }

    /// `sqrt(x + eps)`, with eps keeping the gradient finite at zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: F) -> Var {
        let v = self.value(a).map(|x| (x + eps).sqrt());
        self.push(v, Op::SqrtEps { a: a.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    /// Clamp into `[0, 1]`.
    pub fn clamp_unit(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(F::zero()).min(F::one()));
        self.push(v, Op::ClampUnit(a.0))
    }

    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(self.value(a).shape());
        let src = self.value(a).data();
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                out[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= denom;
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_vec(out, &shape), Op::SoftmaxLast(a.0))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm_last(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (rows, cols) = rows_cols(self.value(x).shape());
        assert_eq!(self.value(gamma).shape(), &[cols], "layer_norm_last: gamma shape");
        assert_eq!(self.value(beta).shape(), &[cols], "layer_norm_last: beta shape");
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let n = F::of(cols as f64);
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = g[c] * ((row[c] - mean) * inv) + bta[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::from_vec(out, &shape),
            Op::LayerNormLast { x: x.0, gamma: gamma.0, beta: beta.0, eps },
        )
    }

    /// 2-D convolution: `x [B,Ci,H,W]`, `w [Co,Ci,kh,kw]`, `b [Co]`, with
    /// symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        assert_eq!(sx.len(), 4, "conv2d: input must be rank 4");
        assert_eq!(sw.len(), 4, "conv2d: weights must be rank 4");
        assert_eq!(sx[1], sw[1], "conv2d: channel counts differ");
        assert_eq!(self.value(b).shape(), &[sw[0]], "conv2d: bias shape");
        let (bs, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![F::zero(); bs * co * oh * ow];
        for bi in 0..bs {
            for o in 0..co {
                let base = (bi * co + o) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bd[o];
                        for c in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = ((bi * ci + c) * h + iy as usize) * wd;
                                let wrow = ((o * ci + c) * kh + ky) * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xd[xrow + ix as usize] * wdta[wrow + kx];
                                }
                            }
                        }
                        out[base + oy * ow + ox] = acc;
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(out, &[bs, co, oh, ow]),
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad },
        )
    }

    /// Pose parameters `(sx, sy, shear, rot, tx, ty)` on the last axis (size 6)
    /// to forward affine rows `(a11, a12, t1, a21, a22, t2)` mapping template
    /// offsets to canvas offsets in centered pixel units. Translations are
    /// normalized: `tx = ±1` is half the canvas.
    pub fn pose_to_affine(&mut self, p: Var, half_w: F, half_h: F) -> Var {
        let shape = self.value(p).shape().to_vec();
        assert_eq!(*shape.last().unwrap(), 6, "pose_to_affine: last axis must be 6");
        let src = self.value(p).data();
        let rows = src.len() / 6;
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let q = &src[r * 6..r * 6 + 6];
            let (sx, sy, sh, th, tx, ty) = (q[0], q[1], q[2], q[3], q[4], q[5]);
            let (c, s) = (th.cos(), th.sin());
            let o = &mut out[r * 6..r * 6 + 6];
            o[0] = c * sx;
            o[1] = sy * (c * sh - s);
            o[2] = tx * half_w;
            o[3] = s * sx;
            o[4] = sy * (s * sh + c);
            o[5] = ty * half_h;
        }
        self.push(Tensor::from_vec(out, &shape), Op::PoseToAffine { p: p.0, half_w, half_h })
    }

    /// Invert affine rows `(a11,a12,t1,a21,a22,t2)`: the result maps the other
    /// way (canvas offsets to template offsets when fed the forward map).
    pub fn affine_invert(&mut self, m: Var) -> Var {
        let shape = self.value(m).shape().to_vec();
        assert_eq!(*shape.last().unwrap(), 6, "affine_invert: last axis must be 6");
        let src = self.value(m).data();
        let rows = src.len() / 6;
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let q = &src[r * 6..r * 6 + 6];
            let (a, b, t1, c, d, t2) = (q[0], q[1], q[2], q[3], q[4], q[5]);
            let det = a * d - b * c;
            let o = &mut out[r * 6..r * 6 + 6];
            o[0] = d / det;
            o[1] = -b / det;
            o[3] = -c / det;
            o[4] = a / det;
            o[2] = -(o[0] * t1 + o[1] * t2);
            o[5] = -(o[3] * t1 + o[4] * t2);
        }
        self.push(Tensor::from_vec(out, &shape), Op::AffineInvert(m.0))
    }

    /// Compose object poses with relative part poses:
    /// `a [B,K,6] ∘ b [K,M,6] -> [B,K,M,6]` (apply `b`, then `a`).
    pub fn affine_compose(&mut self, a: Var, b: Var) -> Var {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert!(sa.len() == 3 && sa[2] == 6, "affine_compose: lhs must be [B,K,6]");
        assert!(sb.len() == 3 && sb[2] == 6, "affine_compose: rhs must be [K,M,6]");
        assert_eq!(sa[1], sb[0], "affine_compose: K dimensions differ");
        let (bs, k, m) = (sa[0], sa[1], sb[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![F::zero(); bs * k * m * 6];
        for bi in 0..bs {
            for ki in 0..k {
                let l = &ad[(bi * k + ki) * 6..(bi * k + ki) * 6 + 6];
                for mi in 0..m {
                    let r = &bd[(ki * m + mi) * 6..(ki * m + mi) * 6 + 6];
                    let prod = affine_mul(l, r);
                    out[((bi * k + ki) * m + mi) * 6..((bi * k + ki) * m + mi) * 6 + 6]
                        .copy_from_slice(&prod);
                }
            }
        }
        self.push(Tensor::from_vec(out, &[bs, k, m, 6]), Op::AffineCompose { a: a.0, b: b.0 })
    }

    /// Warp templates onto an output canvas. `templates [M,T,T]`; `affines
    /// [B,M,6]` map canvas offsets to template offsets (centered pixel units);
    /// bilinear sampling with zero outside the template. Output `[B,M,H,W]`.
    pub fn affine_sample(&mut self, templates: Var, affines: Var, out_h: usize, out_w: usize) -> Var {
        let st = self.value(templates).shape().to_vec();
        let sa = self.value(affines).shape().to_vec();
        assert!(st.len() == 3 && st[1] == st[2], "affine_sample: templates must be [M,T,T]");
        assert!(sa.len() == 3 && sa[2] == 6, "affine_sample: affines must be [B,M,6]");
        assert_eq!(st[0], sa[1], "affine_sample: template count mismatch");
        let (m, t) = (st[0], st[1]);
        let bs = sa[0];
        let td = self.value(templates).data();
        let ad = self.value(affines).data();
        let mut out = vec![F::zero(); bs * m * out_h * out_w];
        let tc = F::of((t as f64 - 1.0) / 2.0);
        // Integer canvas anchor so an identity affine lines template pixels up
        // with canvas pixels exactly.
        let cx = F::of(((out_w - 1) / 2) as f64);
        let cy = F::of(((out_h - 1) / 2) as f64);
        for bi in 0..bs {
            for mi in 0..m {
                let n = &ad[(bi * m + mi) * 6..(bi * m + mi) * 6 + 6];
                let tem = &td[mi * t * t..(mi + 1) * t * t];
                let base = (bi * m + mi) * out_h * out_w;
                for iy in 0..out_h {
                    let dy = F::of(iy as f64) - cy;
                    for ix in 0..out_w {
                        let dx = F::of(ix as f64) - cx;
                        let tu = n[0] * dx + n[1] * dy + n[2] + tc;
                        let tv = n[3] * dx + n[4] * dy + n[5] + tc;
                        out[base + iy * out_w + ix] = bilinear_value(tem, t, tu, tv);
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(out, &[bs, m, out_h, out_w]),
            Op::AffineSample { templates: templates.0, affines: affines.0, out_h, out_w },
        )
    }

    /// Presence-weighted max compositing: `out[b,y,x] = max_m p[b,m] ·
    /// img[b,m,y,x]`. Ties resolve to the lowest part index.
    pub fn weighted_max_composite(&mut self, presence: Var, images: Var) -> Var {
        let sp = self.value(presence).shape().to_vec();
        let si = self.value(images).shape().to_vec();
        assert_eq!(sp.len(), 2, "weighted_max_composite: presence must be [B,M]");
        assert_eq!(si.len(), 4, "weighted_max_composite: images must be [B,M,H,W]");
        assert_eq!(sp[0], si[0], "weighted_max_composite: batch mismatch");
        assert_eq!(sp[1], si[1], "weighted_max_composite: part count mismatch");
        let (bs, m, h, w) = (si[0], si[1], si[2], si[3]);
        let pd = self.value(presence).data();
        let id = self.value(images).data();
        let mut out = vec![F::zero(); bs * h * w];
        let mut argmax = vec![0u32; bs * h * w];
        for bi in 0..bs {
            for y in 0..h {
                for x in 0..w {
                    let mut best = F::neg_infinity();
                    let mut best_m = 0u32;
                    for mi in 0..m {
                        let v = pd[bi * m + mi] * id[((bi * m + mi) * h + y) * w + x];
                        if v > best {
                            best = v;
                            best_m = mi as u32;
                        }
                    }
                    out[(bi * h + y) * w + x] = best;
                    argmax[(bi * h + y) * w + x] = best_m;
                }
            }
        }
        self.push(
            Tensor::from_vec(out, &[bs, h, w]),
            Op::WeightedMaxComposite { presence: presence.0, images: images.0, argmax },
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every variable
    /// that influenced it.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward requires a scalar root, got shape {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=root.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>) {
        let acc = |grads: &mut Vec<Option<Tensor<F>>>, idx: usize, delta: Tensor<F>| {
            match &mut grads[idx] {
                Some(t) => {
                    debug_assert_eq!(t.shape(), delta.shape());
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = Tensor::from_vec(
                    g.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    ta.shape(),
                );
                let gb = Tensor::from_vec(
                    g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect(),
                    tb.shape(),
                );
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::DivEps { a, b, eps } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut ga = vec![F::zero(); ta.numel()];
                let mut gb = vec![F::zero(); tb.numel()];
                for j in 0..ta.numel() {
                    let denom = tb.data()[j] + *eps;
                    ga[j] = g.data()[j] / denom;
                    gb[j] = -g.data()[j] * ta.data()[j] / (denom * denom);
                }
                acc(grads, *a, Tensor::from_vec(ga, ta.shape()));
                acc(grads, *b, Tensor::from_vec(gb, tb.shape()));
            }
            Op::Neg(a) => acc(grads, *a, g.map(|x| -x)),
            Op::Scale { a, c } => {
                let c = *c;
                acc(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar { a } => acc(grads, *a, g.clone()),
            Op::AddBias { x, b } => {
                let cols = self.nodes[*b].value.numel();
                let rows = g.numel() / cols;
                let mut gb = vec![F::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g.data()[r * cols + c];
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, Tensor::from_vec(gb, &[cols]));
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut ga = vec![F::zero(); m * k];
                let mut gb = vec![F::zero(); k * n];
                matmul_nt_acc(&mut ga, g.data(), tb.data(), m, n, k);
                matmul_tn_acc(&mut gb, ta.data(), g.data(), m, k, n);
                acc(grads, *a, Tensor::from_vec(ga, ta.shape()));
                acc(grads, *b, Tensor::from_vec(gb, tb.shape()));
            }
            Op::Bmm { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                let mut ga = vec![F::zero(); bs * m * k];
                let mut gb = vec![F::zero(); bs * k * n];
                for bi in 0..bs {
                    matmul_nt_acc(
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        m,
                        n,
                        k,
                    );
                    matmul_tn_acc(
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                acc(grads, *a, Tensor::from_vec(ga, ta.shape()));
                acc(grads, *b, Tensor::from_vec(gb, tb.shape()));
            }
            Op::BmmNT { a, b } => {
                // out[bi] = A[bi] · B[bi]ᵀ; gA = g · B, gB = gᵀ · A.
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[1];
                let mut ga = vec![F::zero(); bs * m * k];
                let mut gb = vec![F::zero(); bs * n * k];
                for bi in 0..bs {
                    matmul_acc(
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &tb.data()[bi * n * k..(bi + 1) * n * k],
                        m,
                        n,
                        k,
                    );
                    matmul_tn_acc(
                        &mut gb[bi * n * k..(bi + 1) * n * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                acc(grads, *a, Tensor::from_vec(ga, ta.shape()));
                acc(grads, *b, Tensor::from_vec(gb, tb.shape()));
            }
            Op::Transpose12(a) => {
                let s = self.nodes[*a].value.shape();
                let (bs, x, y) = (s[0], s[1], s[2]);
                let mut ga = vec![F::zero(); bs * x * y];
                for b in 0..bs {
                    for i in 0..x {
                        for j in 0..y {
                            ga[b * x * y + i * y + j] = g.data()[b * x * y + j * x + i];
                        }
                    }
                }
                acc(grads, *a, Tensor::from_vec(ga, s));
            }
            Op::Reshape(a) => {
                let s = self.nodes[*a].value.shape().to_vec();
                acc(grads, *a, g.reshaped(&s));
            }
            Op::Expand { a, axis, n } => {
                let s = self.nodes[*a].value.shape();
                let pre: usize = s[..*axis].iter().product();
                let post: usize = s[*axis..].iter().product();
                let mut ga = vec![F::zero(); pre * post];
                for p in 0..pre {
                    for i in 0..*n {
                        let chunk = &g.data()[(p * n + i) * post..(p * n + i + 1) * post];
                        let orow = &mut ga[p * post..(p + 1) * post];
                        for q in 0..post {
                            orow[q] += chunk[q];
                        }
                    }
                }
                acc(grads, *a, Tensor::from_vec(ga, s));
            }
            Op::SumAxis { a, axis } => {
                let s = self.nodes[*a].value.shape();
                let (pre, n, post) = around_axis(s, *axis);
                let mut ga = vec![F::zero(); pre * n * post];
                for p in 0..pre {
                    let chunk = &g.data()[p * post..(p + 1) * post];
                    for i in 0..n {
                        ga[(p * n + i) * post..(p * n + i + 1) * post].copy_from_slice(chunk);
                    }
                }
                acc(grads, *a, Tensor::from_vec(ga, s));
            }
            Op::SumAll(a) => {
                let s = self.nodes[*a].value.shape();
                acc(grads, *a, Tensor::full(s, g.item()));
            }
            Op::ConcatLast(parts) => {
                let total = *self.nodes[i].value.shape().last().unwrap();
                let rows = g.numel() / total;
                let mut off = 0;
                for &p in parts {
                    let w = *self.nodes[p].value.shape().last().unwrap();
                    let mut gp = vec![F::zero(); rows * w];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    acc(grads, p, Tensor::from_vec(gp, self.nodes[p].value.shape()));
                    off += w;
                }
            }
            Op::SliceLast { a, start, len } => {
                let (rows, cols) = rows_cols(self.nodes[*a].value.shape());
                let mut ga = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    ga[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *a, Tensor::from_vec(ga, self.nodes[*a].value.shape()));
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[i].value;
                let ga = Tensor::from_vec(
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &s)| gv * s * (F::one() - s))
                        .collect(),
                    out.shape(),
                );
                acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let out = &self.nodes[i].value;
                let ga = Tensor::from_vec(
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &t)| gv * (F::one() - t * t))
                        .collect(),
                    out.shape(),
                );
                acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let inp = &self.nodes[*a].value;
                let ga = Tensor::from_vec(
                    g.data()
                        .iter()
                        .zip(inp.data())
                        .map(|(&gv, &x)| if x > F::zero() { gv } else { F::zero() })
                        .collect(),
                    inp.shape(),
                );
                acc(grads, *a, ga);
            }
            Op::Exp(a) => {
                let out = &self.nodes[i].value;
                let ga = Tensor::from_vec(
                    g.data().iter().zip(out.data()).map(|(&gv, &e)| gv * e).collect(),
                    out.shape(),
                );
                acc(grads, *a, ga);
            }
            Op::LnEps { a, eps } => {
                let inp = &self.nodes[*a].value;
                let ga = Tensor::from_vec(
                    g.data()
                        .iter()
                        .zip(inp.data())
                        .map(|(&gv, &x)| gv / (x + *eps))
                        .collect(),
                    inp.shape(),
                );
                acc(grads, *a, ga);
            }
            Op::SqrtEps { a } => {
                let out = &self.nodes[i].value;
                let half = F::of(0.5);
                let ga = Tensor::from_vec(
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &s)| gv * half / s)
                        .collect(),
                    out.shape(),
                );
                acc(grads, *a, ga);
            }
            Op::Square(a) => {
                let inp = &self.nodes[*a].value;
                let two = F::of(2.0);
                let ga = Tensor::from_vec(
                    g.data()
                        .iter()
                        .zip(inp.data())
                        .map(|(&gv, &x)| gv * two * x)
                        .collect(),
                    inp.shape(),
                );
                acc(grads, *a, ga);
            }
            Op::ClampUnit(a) => {
                let inp = &self.nodes[*a].value;
                let ga = Tensor::from_vec(
                    g.data()
                        .iter()
                        .zip(inp.data())
                        .map(|(&gv, &x)| {
                            if x >= F::zero() && x <= F::one() {
                                gv
                            } else {
                                F::zero()
                            }
                        })
                        .collect(),
                    inp.shape(),
                );
                acc(grads, *a, ga);
            }
            Op::SoftmaxLast(a) => {
                let out = &self.nodes[i].value;
                let (rows, cols) = rows_cols(out.shape());
                let mut ga = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    let s = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: F = s.iter().zip(gr).map(|(&sv, &gv)| sv * gv).sum();
                    for c in 0..cols {
                        ga[r * cols + c] = s[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_vec(ga, out.shape()));
            }
            Op::LayerNormLast { x, gamma, beta, eps } => {
                let inp = &self.nodes[*x].value;
                let gm = &self.nodes[*gamma].value;
                let (rows, cols) = rows_cols(inp.shape());
                let n = F::of(cols as f64);
                let mut gx = vec![F::zero(); rows * cols];
                let mut gg = vec![F::zero(); cols];
                let mut gb = vec![F::zero(); cols];
                for r in 0..rows {
                    let row = &inp.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mean = row.iter().copied().sum::<F>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                    let inv = F::one() / (var + *eps).sqrt();
                    // xhat, then the standard layernorm input gradient.
                    let mut sum_gy = F::zero();
                    let mut sum_gy_xhat = F::zero();
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        let gy = gr[c] * gm.data()[c];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        gg[c] += gr[c] * xhat;
                        gb[c] += gr[c];
                    }
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        let gy = gr[c] * gm.data()[c];
                        gx[r * cols + c] = inv * (gy - sum_gy / n - xhat * sum_gy_xhat / n);
                    }
                }
                acc(grads, *x, Tensor::from_vec(gx, inp.shape()));
                acc(grads, *gamma, Tensor::from_vec(gg, &[cols]));
                acc(grads, *beta, Tensor::from_vec(gb, &[cols]));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let inp = &self.nodes[*x].value;
                let ker = &self.nodes[*w].value;
                let (bs, ci, h, wd) = (
                    inp.shape()[0],
                    inp.shape()[1],
                    inp.shape()[2],
                    inp.shape()[3],
                );
                let (co, kh, kw) = (ker.shape()[0], ker.shape()[2], ker.shape()[3]);
                let (oh, ow) = (self.nodes[i].value.shape()[2], self.nodes[i].value.shape()[3]);
                let mut gx = vec![F::zero(); inp.numel()];
                let mut gw = vec![F::zero(); ker.numel()];
                let mut gb = vec![F::zero(); co];
                let xd = inp.data();
                let wdta = ker.data();
                for bi in 0..bs {
                    for o in 0..co {
                        let base = (bi * co + o) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data()[base + oy * ow + ox];
                                if gv == F::zero() {
                                    continue;
                                }
                                gb[o] += gv;
                                for c in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = ((bi * ci + c) * h + iy as usize) * wd;
                                        let wrow = ((o * ci + c) * kh + ky) * kw;
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            gx[xrow + ix as usize] += gv * wdta[wrow + kx];
                                            gw[wrow + kx] += gv * xd[xrow + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(gx, inp.shape()));
                acc(grads, *w, Tensor::from_vec(gw, ker.shape()));
                acc(grads, *b, Tensor::from_vec(gb, &[co]));
            }
            Op::PoseToAffine { p, half_w, half_h } => {
                let inp = &self.nodes[*p].value;
                let rows = inp.numel() / 6;
                let mut gp = vec![F::zero(); inp.numel()];
                for r in 0..rows {
                    let q = &inp.data()[r * 6..r * 6 + 6];
                    let (sx, sy, sh, th) = (q[0], q[1], q[2], q[3]);
                    let (c, s) = (th.cos(), th.sin());
                    let gr = &g.data()[r * 6..r * 6 + 6];
                    let o = &mut gp[r * 6..r * 6 + 6];
                    // o0 = c·sx, o1 = sy(c·sh − s), o2 = tx·hw,
                    // o3 = s·sx, o4 = sy(s·sh + c), o5 = ty·hh.
                    o[0] = gr[0] * c + gr[3] * s;
                    o[1] = gr[1] * (c * sh - s) + gr[4] * (s * sh + c);
                    o[2] = gr[1] * (c * sy) + gr[4] * (s * sy);
                    o[3] = gr[0] * (-s * sx)
                        + gr[1] * sy * (-s * sh - c)
                        + gr[3] * (c * sx)
                        + gr[4] * sy * (c * sh - s);
                    o[4] = gr[2] * *half_w;
                    o[5] = gr[5] * *half_h;
                }
                acc(grads, *p, Tensor::from_vec(gp, inp.shape()));
            }
            Op::AffineInvert(a) => {
                // With augmented matrices, d(N)/d(A) where N = A⁻¹ gives the
                // adjoint rule gA = −Nᵀ · G · Nᵀ.
                let out = &self.nodes[i].value;
                let rows = out.numel() / 6;
                let mut ga = vec![F::zero(); out.numel()];
                for r in 0..rows {
                    let nrow = &out.data()[r * 6..r * 6 + 6];
                    let gr = &g.data()[r * 6..r * 6 + 6];
                    // Full 3×3 forms. N has implicit last row (0,0,1); G has
                    // implicit last row of zeros.
                    let nt = [
                        [nrow[0], nrow[3], F::zero()],
                        [nrow[1], nrow[4], F::zero()],
                        [nrow[2], nrow[5], F::one()],
                    ];
                    let gm = [
                        [gr[0], gr[1], gr[2]],
                        [gr[3], gr[4], gr[5]],
                        [F::zero(), F::zero(), F::zero()],
                    ];
                    // tmp = Nᵀ · G ; res = −tmp · Nᵀ.
                    let mut tmp = [[F::zero(); 3]; 3];
                    for ii in 0..3 {
                        for jj in 0..3 {
                            let mut s = F::zero();
                            for kk in 0..3 {
                                s += nt[ii][kk] * gm[kk][jj];
                            }
                            tmp[ii][jj] = s;
                        }
                    }
                    let o = &mut ga[r * 6..r * 6 + 6];
                    for (oi, (ii, jj)) in
                        [(0usize, 0usize), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
                            .iter()
                            .enumerate()
                    {
                        let mut s = F::zero();
                        for kk in 0..3 {
                            s += tmp[*ii][kk] * nt[kk][*jj];
                        }
                        o[oi] = -s;
                    }
                }
                acc(grads, *a, Tensor::from_vec(ga, self.nodes[*a].value.shape()));
            }
            Op::AffineCompose { a, b } => {
                // out = A·B (augmented): gA = G·augBᵀ, gB = augAᵀ·G, keeping
                // the six active entries.
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (bs, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                let mut ga = vec![F::zero(); ta.numel()];
                let mut gb = vec![F::zero(); tb.numel()];
                for bi in 0..bs {
                    for ki in 0..k {
                        let arow = &ta.data()[(bi * k + ki) * 6..(bi * k + ki) * 6 + 6];
                        for mi in 0..m {
                            let brow = &tb.data()[(ki * m + mi) * 6..(ki * m + mi) * 6 + 6];
                            let gr = &g.data()
                                [((bi * k + ki) * m + mi) * 6..((bi * k + ki) * m + mi) * 6 + 6];
                            let gslot = &mut ga[(bi * k + ki) * 6..(bi * k + ki) * 6 + 6];
                            // gA[r][c] = Σ_j G[r][j] · augB[c][j]
                            gslot[0] += gr[0] * brow[0] + gr[1] * brow[1] + gr[2] * brow[2];
                            gslot[1] += gr[0] * brow[3] + gr[1] * brow[4] + gr[2] * brow[5];
                            gslot[2] += gr[2];
                            gslot[3] += gr[3] * brow[0] + gr[4] * brow[1] + gr[5] * brow[2];
                            gslot[4] += gr[3] * brow[3] + gr[4] * brow[4] + gr[5] * brow[5];
                            gslot[5] += gr[5];
                            let bslot = &mut gb[(ki * m + mi) * 6..(ki * m + mi) * 6 + 6];
                            // gB[r][c] = Σ_j augA[j][r] · G[j][c]
                            bslot[0] += arow[0] * gr[0] + arow[3] * gr[3];
                            bslot[1] += arow[0] * gr[1] + arow[3] * gr[4];
                            bslot[2] += arow[0] * gr[2] + arow[3] * gr[5];
                            bslot[3] += arow[1] * gr[0] + arow[4] * gr[3];
                            bslot[4] += arow[1] * gr[1] + arow[4] * gr[4];
                            bslot[5] += arow[1] * gr[2] + arow[4] * gr[5];
                        }
                    }
                }
                acc(grads, *a, Tensor::from_vec(ga, ta.shape()));
                acc(grads, *b, Tensor::from_vec(gb, tb.shape()));
            }
            Op::AffineSample { templates, affines, out_h, out_w } => {
                let tt = &self.nodes[*templates].value;
                let ta = &self.nodes[*affines].value;
                let (m, t) = (tt.shape()[0], tt.shape()[1]);
                let bs = ta.shape()[0];
                let mut gt = vec![F::zero(); tt.numel()];
                let mut gaff = vec![F::zero(); ta.numel()];
                let tc = F::of((t as f64 - 1.0) / 2.0);
                let cx = F::of(((*out_w - 1) / 2) as f64);
                let cy = F::of(((*out_h - 1) / 2) as f64);
                let td = tt.data();
                for bi in 0..bs {
                    for mi in 0..m {
                        let n = &ta.data()[(bi * m + mi) * 6..(bi * m + mi) * 6 + 6];
                        let tem = &td[mi * t * t..(mi + 1) * t * t];
                        let gtem = (bi * m + mi) * *out_h * *out_w;
                        for iy in 0..*out_h {
                            let dy = F::of(iy as f64) - cy;
                            for ix in 0..*out_w {
                                let gv = g.data()[gtem + iy * *out_w + ix];
                                if gv == F::zero() {
                                    continue;
                                }
                                let dx = F::of(ix as f64) - cx;
                                let tu = n[0] * dx + n[1] * dy + n[2] + tc;
                                let tv = n[3] * dx + n[4] * dy + n[5] + tc;
                                let bg = bilinear_grads(tem, t, tu, tv);
                                // Template gradient at the four corners.
                                for (idx, wgt) in bg.corners {
                                    if let Some(idx) = idx {
                                        gt[mi * t * t + idx] += gv * wgt;
                                    }
                                }
                                let gslot = &mut gaff[(bi * m + mi) * 6..(bi * m + mi) * 6 + 6];
                                gslot[0] += gv * bg.du * dx;
                                gslot[1] += gv * bg.du * dy;
                                gslot[2] += gv * bg.du;
                                gslot[3] += gv * bg.dv * dx;
                                gslot[4] += gv * bg.dv * dy;
                                gslot[5] += gv * bg.dv;
                            }
                        }
                    }
                }
                acc(grads, *templates, Tensor::from_vec(gt, tt.shape()));
                acc(grads, *affines, Tensor::from_vec(gaff, ta.shape()));
            }
            Op::WeightedMaxComposite { presence, images, argmax } => {
                let tp = &self.nodes[*presence].value;
                let ti = &self.nodes[*images].value;
                let (bs, m, h, w) = (
                    ti.shape()[0],
                    ti.shape()[1],
                    ti.shape()[2],
                    ti.shape()[3],
                );
                let mut gp = vec![F::zero(); tp.numel()];
                let mut gi = vec![F::zero(); ti.numel()];
                for bi in 0..bs {
                    for y in 0..h {
                        for x in 0..w {
                            let flat = (bi * h + y) * w + x;
                            let gv = g.data()[flat];
                            if gv == F::zero() {
                                continue;
                            }
                            let mi = argmax[flat] as usize;
                            let img = ti.data()[((bi * m + mi) * h + y) * w + x];
                            let pres = tp.data()[bi * m + mi];
                            gp[bi * m + mi] += gv * img;
                            gi[((bi * m + mi) * h + y) * w + x] += gv * pres;
                        }
                    }
                }
                acc(grads, *presence, Tensor::from_vec(gp, tp.shape()));
                acc(grads, *images, Tensor::from_vec(gi, ti.shape()));
            }
        }
    }
}

/// Bilinear read of `tem[t,t]` at fractional coordinates, zero outside.
fn bilinear_value<F: Real>(tem: &[F], t: usize, tu: F, tv: F) -> F {
    let fu = tu.floor();
    let fv = tv.floor();
    let au = tu - fu;
    let av = tv - fv;
    let iu = fu.as_f64() as isize;
    let iv = fv.as_f64() as isize;
    let read = |vv: isize, uu: isize| -> F {
        if vv < 0 || uu < 0 || vv >= t as isize || uu >= t as isize {
            F::zero()
        } else {
            tem[vv as usize * t + uu as usize]
        }
    };
    let t00 = read(iv, iu);
    let t01 = read(iv, iu + 1);
    let t10 = read(iv + 1, iu);
    let t11 = read(iv + 1, iu + 1);
    let one = F::one();
    (one - av) * ((one - au) * t00 + au * t01) + av * ((one - au) * t10 + au * t11)
}

struct BilinearGrads<F> {
    /// Four (flat template index, weight) pairs; `None` index means the corner
    /// fell outside the template.
    corners: [(Option<usize>, F); 4],
    /// d value / d tu and d value / d tv.
    du: F,
    dv: F,
}

fn bilinear_grads<F: Real>(tem: &[F], t: usize, tu: F, tv: F) -> BilinearGrads<F> {
    let fu = tu.floor();
    let fv = tv.floor();
    let au = tu - fu;
    let av = tv - fv;
    let iu = fu.as_f64() as isize;
    let iv = fv.as_f64() as isize;
    let idx = |vv: isize, uu: isize| -> Option<usize> {
        if vv < 0 || uu < 0 || vv >= t as isize || uu >= t as isize {
            None
        } else {
            Some(vv as usize * t + uu as usize)
        }
    };
    let val = |o: Option<usize>| o.map_or(F::zero(), |j| tem[j]);
    let (i00, i01, i10, i11) = (idx(iv, iu), idx(iv, iu + 1), idx(iv + 1, iu), idx(iv + 1, iu + 1));
    let (t00, t01, t10, t11) = (val(i00), val(i01), val(i10), val(i11));
    let one = F::one();
    BilinearGrads {
        corners: [
            (i00, (one - av) * (one - au)),
            (i01, (one - av) * au),
            (i10, av * (one - au)),
            (i11, av * au),
        ],
        du: (one - av) * (t01 - t00) + av * (t11 - t10),
        dv: (one - au) * (t10 - t00) + au * (t11 - t01),
    }
}
