use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{self, ConvGeom, MatLayout};
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which parameter leaves receive gradients.
#[derive(Clone, Debug, Default)]
pub enum ParamGrad {
    /// Every non-buffer parameter.
    #[default]
    All,
    /// No parameter (inference or gradient-of-input only).
    None,
    /// Parameters whose name starts with one of these prefixes.
    Prefixes(Vec<String>),
}

impl ParamGrad {
    fn wants(&self, name: &str) -> bool {
        match self {
            ParamGrad::All => true,
            ParamGrad::None => false,
            ParamGrad::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

enum Op<T> {
    Input,
    Param { name: String, trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(MatMulSpec),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    BroadcastTo(Var),
    Resize(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy)]
struct MatMulSpec {
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    watched: bool,
}

/// Append-only computation tape.
///
/// Nodes are recorded in evaluation order, so reverse iteration is a valid
/// topological order for the backward sweep.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    param_grad: ParamGrad,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
///
/// Only parameter leaves, watched nodes and the seeded output keep their
/// gradient after the sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new(false)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            param_grad: ParamGrad::All,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Evaluation-mode graph that records no parameter gradients.
    pub fn inference() -> Self {
        let mut g = Self::new(false);
        g.param_grad = ParamGrad::None;
        g
    }

    pub fn with_param_grad(mut self, mode: ParamGrad) -> Self {
        self.param_grad = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Requests the gradient of `v` itself in the next backward sweep.
    pub fn watch(&mut self, v: Var) {
        self.nodes[v.0].watched = true;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            watched: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, p: &Param<T>) -> Var {
        let trainable = !p.is_buffer() && self.param_grad.wants(p.name());
        self.push(
            p.value().clone(),
            Op::Param {
                name: p.name().to_string(),
                trainable,
            },
        )
    }

    /// Bernoulli keep-mask scaled by `1/(1-rate)`, drawn from the graph RNG.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let shape = self.shape(x).to_vec();
        let n = numel(&shape);
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let m = self.input(Tensor::new(shape, mask).expect("mask"));
        self.mul(x, m)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: operand shapes differ");
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("zip")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    fn check_suffix(&self, op: &str, a: Var, b: Var) -> usize {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let trimmed: Vec<usize> = sb.iter().copied().skip_while(|&d| d == 1).collect();
        assert!(
            trimmed.len() <= sa.len() && sa[sa.len() - trimmed.len()..] == trimmed[..],
            "{op}: {sb:?} is not a trailing broadcast of {sa:?}"
        );
        numel(sb)
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let n = self.check_suffix("add_bcast", a, b);
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % n]).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data).expect("add_bcast");
        self.push(v, Op::AddBcast(a, b))
    }

    /// `a * b` where `b`'s shape equals the trailing dims of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let n = self.check_suffix("mul_bcast", a, b);
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x * bd[i % n]).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data).expect("mul_bcast");
        self.push(v, Op::MulBcast(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]` (or `[..., k, m]` with `ta`). `b` is either a
    /// plain matrix shared by every batch entry or carries the same batch
    /// axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs matrices");
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner dims {sa:?} x {sb:?}");
        let lead = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2;
        if !b_shared {
            assert_eq!(&sb[..sb.len() - 2], lead, "matmul batch dims {sa:?} x {sb:?}");
        }
        let mut batch = numel(lead);
        let mut m_eff = m;
        if b_shared && !ta {
            // fold batch into rows
            m_eff = m * batch;
            batch = 1;
        }
        let spec = MatMulSpec {
            a,
            b,
            ta,
            tb,
            batch,
            m: m_eff,
            k,
            n,
            b_shared,
        };
        let mut out = vec![T::zero(); batch * m_eff * n];
        let al = MatLayout::dense(if ta { k } else { m_eff }, if ta { m_eff } else { k }, ta, false);
        let bl = MatLayout::dense(if tb { n } else { k }, if tb { k } else { n }, tb, b_shared);
        let cl = MatLayout::dense(m_eff, n, false, false);
        kernels::batched_gemm(batch, m_eff, k, n, self.data(a), al, self.data(b), bl, &mut out, cl, T::zero());
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let v = Tensor::new(shape, out).expect("matmul");
        self.push(v, Op::MatMul(spec))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().expect("softmax rank");
        let data = kernels::softmax_rows(self.data(a), n);
        let v = Tensor::new(self.shape(a).to_vec(), data).expect("softmax");
        self.push(v, Op::Softmax(a))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let n = *self.shape(x).last().expect("layer_norm rank");
        assert_eq!(self.shape(gamma), &[n]);
        assert_eq!(self.shape(beta), &[n]);
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / n;
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(rows);
        let inv_n = T::one() / T::of(n as f64);
        for (src, dst) in xd.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mean = src.iter().copied().sum::<T>() * inv_n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + T::of(eps)).sqrt();
            for i in 0..n {
                dst[i] = (src[i] - mean) * r * gd[i] + bd[i];
            }
            rstd.push(r);
        }
        let v = Tensor::new(self.shape(x).to_vec(), out).expect("layer_norm");
        self.push(v, Op::LayerNorm { x, gamma, beta, rstd })
    }

    /// Batch normalisation of an `[N,C,H,W]` tensor.
    ///
    /// With `stats = None` the batch statistics are used and differentiated
    /// through; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var, stats: Option<(&[T], &[T])>, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "batch_norm2d expects NCHW");
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let batch_stats = stats.is_none();
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => kernels::channel_mean_var(self.data(x), n, c, plane),
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (mu, r, ga, be) = (mean[ch], rstd[ch], gd[ch], bd[ch]);
                for i in off..off + plane {
                    out[i] = (xd[i] - mu) * r * ga + be;
                }
            }
        }
        let v = Tensor::new(s, out).expect("batch_norm");
        self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            },
        )
    }

    /// 2-D convolution: `x` is `[N,C,H,W]`, `w` is `[O,C,kh,kw]`, bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4, "conv2d expects NCHW input and OIHW weight");
        assert_eq!(sx[1], sw[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let (n, o) = (sx[0], sw[0]);
        let plane = ho * wo;
        let rows = geom.col_rows();
        let mut cols = vec![T::zero(); rows * plane];
        let mut out = vec![T::zero(); n * o * plane];
        let in_size = sx[1] * sx[2] * sx[3];
        for s in 0..n {
            kernels::im2col(&self.data(x)[s * in_size..(s + 1) * in_size], &geom, &mut cols);
            let dst = &mut out[s * o * plane..(s + 1) * o * plane];
            if let Some(b) = b {
                for (oc, &bv) in self.data(b).iter().enumerate() {
                    dst[oc * plane..(oc + 1) * plane].fill(bv);
                }
            }
            T::gemm(o, rows, plane, self.data(w), (rows as isize, 1), &cols, (plane as isize, 1), T::one(), dst, (plane as isize, 1));
        }
        let v = Tensor::new(vec![n, o, ho, wo], out).expect("conv2d");
        self.push(v, Op::Conv2d { x, w, b, geom })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape.to_vec()).expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let (data, shape) = kernels::permute(self.data(a), self.shape(a), perm);
        let v = Tensor::new(shape, data).expect("permute");
        self.push(v, Op::Permute(a, perm.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let outer = numel(&first[..axis]);
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch"
            );
            total_axis += s[axis];
        }
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let v = Tensor::new(shape, out).expect("concat");
        self.push(v, Op::Concat(parts.to_vec(), axis))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[axis], "slice out of range");
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = self.data(x);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::new(shape, out).expect("slice");
        self.push(v, Op::Slice { x, axis, start })
    }

    /// Repeats `x` to fill `shape`; `x` must match its trailing dims.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let src = self.data(x);
        let n = src.len();
        let total = numel(shape);
        let trimmed: Vec<usize> = self.shape(x).iter().copied().skip_while(|&d| d == 1).collect();
        assert!(
            trimmed.len() <= shape.len() && shape[shape.len() - trimmed.len()..] == trimmed[..],
            "broadcast_to: incompatible shapes"
        );
        let data = (0..total).map(|i| src[i % n]).collect();
        let v = Tensor::new(shape.to_vec(), data).expect("broadcast");
        self.push(v, Op::BroadcastTo(x))
    }

    /// Bilinear resize of the last two axes.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        let r = s.len();
        assert!(r >= 2);
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes = numel(&s[..r - 2]);
        let data = kernels::resize_planes(self.data(x), planes, h, w, oh, ow);
        let mut shape = s[..r - 2].to_vec();
        shape.extend([oh, ow]);
        let v = Tensor::new(shape, data).expect("resize");
        self.push(v, Op::Resize(x))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], targets.len());
        let k = s[1];
        let probs = kernels::softmax_rows(self.data(logits), k);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < k, "target class out of range");
            loss -= probs[i * k + t].max(T::min_positive_value()).ln();
        }
        loss = loss / T::of(targets.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let from_inputs = match &node.op {
                Op::Input => false,
                Op::Param { trainable, .. } => *trainable,
                op => inputs_of(op).iter().any(|v| needs[v.0]),
            };
            needs[i] = from_inputs || node.watched;
        }
        needs
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        self.backward_with(loss, Tensor::ones(self.shape(loss).to_vec()))
    }

    /// Reverse sweep seeded with an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(out));
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            if !needs[i] {
                grads[i] = grads[i].take().filter(|_| self.nodes[i].watched);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads, &needs);
            // keep only what callers can ask for
            if self.nodes[i].watched || matches!(self.nodes[i].op, Op::Param { .. }) || i == out.0 {
                grads[i] = Some(g);
            }
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    /// Gradients of every trainable parameter leaf, summed per name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> HashMap<String, Tensor<T>> {
        let mut out: HashMap<String, Tensor<T>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { name, trainable: true } = &node.op {
                let Some(g) = &grads.grads[i] else { continue };
                match out.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => {
                        out.insert(name.clone(), Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad"));
                    }
                }
            }
        }
        out
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], needs: &[bool]) {
        let mut acc = |v: Var, d: Vec<T>| {
            if !needs[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param { .. } => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    acc(*a, g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect());
                }
                if needs[b.0] {
                    acc(*b, g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddBcast(a, b) => {
                acc(*a, g.to_vec());
                if needs[b.0] {
                    let n = self.value(*b).numel();
                    let mut gb = vec![T::zero(); n];
                    for (j, &x) in g.iter().enumerate() {
                        gb[j % n] += x;
                    }
                    acc(*b, gb);
                }
            }
            Op::MulBcast(a, b) => {
                let bd = self.data(*b);
                let n = bd.len();
                if needs[a.0] {
                    acc(*a, g.iter().enumerate().map(|(j, &x)| x * bd[j % n]).collect());
                }
                if needs[b.0] {
                    let mut gb = vec![T::zero(); n];
                    for (j, (&x, &av)) in g.iter().zip(self.data(*a)).enumerate() {
                        gb[j % n] += x * av;
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::MatMul(spec) => self.matmul_backward(spec, g, &mut acc, needs),
            Op::Relu(a) => acc(*a, g.iter().zip(out).map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }).collect()),
            Op::Gelu(a) => acc(*a, g.iter().zip(self.data(*a)).map(|(&x, &v)| x * gelu_grad(v)).collect()),
            Op::Sigmoid(a) => acc(*a, g.iter().zip(out).map(|(&x, &y)| x * y * (T::one() - y)).collect()),
            Op::Square(a) => acc(*a, g.iter().zip(self.data(*a)).map(|(&x, &v)| x * v * T::of(2.0)).collect()),
            Op::Softmax(a) => {
                let n = *self.shape(*a).last().unwrap();
                let mut d = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks_exact(n).zip(out.chunks_exact(n)).zip(d.chunks_exact_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let n = *self.shape(*x).last().unwrap();
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                let inv_n = T::one() / T::of(n as f64);
                let mut xhat = vec![T::zero(); n];
                for (row, r) in rstd.iter().enumerate() {
                    let xs = &xd[row * n..(row + 1) * n];
                    let gs = &g[row * n..(row + 1) * n];
                    let mean = xs.iter().copied().sum::<T>() * inv_n;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        xhat[j] = (xs[j] - mean) * *r;
                        let dxh = gs[j] * gd[j];
                        s1 += dxh;
                        s2 += dxh * xhat[j];
                        dg[j] += gs[j] * xhat[j];
                        db[j] += gs[j];
                    }
                    s1 = s1 * inv_n;
                    s2 = s2 * inv_n;
                    let dst = &mut dx[row * n..(row + 1) * n];
                    for j in 0..n {
                        dst[j] = *r * (gs[j] * gd[j] - s1 - xhat[j] * s2);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let count = T::of((n * plane) as f64);
                for ch in 0..c {
                    let (mu, r) = (mean[ch], rstd[ch]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for k in off..off + plane {
                            let xh = (xd[k] - mu) * r;
                            s1 += g[k];
                            s2 += g[k] * xh;
                        }
                    }
                    dg[ch] = s2;
                    db[ch] = s1;
                    let ga = gd[ch];
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for k in off..off + plane {
                            dx[k] = if *batch_stats {
                                let xh = (xd[k] - mu) * r;
                                ga * r * (g[k] - s1 / count - xh * s2 / count)
                            } else {
                                ga * r * g[k]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (ho, wo) = geom.out_hw();
                let plane = ho * wo;
                let rows = geom.col_rows();
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let in_size = geom.channels * geom.height * geom.width;
                let mut cols = vec![T::zero(); rows * plane];
                let mut dcols = vec![T::zero(); rows * plane];
                let mut dw = vec![T::zero(); o * rows];
                let mut dx = if needs[x.0] { vec![T::zero(); n * in_size] } else { Vec::new() };
                let wd = self.data(*w);
                for s in 0..n {
                    let gs = &g[s * o * plane..(s + 1) * o * plane];
                    if needs[w.0] {
                        kernels::im2col(&self.data(*x)[s * in_size..(s + 1) * in_size], geom, &mut cols);
                        T::gemm(o, plane, rows, gs, (plane as isize, 1), &cols, (1, plane as isize), T::one(), &mut dw, (rows as isize, 1));
                    }
                    if needs[x.0] {
                        T::gemm(rows, o, plane, wd, (1, rows as isize), gs, (plane as isize, 1), T::zero(), &mut dcols, (plane as isize, 1));
                        kernels::col2im(&dcols, geom, &mut dx[s * in_size..(s + 1) * in_size]);
                    }
                }
                if let Some(b) = b {
                    if needs[b.0] {
                        let mut db = vec![T::zero(); o];
                        for s in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                let off = (s * o + oc) * plane;
                                *d += g[off..off + plane].iter().copied().sum::<T>();
                            }
                        }
                        acc(*b, db);
                    }
                }
                if needs[w.0] {
                    acc(*w, dw);
                }
                if needs[x.0] {
                    acc(*x, dx);
                }
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute(a, perm) => {
                let (d, _) = kernels::permute(g, self.shape(Var(i)), &kernels::inverse_perm(perm));
                acc(*a, d);
            }
            Op::Concat(parts, axis) => {
                let s = self.shape(Var(i));
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if needs[p.0] {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(p, d);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let len = self.shape(Var(i))[*axis];
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let mut d = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::BroadcastTo(x) => {
                let n = self.value(*x).numel();
                let mut d = vec![T::zero(); n];
                for (j, &v) in g.iter().enumerate() {
                    d[j % n] += v;
                }
                acc(*x, d);
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                let r = s.len();
                let so = self.shape(Var(i));
                let planes = numel(&s[..r - 2]);
                acc(
                    *x,
                    kernels::resize_planes_backward(g, planes, s[r - 2], s[r - 1], so[r - 2], so[r - 1]),
                );
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * k + t] -= scale;
                }
                acc(*logits, d);
            }
        }
    }

    fn matmul_backward(&self, s: &MatMulSpec, g: &[T], acc: &mut impl FnMut(Var, Vec<T>), needs: &[bool]) {
        let (batch, m, k, n) = (s.batch, s.m, s.k, s.n);
        let a = self.data(s.a);
        let b = self.data(s.b);
        // op(A) is m×k and op(B) is k×n as read during the forward pass.
        let op_a = MatLayout::dense(if s.ta { k } else { m }, if s.ta { m } else { k }, s.ta, false);
        let op_b = MatLayout::dense(if s.tb { n } else { k }, if s.tb { k } else { n }, s.tb, s.b_shared);
        let g_mn = MatLayout::dense(m, n, false, false);
        let g_nm = MatLayout::dense(m, n, true, false);
        let flip = |l: MatLayout| MatLayout {
            batch_stride: l.batch_stride,
            rs: l.cs,
            cs: l.rs,
        };
        if needs[s.a.0] {
            let mut da = vec![T::zero(); a.len()];
            if !s.ta {
                let out = MatLayout::dense(m, k, false, false);
                kernels::batched_gemm(batch, m, n, k, g, g_mn, b, flip(op_b), &mut da, out, T::zero());
            } else {
                let out = MatLayout::dense(k, m, false, false);
                kernels::batched_gemm(batch, k, n, m, b, op_b, g, g_nm, &mut da, out, T::zero());
            }
            acc(s.a, da);
        }
        if needs[s.b.0] {
            let mut db = vec![T::zero(); b.len()];
            if !s.tb {
                let out = MatLayout::dense(k, n, false, s.b_shared);
                kernels::batched_gemm(batch, k, m, n, a, flip(op_a), g, g_mn, &mut db, out, T::zero());
            } else {
                let out = MatLayout::dense(n, k, false, s.b_shared);
                kernels::batched_gemm(batch, n, m, k, g, g_nm, a, op_a, &mut db, out, T::zero());
            }
            acc(s.b, db);
        }
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Input | Op::Param { .. } => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBcast(a, b) | Op::MulBcast(a, b) => vec![*a, *b],
        Op::MatMul(s) => vec![s.a, s.b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Square(a)
        | Op::Softmax(a)
        | Op::Reshape(a)
        | Op::Permute(a, _)
        | Op::BroadcastTo(a)
        | Op::Resize(a)
        | Op::SumAll(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Concat(parts, _) => parts.clone(),
        Op::Slice { x, .. } => vec![*x],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    T::of(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
