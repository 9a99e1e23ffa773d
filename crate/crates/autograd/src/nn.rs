//! Parameterised layers recorded onto a [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::kernels;
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::impl_module;

/// Uniform `[-bound, bound]` initialiser.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..=bound)))
}

/// Uniform initialiser with standard deviation `std`.
pub fn uniform_std<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    uniform(shape, std * 3f64.sqrt(), rng)
}

/// Affine map over the last axis; weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl_module!(Linear<T> { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(&[fan_out, fan_in], bound, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([fan_out]))),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w, false, true);
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bcast(y, b)
            }
            None => y,
        }
    }

    pub fn zero_(&mut self) {
        self.weight.value_mut().data_mut().fill(T::zero());
        if let Some(b) = &mut self.bias {
            b.value_mut().data_mut().fill(T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub eps: f64,
}

impl_module!(LayerNorm<T> { weight, bias });

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::ones([dim])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([dim])),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.layer_norm(x, w, b, self.eps)
    }
}

/// Per-channel batch normalisation of NCHW tensors with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl_module!(BatchNorm2d<T> { weight, bias, running_mean, running_var });

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::ones([channels])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training-mode graphs normalise with batch statistics and fold them
    /// into the running estimates; evaluation graphs use the estimates.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        if g.is_training() {
            let s = g.shape(x).to_vec();
            let count = s[0] * s[2] * s[3];
            let (mean, var) = kernels::channel_mean_var(g.value(x).data(), s[0], s[1], s[2] * s[3]);
            let m = T::of(self.momentum);
            let unbias = if count > 1 { T::of(count as f64 / (count as f64 - 1.0)) } else { T::one() };
            for (r, &v) in self.running_mean.value_mut().data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, &v) in self.running_var.value_mut().data_mut().iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * v * unbias;
            }
            g.batch_norm2d(x, w, b, None, self.eps)
        } else {
            self.forward_eval(g, x, w, b)
        }
    }

    /// Evaluation-mode normalisation that never touches the running statistics.
    pub fn forward_frozen(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        self.forward_eval(g, x, w, b)
    }

    fn forward_eval(&self, g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
        let mean = self.running_mean.value().data().to_vec();
        let var = self.running_var.value().data().to_vec();
        g.batch_norm2d(x, w, b, Some((&mean, &var)), self.eps)
    }
}

/// 2-D convolution with `[out, in, k, k]` weights.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl_module!(Conv2d<T> { weight, bias });

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([out_ch]))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl_module!(Mlp<T> { fc1, fc2 });

impl<T: Scalar> Mlp<T> {
    pub fn new(name: &str, dim: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with separate projections.
///
/// Queries, keys and values are `[N, L, dim]`; projections may map into a
/// narrower internal width.
#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

impl_module!(Attention<T> { q, k, v, out });

impl<T: Scalar> Attention<T> {
    pub fn new(name: &str, dim: usize, internal: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && internal % heads == 0, "heads must divide the internal width");
        Self {
            q: Linear::new(&format!("{name}.q"), dim, internal, true, rng),
            k: Linear::new(&format!("{name}.k"), dim, internal, true, rng),
            v: Linear::new(&format!("{name}.v"), dim, internal, true, rng),
            out: Linear::new(&format!("{name}.out"), internal, dim, true, rng),
            heads,
        }
    }

    fn split_heads(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (n, l, d) = (s[0], s[1], s[2]);
        let hd = d / self.heads;
        if self.heads == 1 {
            return g.reshape(x, &[n, 1, l, hd]);
        }
        let x = g.reshape(x, &[n, l, self.heads, hd]);
        g.permute(x, &[0, 2, 1, 3])
    }

    fn merge_heads(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (n, h, l, hd) = (s[0], s[1], s[2], s[3]);
        if h == 1 {
            return g.reshape(x, &[n, l, hd]);
        }
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[n, l, h * hd])
    }

    pub fn forward(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Var {
        let q = self.q.forward(g, q);
        let k = self.k.forward(g, k);
        let v = self.v.forward(g, v);
        let q = self.split_heads(g, q);
        let k = self.split_heads(g, k);
        let v = self.split_heads(g, v);
        let hd = g.shape(q)[3];
        let scores = g.matmul(q, k, false, true);
        let scores = g.scale(scores, T::of(1.0 / (hd as f64).sqrt()));
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v, false, false);
        let ctx = self.merge_heads(g, ctx);
        self.out.forward(g, ctx)
    }
}
