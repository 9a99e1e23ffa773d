//! Transformer building blocks shared by the classifier and the segmenter.

use gradeprompt_autograd::nn::{uniform, Attention, LayerNorm, Mlp};
use gradeprompt_autograd::{impl_module, Graph, Param, Scalar, Tensor, Var};
use rand::Rng;

/// Splits an NCHW tensor into non-overlapping `k×k` patches:
/// `[N, C, H, W] → [N, (H/k)(W/k), C·k·k]`, each patch flattened as
/// `(c, ky, kx)` to match convolution weight layout.
pub fn patchify_nchw<T: Scalar>(g: &mut Graph<T>, x: Var, k: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % k == 0 && w % k == 0, "patch size {k} must divide {h}x{w}");
    let (gh, gw) = (h / k, w / k);
    let x = g.reshape(x, &[n, c, gh, k, gw, k]);
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5]);
    g.reshape(x, &[n, gh * gw, c * k * k])
}

/// As [`patchify_nchw`] for channels-last tokens `[N, H·W, C]` on an `h×w` grid.
pub fn patchify_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize, k: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (n, c) = (s[0], s[2]);
    assert!(h % k == 0 && w % k == 0, "patch size {k} must divide {h}x{w}");
    let (gh, gw) = (h / k, w / k);
    let x = g.reshape(x, &[n, gh, k, gw, k, c]);
    let x = g.permute(x, &[0, 1, 3, 5, 2, 4]);
    g.reshape(x, &[n, gh * gw, c * k * k])
}

/// Convolution with kernel = stride (no overlap), weights `[out, in, k, k]`,
/// producing channels-last tokens.
#[derive(Clone, Debug)]
pub struct PatchConv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
}

impl_module!(PatchConv<T> { weight, bias });

impl<T: Scalar> PatchConv<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(&[out_ch, in_ch, kernel, kernel], bound, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([out_ch])),
            kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    /// Applies the kernel to already patchified rows `[N, L, in·k·k]`.
    pub fn project(&self, g: &mut Graph<T>, patches: Var) -> Var {
        let s = self.weight.value().shape().to_vec();
        let w = g.param(&self.weight);
        let w = g.reshape(w, &[s[0], s[1] * s[2] * s[3]]);
        let y = g.matmul(patches, w, false, true);
        let b = g.param(&self.bias);
        g.add_bcast(y, b)
    }

    pub fn forward_nchw(&self, g: &mut Graph<T>, x: Var) -> Var {
        let p = patchify_nchw(g, x, self.kernel);
        self.project(g, p)
    }

    pub fn forward_tokens(&self, g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
        let p = patchify_tokens(g, x, h, w, self.kernel);
        self.project(g, p)
    }

    pub fn zero_(&mut self) {
        self.weight.value_mut().data_mut().fill(T::zero());
        self.bias.value_mut().data_mut().fill(T::zero());
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub dropout: f64,
}

impl_module!(Block<T> { norm1, attn, norm2, mlp });

impl<T: Scalar> Block<T> {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: f64, dropout: f64, rng: &mut impl Rng) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Self {
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            attn: Attention::new(&format!("{name}.attn"), dim, dim, heads, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, hidden, dim, rng),
            dropout,
        }
    }

    /// Returns the block output and the normalised tokens entering attention.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h, h);
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let m = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, m);
        let m = g.dropout(m, self.dropout);
        (g.add(x, m), h)
    }
}

/// Fixed 2-D sine/cosine position code `[h·w, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_position_encoding<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    assert!(dim % 4 == 0, "position code width must be divisible by 4");
    let quarter = dim / 4;
    let mut data = vec![T::zero(); h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * dim..(r * w + c + 1) * dim];
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                let (y, x) = (r as f64 * freq, c as f64 * freq);
                row[i] = T::of(y.sin());
                row[quarter + i] = T::of(y.cos());
                row[2 * quarter + i] = T::of(x.sin());
                row[3 * quarter + i] = T::of(x.cos());
            }
        }
    }
    Tensor::new([h * w, dim], data).expect("position code")
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradeprompt_autograd::Graph64;
    use rand::SeedableRng;

    #[test]
    fn patch_conv_matches_strided_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let conv = PatchConv::<f64>::new("p", 2, 3, 2, &mut rng);
        let x = Tensor::from_fn([1, 2, 4, 6], |i| (i as f64 * 0.37).sin());
        let mut g = Graph64::inference();
        let xv = g.input(x.clone());
        let tokens = conv.forward_nchw(&mut g, xv);
        assert_eq!(g.shape(tokens), &[1, 6, 3]);
        let w = g.param(&conv.weight);
        let conv_out = g.conv2d(xv, w, None, 2, 0);
        // conv output [1,3,2,3] vs tokens [1,6,3]
        for o in 0..3 {
            for p in 0..6 {
                let a = g.value(tokens).data()[p * 3 + o];
                let b = g.value(conv_out).data()[o * 6 + p];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_patchify_agrees_with_nchw() {
        let x = Tensor::<f64>::from_fn([2, 3, 4, 4], |i| i as f64);
        let mut g = Graph64::inference();
        let xv = g.input(x);
        let a = patchify_nchw(&mut g, xv, 2);
        let t = g.permute(xv, &[0, 2, 3, 1]);
        let t = g.reshape(t, &[2, 16, 3]);
        let b = patchify_tokens(&mut g, t, 4, 4, 2);
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn position_code_is_bounded_and_distinct() {
        let pe = sincos_position_encoding::<f64>(3, 3, 8);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        let row = |i: usize| pe.data()[i * 8..(i + 1) * 8].to_vec();
        assert_ne!(row(1), row(3));
    }
}
