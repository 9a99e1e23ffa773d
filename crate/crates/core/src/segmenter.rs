//! Two-branch promptable segmenter: one shared image encoder, a gland
//! branch prompted by the adapted heat map and a contour branch that uses a
//! learned "no prompt" embedding.

use std::sync::atomic::{AtomicUsize, Ordering};

use gradeprompt_autograd::nn::{uniform_std, Attention, LayerNorm, Linear};
use gradeprompt_autograd::{impl_module, Graph, Module, Param, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::vit::{sincos_position_encoding, Block, PatchConv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub image_size: usize,
    pub encoder_patch: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_ratio: f64,
    /// Decoder transformer width `C`.
    pub embed_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    pub num_output_tokens: usize,
    pub adapter: AdapterConfig,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            image_size: 400,
            encoder_patch: 16,
            encoder_dim: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            encoder_mlp_ratio: 4.0,
            embed_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_dim: 256,
            num_output_tokens: 1,
            adapter: AdapterConfig::default(),
        }
    }
}

impl SegmenterConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.encoder_patch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("segmenter: {m}")));
        if self.encoder_patch == 0 || self.image_size % self.encoder_patch != 0 {
            return bad(format!("encoder_patch {} must divide image_size {}", self.encoder_patch, self.image_size));
        }
        if self.encoder_heads == 0 || self.encoder_dim % self.encoder_heads != 0 {
            return bad("encoder_heads must divide encoder_dim".into());
        }
        if self.embed_dim % 8 != 0 {
            return bad(format!("embed_dim {} must be a multiple of 8", self.embed_dim));
        }
        if self.decoder_heads == 0 || (self.embed_dim / 2) % self.decoder_heads != 0 {
            return bad("decoder_heads must divide embed_dim / 2".into());
        }
        if self.num_output_tokens == 0 {
            return bad("num_output_tokens must be at least 1".into());
        }
        self.adapter.validate()
    }

    /// Two kernel sizes whose product is the encoder patch, the first one
    /// no smaller than the second.
    pub fn prompt_kernels(&self) -> (usize, usize) {
        let p = self.encoder_patch;
        let k1 = (1..=p).find(|d| p % d == 0 && d * d >= p).unwrap_or(p);
        (k1, p / k1)
    }
}

/// Counts image-encoder evaluations.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicUsize);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.get()))
    }
}

/// Stack of linear layers with ReLU in between.
#[derive(Clone, Debug)]
pub struct ReluMlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl_module!(ReluMlp<T> { layers });

impl<T: Scalar> ReluMlp<T> {
    pub fn new(name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.layers.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph<T>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder<T> {
    pub patch_embed: PatchConv<T>,
    pub pos_embed: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub neck: Linear<T>,
    pub neck_norm: LayerNorm<T>,
}

impl_module!(ImageEncoder<T> { patch_embed, pos_embed, blocks, neck, neck_norm });

impl<T: Scalar> ImageEncoder<T> {
    pub fn new(prefix: &str, cfg: &SegmenterConfig, rng: &mut impl Rng) -> Self {
        let (d, l) = (cfg.encoder_dim, cfg.grid() * cfg.grid());
        Self {
            patch_embed: PatchConv::new(&format!("{prefix}.patch_embed.proj"), 3, d, cfg.encoder_patch, rng),
            pos_embed: Param::new(format!("{prefix}.pos_embed"), uniform_std(&[1, l, d], 0.02, rng)),
            blocks: (0..cfg.encoder_depth)
                .map(|i| Block::new(&format!("{prefix}.blocks.{i}"), d, cfg.encoder_heads, cfg.encoder_mlp_ratio, 0.0, rng))
                .collect(),
            neck: Linear::new(&format!("{prefix}.neck"), d, cfg.embed_dim, false, rng),
            neck_norm: LayerNorm::new(&format!("{prefix}.neck_norm"), cfg.embed_dim),
        }
    }

    /// `[N, 3, S, S]` → tokens `[N, G², C]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut h = self.patch_embed.forward_nchw(g, x);
        let pos = g.param(&self.pos_embed);
        h = g.add_bcast(h, pos);
        for b in &self.blocks {
            h = b.forward(g, h).0;
        }
        let h = self.neck.forward(g, h);
        self.neck_norm.forward(g, h)
    }
}

/// Dense prompt pathway: a patchifying conv stack for a one-channel prompt,
/// or a learned constant when no prompt is given.
#[derive(Clone, Debug)]
pub struct DensePromptEncoder<T> {
    pub down1: PatchConv<T>,
    pub norm1: LayerNorm<T>,
    pub down2: PatchConv<T>,
    pub norm2: LayerNorm<T>,
    pub proj: PatchConv<T>,
    pub no_mask_embed: Param<T>,
}

impl_module!(DensePromptEncoder<T> { down1, norm1, down2, norm2, proj, no_mask_embed });

impl<T: Scalar> DensePromptEncoder<T> {
    pub fn new(prefix: &str, cfg: &SegmenterConfig, rng: &mut impl Rng) -> Self {
        let (k1, k2) = cfg.prompt_kernels();
        let c = cfg.embed_dim;
        Self {
            down1: PatchConv::new(&format!("{prefix}.down1"), 1, 4, k1, rng),
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), 4),
            down2: PatchConv::new(&format!("{prefix}.down2"), 4, 16, k2, rng),
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), 16),
            proj: PatchConv::new(&format!("{prefix}.proj"), 16, c, 1, rng),
            no_mask_embed: Param::new(format!("{prefix}.no_mask_embed"), uniform_std(&[c], 0.02, rng)),
        }
    }

    /// Prompt `[N, 1, S, S]` → `[N, G², C]`.
    pub fn encode_prompt(&self, g: &mut Graph<T>, prompt: Var) -> Var {
        let s = g.shape(prompt)[2];
        let k1 = self.down1.kernel;
        let h = self.down1.forward_nchw(g, prompt);
        let h = self.norm1.forward(g, h);
        let h = g.gelu(h);
        let side = s / k1;
        let h = self.down2.forward_tokens(g, h, side, side);
        let h = self.norm2.forward(g, h);
        let h = g.gelu(h);
        self.proj.project(g, h)
    }

    /// The no-prompt embedding broadcast to `[n, l, C]`.
    pub fn encode_empty(&self, g: &mut Graph<T>, n: usize, l: usize) -> Var {
        let e = g.param(&self.no_mask_embed);
        let c = g.shape(e)[0];
        g.broadcast_to(e, &[n, l, c])
    }
}

/// Pixel-shuffle transposed convolution with kernel = stride = 2 on
/// channels-last tokens; weights `[in, out, 2, 2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl_module!(ConvTranspose2x2<T> { weight, bias });

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((out_ch * 4) as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                gradeprompt_autograd::nn::uniform(&[in_ch, out_ch, 2, 2], bound, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([out_ch])),
        }
    }

    /// Tokens `[N, h·w, in]` on an `h×w` grid → `[N, 4hw, out]` on `2h×2w`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
        let s = self.weight.value().shape().to_vec();
        let (cin, cout) = (s[0], s[1]);
        let n = g.shape(x)[0];
        let wt = g.param(&self.weight);
        let wt = g.reshape(wt, &[cin, cout * 4]);
        let y = g.matmul(x, wt, false, false);
        let y = g.reshape(y, &[n, h, w, cout, 2, 2]);
        let y = g.permute(y, &[0, 1, 4, 2, 5, 3]);
        let y = g.reshape(y, &[n, 4 * h * w, cout]);
        let b = g.param(&self.bias);
        g.add_bcast(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct TwoWayBlock<T> {
    pub self_attn: Attention<T>,
    pub norm1: LayerNorm<T>,
    pub cross_token_to_image: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: ReluMlp<T>,
    pub norm3: LayerNorm<T>,
    pub norm4: LayerNorm<T>,
    pub cross_image_to_token: Attention<T>,
    pub skip_first_pe: bool,
}

impl_module!(TwoWayBlock<T> {
    self_attn, norm1, cross_token_to_image, norm2, mlp, norm3, norm4, cross_image_to_token
});

impl<T: Scalar> TwoWayBlock<T> {
    fn new(name: &str, cfg: &SegmenterConfig, skip_first_pe: bool, rng: &mut impl Rng) -> Self {
        let (c, h) = (cfg.embed_dim, cfg.decoder_heads);
        Self {
            self_attn: Attention::new(&format!("{name}.self_attn"), c, c, h, rng),
            norm1: LayerNorm::new(&format!("{name}.norm1"), c),
            cross_token_to_image: Attention::new(&format!("{name}.cross_attn_token_to_image"), c, c / 2, h, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), c),
            mlp: ReluMlp::new(&format!("{name}.mlp"), &[c, cfg.decoder_mlp_dim, c], rng),
            norm3: LayerNorm::new(&format!("{name}.norm3"), c),
            norm4: LayerNorm::new(&format!("{name}.norm4"), c),
            cross_image_to_token: Attention::new(&format!("{name}.cross_attn_image_to_token"), c, c / 2, h, rng),
            skip_first_pe,
        }
    }

    fn forward(&self, g: &mut Graph<T>, queries: Var, keys: Var, query_pe: Var, key_pe: Var) -> (Var, Var) {
        let mut q = if self.skip_first_pe {
            self.self_attn.forward(g, queries, queries, queries)
        } else {
            let qp = g.add(queries, query_pe);
            let a = self.self_attn.forward(g, qp, qp, queries);
            g.add(queries, a)
        };
        q = self.norm1.forward(g, q);

        let qp = g.add(q, query_pe);
        let kp = g.add(keys, key_pe);
        let a = self.cross_token_to_image.forward(g, qp, kp, keys);
        q = g.add(q, a);
        q = self.norm2.forward(g, q);

        let m = self.mlp.forward(g, q);
        q = g.add(q, m);
        q = self.norm3.forward(g, q);

        let qp = g.add(q, query_pe);
        let a = self.cross_image_to_token.forward(g, kp, qp, q);
        let k = g.add(keys, a);
        let k = self.norm4.forward(g, k);
        (q, k)
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder<T> {
    pub output_tokens: Param<T>,
    pub layers: Vec<TwoWayBlock<T>>,
    pub final_attn: Attention<T>,
    pub norm_final: LayerNorm<T>,
    pub upscale1: ConvTranspose2x2<T>,
    pub upscale_norm: LayerNorm<T>,
    pub upscale2: ConvTranspose2x2<T>,
    pub hypernet: ReluMlp<T>,
}

impl_module!(MaskDecoder<T> {
    output_tokens, layers, final_attn, norm_final, upscale1, upscale_norm, upscale2, hypernet
});

impl<T: Scalar> MaskDecoder<T> {
    pub fn new(prefix: &str, cfg: &SegmenterConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.embed_dim;
        Self {
            output_tokens: Param::new(
                format!("{prefix}.output_tokens"),
                uniform_std(&[cfg.num_output_tokens, c], 1.0, rng),
            ),
            layers: (0..cfg.decoder_depth)
                .map(|i| TwoWayBlock::new(&format!("{prefix}.transformer.layers.{i}"), cfg, i == 0, rng))
                .collect(),
            final_attn: Attention::new(&format!("{prefix}.transformer.final_attn_token_to_image"), c, c / 2, cfg.decoder_heads, rng),
            norm_final: LayerNorm::new(&format!("{prefix}.transformer.norm_final_attn"), c),
            upscale1: ConvTranspose2x2::new(&format!("{prefix}.output_upscaling.0"), c, c / 4, rng),
            upscale_norm: LayerNorm::new(&format!("{prefix}.output_upscaling.1"), c / 4),
            upscale2: ConvTranspose2x2::new(&format!("{prefix}.output_upscaling.3"), c / 4, c / 8, rng),
            hypernet: ReluMlp::new(&format!("{prefix}.output_hypernetwork_mlp"), &[c, c, c, c / 8], rng),
        }
    }

    /// `image` and `dense` are `[N, G², C]`; returns mask logits `[N, 1, S, S]`.
    pub fn forward(&self, g: &mut Graph<T>, image: Var, dense: Var, grid: usize, out_size: usize) -> Var {
        let s = g.shape(image).to_vec();
        let (n, l, c) = (s[0], s[1], s[2]);
        let nt = self.output_tokens.value().shape()[0];
        let tokens = g.param(&self.output_tokens);
        let tokens = g.broadcast_to(tokens, &[n, nt, c]);
        let pe = g.input(sincos_position_encoding(grid, grid, c));
        let key_pe = g.broadcast_to(pe, &[n, l, c]);
        let src = g.add(image, dense);

        let (mut q, mut k) = (tokens, src);
        for layer in &self.layers {
            (q, k) = layer.forward(g, q, k, tokens, key_pe);
        }
        let qp = g.add(q, tokens);
        let kp = g.add(k, key_pe);
        let a = self.final_attn.forward(g, qp, kp, k);
        let q = g.add(q, a);
        let q = self.norm_final.forward(g, q);

        let up = self.upscale1.forward(g, k, grid, grid);
        let up = self.upscale_norm.forward(g, up);
        let up = g.gelu(up);
        let up = self.upscale2.forward(g, up, 2 * grid, 2 * grid);
        let up = g.gelu(up);

        let mask_token = g.slice(q, 1, 0, 1);
        let hyper = self.hypernet.forward(g, mask_token);
        let m = g.matmul(hyper, up, false, true);
        let side = 4 * grid;
        let m = g.reshape(m, &[n, 1, side, side]);
        if side == out_size {
            m
        } else {
            g.resize_bilinear(m, out_size, out_size)
        }
    }
}

/// Names of the independently trainable parameter groups.
pub const GROUP_IMAGE_ENCODER: &str = "image_encoder";
pub const GROUP_GLAND_PROMPT: &str = "gland_prompt_encoder";
pub const GROUP_ADAPTER: &str = "adapter";
pub const GROUP_GLAND_DECODER: &str = "gland_decoder";
pub const GROUP_CONTOUR_PROMPT: &str = "contour_prompt_encoder";
pub const GROUP_CONTOUR_DECODER: &str = "contour_decoder";

#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    pub cfg: SegmenterConfig,
    pub image_encoder: ImageEncoder<T>,
    pub adapter: Adapter<T>,
    pub gland_prompt_encoder: DensePromptEncoder<T>,
    pub gland_decoder: MaskDecoder<T>,
    pub contour_prompt_encoder: DensePromptEncoder<T>,
    pub contour_decoder: MaskDecoder<T>,
    encoder_calls: CallCounter,
}

impl_module!(Segmenter<T> {
    image_encoder, adapter, gland_prompt_encoder, gland_decoder, contour_prompt_encoder, contour_decoder
});

/// Probabilities from both branches, each `[N, 1, S, S]`.
#[derive(Clone, Debug)]
pub struct BranchOutput<T> {
    pub gland_prob: Tensor<T>,
    pub contour_prob: Tensor<T>,
}

impl<T: Scalar> BranchOutput<T> {
    pub fn gland_raster(&self, i: usize) -> Raster<f32> {
        plane_raster(&self.gland_prob, i)
    }

    pub fn contour_raster(&self, i: usize) -> Raster<f32> {
        plane_raster(&self.contour_prob, i)
    }
}

fn plane_raster<T: Scalar>(t: &Tensor<T>, i: usize) -> Raster<f32> {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let data = t.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.as_f64() as f32).collect();
    Raster::new(h, w, data).expect("plane dims")
}

/// Graph handles of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SegmenterVars {
    pub embedding: Var,
    pub gland_logits: Var,
    pub contour_logits: Var,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(cfg: SegmenterConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            image_encoder: ImageEncoder::new(GROUP_IMAGE_ENCODER, &cfg, rng),
            adapter: Adapter::new(GROUP_ADAPTER, &cfg.adapter, rng)?,
            gland_prompt_encoder: DensePromptEncoder::new(GROUP_GLAND_PROMPT, &cfg, rng),
            gland_decoder: MaskDecoder::new(GROUP_GLAND_DECODER, &cfg, rng),
            contour_prompt_encoder: DensePromptEncoder::new(GROUP_CONTOUR_PROMPT, &cfg, rng),
            contour_decoder: MaskDecoder::new(GROUP_CONTOUR_DECODER, &cfg, rng),
            encoder_calls: CallCounter::default(),
            cfg,
        })
    }

    /// How many times the image encoder has run on this instance.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.get()
    }

    fn check(&self, op: &'static str, shape: &[usize], channels: usize) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != channels || shape[2] != s || shape[3] != s {
            return Err(Error::Shape {
                op,
                expected: vec![shape.first().copied().unwrap_or(0), channels, s, s],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    pub fn embed_graph(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        self.check("segmenter image", g.shape(image), 3)?;
        self.encoder_calls.bump();
        Ok(self.image_encoder.forward(g, image))
    }

    /// Gland logits from an embedding and an already adapted prompt.
    pub fn gland_from_prompt(&self, g: &mut Graph<T>, embedding: Var, prompt: Var) -> Result<Var> {
        self.check("gland prompt", g.shape(prompt), 1)?;
        let dense = self.gland_prompt_encoder.encode_prompt(g, prompt);
        Ok(self.gland_decoder.forward(g, embedding, dense, self.cfg.grid(), self.cfg.image_size))
    }

    /// Gland logits from an embedding, the normalised image and its heat map.
    /// With `update_bn` in a training graph the adapter refreshes its
    /// batch-norm statistics.
    pub fn gland_graph(&mut self, g: &mut Graph<T>, embedding: Var, image: Var, heat: Var, update_bn: bool) -> Result<Var> {
        self.check("heat map", g.shape(heat), 1)?;
        let prompt = if update_bn {
            self.adapter.forward_train(g, heat, image)?
        } else {
            self.adapter.forward(g, heat, image)?
        };
        self.gland_from_prompt(g, embedding, prompt)
    }

    pub fn contour_graph(&self, g: &mut Graph<T>, embedding: Var) -> Var {
        let s = g.shape(embedding).to_vec();
        let dense = self.contour_prompt_encoder.encode_empty(g, s[0], s[1]);
        self.contour_decoder.forward(g, embedding, dense, self.cfg.grid(), self.cfg.image_size)
    }

    /// Both branches on one shared embedding, frozen normalisation statistics.
    pub fn forward_graph(&self, g: &mut Graph<T>, image: Var, heat: Var) -> Result<SegmenterVars> {
        let embedding = self.embed_graph(g, image)?;
        self.check("heat map", g.shape(heat), 1)?;
        let prompt = self.adapter.forward(g, heat, image)?;
        let gland_logits = self.gland_from_prompt(g, embedding, prompt)?;
        let contour_logits = self.contour_graph(g, embedding);
        Ok(SegmenterVars {
            embedding,
            gland_logits,
            contour_logits,
        })
    }

    /// Image embedding as `[N, C, G, G]`.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.input(image.clone());
        let e = self.embed_graph(&mut g, x)?;
        Ok(self.tokens_to_grid(g.value(e)))
    }

    /// Image embedding tokens `[N, G², C]`, as consumed by the decoders.
    pub fn encode_image_tokens(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.input(image.clone());
        let e = self.embed_graph(&mut g, x)?;
        Ok(g.value(e).clone())
    }

    /// Dense gland prompt embedding `[N, C, G, G]`.
    pub fn encode_prompt_gland(&self, prompt: &Tensor<T>) -> Result<Tensor<T>> {
        self.check("gland prompt", prompt.shape(), 1)?;
        let mut g = Graph::inference();
        let p = g.input(prompt.clone());
        let d = self.gland_prompt_encoder.encode_prompt(&mut g, p);
        Ok(self.tokens_to_grid(g.value(d)))
    }

    /// The contour branch's constant embedding `[1, C, G, G]`.
    pub fn encode_prompt_contour(&self) -> Tensor<T> {
        let mut g = Graph::inference();
        let l = self.cfg.grid() * self.cfg.grid();
        let d = self.contour_prompt_encoder.encode_empty(&mut g, 1, l);
        self.tokens_to_grid(g.value(d))
    }

    pub fn tokens_to_grid(&self, tokens: &Tensor<T>) -> Tensor<T> {
        let s = tokens.shape();
        let (n, l, c) = (s[0], s[1], s[2]);
        let gsz = self.cfg.grid();
        let mut out = vec![T::zero(); n * l * c];
        for b in 0..n {
            for p in 0..l {
                for k in 0..c {
                    out[(b * c + k) * l + p] = tokens.data()[(b * l + p) * c + k];
                }
            }
        }
        Tensor::new([n, c, gsz, gsz], out).expect("embedding grid")
    }

    /// Evaluation-mode probabilities for normalised images `[N,3,S,S]` and
    /// heat maps `[N,1,S,S]`.
    pub fn forward(&self, image: &Tensor<T>, heat: &Tensor<T>) -> Result<BranchOutput<T>> {
        let mut g = Graph::inference();
        let x = g.input(image.clone());
        let h = g.input(heat.clone());
        let vars = self.forward_graph(&mut g, x, h)?;
        let gp = g.sigmoid(vars.gland_logits);
        let cp = g.sigmoid(vars.contour_logits);
        Ok(BranchOutput {
            gland_prob: g.value(gp).clone(),
            contour_prob: g.value(cp).clone(),
        })
    }

    /// Gland probabilities with `prompt` fed straight to the prompt encoder.
    pub fn forward_with_prompt(&self, image: &Tensor<T>, prompt: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.input(image.clone());
        let p = g.input(prompt.clone());
        let e = self.embed_graph(&mut g, x)?;
        let l = self.gland_from_prompt(&mut g, e, p)?;
        let prob = g.sigmoid(l);
        Ok(g.value(prob).clone())
    }

    /// Parameter count per group.
    pub fn group_sizes(&self) -> Vec<(&'static str, usize)> {
        vec![
            (GROUP_IMAGE_ENCODER, self.image_encoder.num_params()),
            (GROUP_GLAND_PROMPT, self.gland_prompt_encoder.num_params()),
            (GROUP_ADAPTER, self.adapter.num_params()),
            (GROUP_GLAND_DECODER, self.gland_decoder.num_params()),
            (GROUP_CONTOUR_PROMPT, self.contour_prompt_encoder.num_params()),
            (GROUP_CONTOUR_DECODER, self.contour_decoder.num_params()),
        ]
    }
}
