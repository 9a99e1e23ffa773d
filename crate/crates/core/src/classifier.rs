//! Vision-transformer grade classifier operating natively on 400×400 patches.

use std::collections::{BTreeMap, BTreeSet};

use gradeprompt_autograd::nn::{uniform_std, LayerNorm, Linear};
use gradeprompt_autograd::optim::{Adam, CosineSchedule};
use gradeprompt_autograd::{impl_module, Graph, Module, Param, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Grade;
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::vit::{Block, PatchConv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub dropout: f64,
    pub pooling: Pooling,
}

/// How the head reads the token sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Final-normed class token, as in DeiT checkpoints.
    Cls,
    /// Mean of the final-normed spatial tokens.
    #[default]
    Mean,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 400,
            patch_size: 16,
            embed_dim: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4.0,
            num_classes: 2,
            dropout: 0.0,
            pooling: Pooling::Mean,
        }
    }
}

impl ClassifierConfig {
    /// Tokens per side, `image_size / patch_size`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("classifier: {m}")));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("patch {} must divide image size {}", self.patch_size, self.image_size));
        }
        if self.num_classes != 2 {
            return bad("num_classes must be 2".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("{} heads do not divide width {}", self.heads, self.embed_dim));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub cfg: ClassifierConfig,
    pub patch_embed: PatchConv<T>,
    pub cls_token: Param<T>,
    pub pos_embed: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl_module!(Classifier<T> { patch_embed, cls_token, pos_embed, blocks, norm, head });

/// Graph handles of one classifier pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    /// `[N, 2]`
    pub logits: Var,
    /// CAM activations `[N, 1+G², D]`: with class-token pooling, the
    /// normalised tokens entering the last block's attention (the last
    /// point where spatial tokens still reach the class token); with mean
    /// pooling, the final-normed output tokens of the last block.
    pub cam_tokens: Var,
}

#[derive(Clone, Debug)]
pub struct ClassifierOutput<T> {
    /// `[N, 2]`
    pub logits: Tensor<T>,
    /// Spatial tokens of the last block as `[N, D, G, G]`, class token excluded.
    pub feature_grid: Tensor<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(cfg: ClassifierConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let tokens = 1 + cfg.grid() * cfg.grid();
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&format!("blocks.{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.dropout, rng))
            .collect();
        Ok(Self {
            patch_embed: PatchConv::new("patch_embed.proj", 3, d, cfg.patch_size, rng),
            cls_token: Param::new("cls_token", uniform_std(&[1, 1, d], 0.02, rng)),
            pos_embed: Param::new("pos_embed", uniform_std(&[1, tokens, d], 0.02, rng)),
            blocks,
            norm: LayerNorm::new("norm", d),
            head: Linear::new("head", d, cfg.num_classes, true, rng),
            cfg,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape {
                op: "classifier input",
                expected: vec![0, 3, s, s],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Records the forward pass of normalised images `[N, 3, S, S]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> ClassifierVars {
        let n = g.shape(x)[0];
        let d = self.cfg.embed_dim;
        let patches = self.patch_embed.forward_nchw(g, x);
        let cls = g.param(&self.cls_token);
        let cls = g.broadcast_to(cls, &[n, 1, d]);
        let mut h = g.concat(&[cls, patches], 1);
        let pos = g.param(&self.pos_embed);
        h = g.add_bcast(h, pos);
        h = g.dropout(h, self.cfg.dropout);
        let mut cam_tokens = h;
        for block in &self.blocks {
            let (out, normed) = block.forward(g, h);
            h = out;
            cam_tokens = normed;
        }
        let h = self.norm.forward(g, h);
        let pooled = match self.cfg.pooling {
            Pooling::Cls => {
                let cls = g.slice(h, 1, 0, 1);
                g.reshape(cls, &[n, d])
            }
            Pooling::Mean => {
                cam_tokens = h;
                let l = self.cfg.grid() * self.cfg.grid();
                let spatial = g.slice(h, 1, 1, l);
                let w = g.input(Tensor::full(vec![l, 1], T::of(1.0 / l as f64)));
                let m = g.matmul(spatial, w, true, false);
                g.reshape(m, &[n, d])
            }
        };
        let logits = self.head.forward(g, pooled);
        ClassifierVars { logits, cam_tokens }
    }

    /// Drops the class token and lays tokens out as `[N, D, G, G]`.
    pub fn tokens_to_grid(&self, tokens: &Tensor<T>) -> Tensor<T> {
        let (n, d, gsz) = (tokens.shape()[0], self.cfg.embed_dim, self.cfg.grid());
        let l = gsz * gsz;
        let mut out = vec![T::zero(); n * d * l];
        for b in 0..n {
            for p in 0..l {
                for k in 0..d {
                    out[(b * d + k) * l + p] = tokens.data()[(b * (l + 1) + 1 + p) * d + k];
                }
            }
        }
        Tensor::new([n, d, gsz, gsz], out).expect("grid")
    }

    /// Evaluation-mode logits and feature grid.
    pub fn classify(&self, images: &Tensor<T>) -> Result<ClassifierOutput<T>> {
        self.check_input(images.shape())?;
        let mut g = Graph::inference();
        let x = g.input(images.clone());
        let vars = self.forward_graph(&mut g, x);
        Ok(ClassifierOutput {
            logits: g.value(vars.logits).clone(),
            feature_grid: self.tokens_to_grid(g.value(vars.cam_tokens)),
        })
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Grade>> {
        let out = self.classify(images)?;
        Ok(argmax_rows(&out.logits).into_iter().map(Grade::from_index).collect())
    }
}

pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Stacks images into a normalised `[N, 3, H, W]` batch.
pub fn image_batch<T: Scalar>(images: &[&RgbImage]) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = images.iter().map(|im| im.to_normalized_tensor()).collect();
    Tensor::stack(&parts).expect("uniform image sizes")
}

/// A corner crop with its grade, used for classifier training.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub source_id: String,
    pub image: RgbImage,
    pub grade: Grade,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of training source images held out for validation.
    pub val_fraction: f64,
    /// Random quarter-turn augmentation.
    pub rotate: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            val_fraction: 0.2,
            rotate: true,
        }
    }
}

/// Holds out whole source images, stratified by grade, so overlapping
/// crops of one image never straddle the split.
pub fn split_by_source(
    sources: &[(String, Grade)],
    val_fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let mut by_grade: BTreeMap<Grade, BTreeSet<String>> = BTreeMap::new();
    for (id, g) in sources {
        by_grade.entry(*g).or_default().insert(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (BTreeSet::new(), BTreeSet::new());
    for ids in by_grade.values() {
        let mut ids: Vec<&String> = ids.iter().collect();
        ids.shuffle(&mut rng);
        let n_val = ((ids.len() as f64) * val_fraction).round() as usize;
        for (i, id) in ids.into_iter().enumerate() {
            if i < n_val {
                val.insert(id.clone());
            } else {
                train.insert(id.clone());
            }
        }
    }
    if train.is_empty() {
        return Err(Error::Empty("classifier training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("classifier validation split"));
    }
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train_accuracy: f64,
    /// Accuracy on extra splits evaluated after training, by name.
    pub split_accuracy: BTreeMap<String, f64>,
}

/// Fraction of images whose argmax class equals the grade.
pub fn accuracy<T: Scalar>(model: &Classifier<T>, data: &[LabeledImage], batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("accuracy split"));
    }
    let mut correct = 0;
    for chunk in data.chunks(batch.max(1)) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let pred = model.predict(&image_batch(&imgs))?;
        correct += pred.iter().zip(chunk).filter(|(p, s)| **p == s.grade).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy and mean cross-entropy over `data`.
pub fn evaluate_split<T: Scalar>(model: &Classifier<T>, data: &[LabeledImage], batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in data.chunks(batch.max(1)) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let logits = model.classify(&image_batch(&imgs))?.logits;
        let k = logits.shape()[1];
        for (row, s) in logits.data().chunks(k).zip(chunk) {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[s.grade.index()];
            let arg = argmax_rows(&Tensor::new(vec![1, k], row.clone())?)[0];
            correct += usize::from(arg == s.grade.index());
        }
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Cross-entropy training with Adam and cosine decay; keeps the weights of
/// the epoch with the best validation accuracy, ties going to the lower
/// validation loss.
pub fn train_classifier<T: Scalar>(
    model: &mut Classifier<T>,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &ClassifierTrainConfig,
    seed: u64,
    mut progress: impl FnMut(&EpochStats),
) -> Result<ClassifierReport> {
    if train.is_empty() {
        return Err(Error::Empty("classifier training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("classifier validation split"));
    }
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(bs) as u64;
    let schedule = CosineSchedule {
        base: cfg.lr,
        total: steps_per_epoch * cfg.epochs as u64,
        floor: 0.01,
    };
    let mut opt = Adam::<T>::default();
    opt.weight_decay = cfg.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, Vec<(String, Tensor<T>)>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let rotated: Vec<RgbImage> = chunk
                .iter()
                .map(|&i| {
                    let k = if cfg.rotate { rng.gen_range(0..4u8) } else { 0 };
                    train[i].image.rotate_quarter(k)
                })
                .collect();
            let refs: Vec<&RgbImage> = rotated.iter().collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].grade.index()).collect();
            let mut g = Graph::new(true).with_seed(rng.gen());
            let x = g.input(image_batch(&refs));
            let vars = model.forward_graph(&mut g, x);
            let loss = g.cross_entropy(vars.logits, &targets);
            let preds = argmax_rows(g.value(vars.logits));
            correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
            loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads);
            opt.step(model, &pg, schedule.lr(opt.steps()));
        }
        let (val_accuracy, val_loss) = evaluate_split(model, val, bs)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
            val_loss,
        };
        progress(&stats);
        let better = |b: &(f64, f64, usize, _)| val_accuracy > b.0 || (val_accuracy == b.0 && val_loss < b.1);
        if best.as_ref().map_or(true, better) {
            best = Some((val_accuracy, val_loss, epoch, model.named_tensors()));
        }
        history.push(stats);
    }
    let (best_val_accuracy, best_epoch) = match best {
        Some((acc, _, epoch, weights)) => {
            let lookup: BTreeMap<String, Tensor<T>> = weights.into_iter().collect();
            model.visit_mut(&mut |p| {
                let v = lookup[p.name()].clone();
                p.assign(v).expect("same shapes");
            });
            (acc, epoch)
        }
        None => (accuracy(model, val, bs)?, 0),
    };
    Ok(ClassifierReport {
        epochs: history,
        best_epoch,
        best_val_accuracy,
        train_accuracy: accuracy(model, train, bs)?,
        split_accuracy: BTreeMap::new(),
    })
}
