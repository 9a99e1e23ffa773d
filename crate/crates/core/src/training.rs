//! Weighted-MSE objective and the two-stage segmenter schedule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use gradeprompt_autograd::optim::{Adam, CosineSchedule};
use gradeprompt_autograd::{Graph, ParamGrad, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CornerSample;
use crate::error::{io_err, Error, Result};
use crate::raster::{BinaryMask, Raster};
use crate::segmenter::{
    Segmenter, GROUP_ADAPTER, GROUP_CONTOUR_DECODER, GROUP_CONTOUR_PROMPT, GROUP_GLAND_DECODER, GROUP_GLAND_PROMPT,
    GROUP_IMAGE_ENCODER,
};

/// `Σ w·(p − t)²` summed over pixels, averaged over the leading batch axis.
pub fn weighted_mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, weight: Var) -> Var {
    let n = g.shape(pred)[0];
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let w = g.mul(sq, weight);
    let s = g.sum_all(w);
    g.scale(s, T::of(1.0 / n as f64))
}

/// Scalar reference for one raster: `Σ w·(p − t)²`.
pub fn weighted_mse_raster(pred: &Raster<f32>, target: &BinaryMask, weight: &Raster<f32>) -> Result<f64> {
    pred.same_dims(target, "weighted mse target")?;
    pred.same_dims(weight, "weighted mse weight")?;
    check_weights(weight.data())?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weight.data())
        .map(|((&p, &t), &w)| {
            let d = p as f64 - if t { 1.0 } else { 0.0 };
            w as f64 * d * d
        })
        .sum())
}

pub fn check_weights(w: &[f32]) -> Result<()> {
    match w.iter().position(|&v| !(v >= 0.0)) {
        Some(i) => Err(Error::InvalidArgument(format!("weight map entry {i} is {} (must be >= 0)", w[i]))),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "gland")]
    Gland,
    #[serde(rename = "contour")]
    Contour,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Gland => "gland",
            Stage::Contour => "contour",
        }
    }

    /// Parameter groups updated by the stage; everything else is frozen,
    /// normalisation statistics included.
    pub fn trainable_groups(self) -> &'static [&'static str] {
        match self {
            Stage::Gland => &[GROUP_IMAGE_ENCODER, GROUP_GLAND_PROMPT, GROUP_ADAPTER, GROUP_GLAND_DECODER],
            Stage::Contour => &[GROUP_CONTOUR_PROMPT, GROUP_CONTOUR_DECODER],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gland" | "gland_stage" => Ok(Stage::Gland),
            "contour" | "contour_stage" => Ok(Stage::Contour),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}` (expected gland or contour)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Per-pixel weights from the weight map.
    #[default]
    Weighted,
    /// All weights 1, the baseline objective.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    /// Random quarter-turn per sample and epoch.
    pub rotate: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr: 1e-4,
            lr_floor: 0.01,
            weight_decay: 0.0,
            loss: LossKind::Weighted,
            rotate: true,
        }
    }
}

/// A corner crop with heat maps for each of its four rotations.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub corner: CornerSample,
    /// Indexed by quarter turns; required by the gland stage only.
    pub heat: Option<[Raster<f32>; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub curve: Vec<LossPoint>,
    pub epoch_loss: Vec<f64>,
}

pub fn write_loss_curve(curve: &[LossPoint], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,step,loss\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.epoch, p.step, p.loss));
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossPoint>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |reason: String| Error::Format {
        what: "loss curve",
        path: path.to_path_buf(),
        reason,
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields in `{l}`")));
            }
            Ok(LossPoint {
                epoch: f[0].parse().map_err(|e| bad(format!("{e}")))?,
                step: f[1].parse().map_err(|e| bad(format!("{e}")))?,
                loss: f[2].parse().map_err(|e| bad(format!("{e}")))?,
            })
        })
        .collect()
}

/// Batch tensors for one set of `(sample, rotation)` pairs.
pub struct Batch<T> {
    pub image: Tensor<T>,
    pub heat: Option<Tensor<T>>,
    pub gland: Tensor<T>,
    pub contour: Tensor<T>,
    pub weight: Tensor<T>,
}

fn plane<T: Scalar, P: Copy>(r: &Raster<P>, f: impl Fn(P) -> f64) -> Tensor<T> {
    Tensor::new([1, r.height(), r.width()], r.data().iter().map(|&v| T::of(f(v))).collect()).expect("plane")
}

pub fn make_batch<T: Scalar>(samples: &[&SegSample], rotations: &[u8], loss: LossKind) -> Result<Batch<T>> {
    let mut images = Vec::new();
    let mut heats = Vec::new();
    let (mut gl, mut co, mut wt) = (Vec::new(), Vec::new(), Vec::new());
    for (s, &k) in samples.iter().zip(rotations) {
        let p = s.corner.rotated(k);
        check_weights(p.weight_map.data())?;
        images.push(p.image.to_normalized_tensor::<T>());
        if let Some(h) = &s.heat {
            heats.push(plane(&h[k as usize], |v: f32| v as f64));
        }
        gl.push(plane(&p.gland_mask, |b: bool| b as u8 as f64));
        co.push(plane(&p.contour_mask, |b: bool| b as u8 as f64));
        wt.push(match loss {
            LossKind::Weighted => plane(&p.weight_map, |v: f32| v as f64),
            LossKind::Plain => plane(&p.weight_map, |_| 1.0),
        });
    }
    let heat = if heats.len() == samples.len() { Some(Tensor::stack(&heats)?) } else { None };
    Ok(Batch {
        image: Tensor::stack(&images)?,
        heat,
        gland: Tensor::stack(&gl)?,
        contour: Tensor::stack(&co)?,
        weight: Tensor::stack(&wt)?,
    })
}

/// One optimisation step of the gland branch; returns the batch loss
/// before the update.
pub fn gland_step<T: Scalar>(
    model: &mut Segmenter<T>,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
    lr: f64,
) -> Result<f64> {
    let heat = batch
        .heat
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("gland stage needs heat maps".into()))?;
    let groups = Stage::Gland.trainable_groups().iter().map(|s| s.to_string()).collect();
    let mut g = Graph::new(true).with_param_grad(ParamGrad::Prefixes(groups));
    let x = g.input(batch.image.clone());
    let h = g.input(heat.clone());
    let t = g.input(batch.gland.clone());
    let w = g.input(batch.weight.clone());
    let e = model.embed_graph(&mut g, x)?;
    let logits = model.gland_graph(&mut g, e, x, h, true)?;
    let p = g.sigmoid(logits);
    let loss = weighted_mse(&mut g, p, t, w);
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss);
    opt.step(model, &g.param_grads(&grads), lr);
    Ok(value)
}

/// One optimisation step of the contour branch on cached embeddings.
pub fn contour_step<T: Scalar>(
    model: &mut Segmenter<T>,
    opt: &mut Adam<T>,
    embedding: &Tensor<T>,
    batch: &Batch<T>,
    lr: f64,
) -> Result<f64> {
    let groups = Stage::Contour.trainable_groups().iter().map(|s| s.to_string()).collect();
    let mut g = Graph::new(true).with_param_grad(ParamGrad::Prefixes(groups));
    let e = g.input(embedding.clone());
    let t = g.input(batch.contour.clone());
    let w = g.input(batch.weight.clone());
    let logits = model.contour_graph(&mut g, e);
    let p = g.sigmoid(logits);
    let loss = weighted_mse(&mut g, p, t, w);
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss);
    opt.step(model, &g.param_grads(&grads), lr);
    Ok(value)
}

/// Trains one stage in place.
///
/// `input_stage` is the stage tag of the checkpoint the model was loaded
/// from; the contour stage refuses to run unless it is the gland stage.
/// The image encoder and the gland branch are never touched by the contour
/// stage, and the contour branch never by the gland stage.
pub fn run_stage<T: Scalar>(
    model: &mut Segmenter<T>,
    stage: Stage,
    input_stage: Option<Stage>,
    data: &[SegSample],
    cfg: &StageConfig,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<StageReport> {
    if data.is_empty() {
        return Err(Error::Empty("segmentation training set"));
    }
    if stage == Stage::Contour && input_stage != Some(Stage::Gland) {
        return Err(Error::InvalidArgument(
            "the contour stage needs a gland-stage checkpoint; run `train-seg --stage gland` first".into(),
        ));
    }
    if stage == Stage::Gland && data.iter().any(|s| s.heat.is_none()) {
        return Err(Error::InvalidArgument("gland stage needs a heat map for every sample".into()));
    }
    let bs = cfg.batch_size.max(1);
    let steps = data.len().div_ceil(bs) * cfg.epochs;
    let schedule = CosineSchedule {
        base: cfg.lr,
        total: steps as u64,
        floor: cfg.lr_floor,
    };
    let mut opt = Adam::<T>::default();
    opt.weight_decay = cfg.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // frozen encoder: embed every (sample, rotation) once
    let cache: Vec<[Option<Tensor<T>>; 4]> = if stage == Stage::Contour {
        let mut out = Vec::with_capacity(data.len());
        for s in data {
            let mut per: [Option<Tensor<T>>; 4] = Default::default();
            let rots: &[u8] = if cfg.rotate { &[0, 1, 2, 3] } else { &[0] };
            for &k in rots {
                let img = s.corner.image.rotate_quarter(k).to_normalized_tensor::<T>();
                let img = Tensor::stack(&[img])?;
                per[k as usize] = Some(model.encode_image_tokens(&img)?);
            }
            out.push(per);
        }
        out
    } else {
        Vec::new()
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    let mut epoch_loss = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let rots: Vec<u8> = chunk
                .iter()
                .map(|_| if cfg.rotate { rng.gen_range(0..4) } else { 0 })
                .collect();
            let samples: Vec<&SegSample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = make_batch::<T>(&samples, &rots, cfg.loss)?;
            let lr = schedule.lr(step as u64);
            let loss = match stage {
                Stage::Gland => gland_step(model, &mut opt, &batch, lr)?,
                Stage::Contour => {
                    let parts: Vec<Tensor<T>> = chunk
                        .iter()
                        .zip(&rots)
                        .map(|(&i, &k)| cache[i][k as usize].clone().expect("cached").index_first(0))
                        .collect();
                    contour_step(model, &mut opt, &Tensor::stack(&parts)?, &batch, lr)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            curve.push(LossPoint { epoch, step, loss });
            total += loss * chunk.len() as f64;
            step += 1;
        }
        let mean = total / data.len() as f64;
        progress(epoch, mean);
        epoch_loss.push(mean);
    }
    Ok(StageReport {
        stage,
        curve,
        epoch_loss,
    })
}
