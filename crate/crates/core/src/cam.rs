//! Grad-CAM++ heat maps over the classifier's last-block spatial tokens.

use gradeprompt_autograd::kernels::resize_planes;
use gradeprompt_autograd::{Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax_rows, image_batch, Classifier};
use crate::dataset::Grade;
use crate::error::{Error, Result};
use crate::raster::{Raster, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamConfig {
    /// Target the annotated grade instead of the predicted one.
    pub use_true_label: bool,
    pub batch_size: usize,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            use_true_label: false,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    /// Values in `[0, 1]`, same size as the input image.
    pub values: Raster<f32>,
    pub target_class: Grade,
    pub source_image_id: String,
}

/// Grad-CAM++ on one `[C, H, W]` activation block and its gradient:
/// `α = g² / (2g² + ΣA·g³)` (0 where the denominator vanishes),
/// `w_k = Σ α·relu(g)`, `L = relu(Σ_k w_k A_k)`. Returns the `H·W` map.
pub fn gradcam_pp_weights<T: Scalar>(acts: &[T], grads: &[T], channels: usize) -> Vec<T> {
    assert_eq!(acts.len(), grads.len());
    let plane = acts.len() / channels;
    let mut map = vec![T::zero(); plane];
    for k in 0..channels {
        let a = &acts[k * plane..(k + 1) * plane];
        let g = &grads[k * plane..(k + 1) * plane];
        let sum_a = a.iter().fold(T::zero(), |s, &v| s + v);
        let two = T::of(2.0);
        let mut w = T::zero();
        for &gij in g {
            let g2 = gij * gij;
            let denom = two * g2 + sum_a * g2 * gij;
            if denom != T::zero() && gij > T::zero() {
                w = w + g2 / denom * gij;
            }
        }
        if w != T::zero() {
            for (m, &av) in map.iter_mut().zip(a) {
                *m = *m + w * av;
            }
        }
    }
    for m in &mut map {
        *m = m.max(T::zero());
    }
    map
}

/// Min-max normalisation to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize<T: Scalar>(values: &mut [T]) {
    let (lo, hi) = values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        values.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = ((*v - lo) / span).max(T::zero()).min(T::one());
    }
}

/// Bilinear upsampling of a `gh×gw` map to `oh×ow`, then min-max.
pub fn upsample_heat<T: Scalar>(map: &[T], gh: usize, gw: usize, oh: usize, ow: usize) -> Raster<f32> {
    let mut up = resize_planes(map, 1, gh, gw, oh, ow);
    min_max_normalize(&mut up);
    Raster::new(oh, ow, up.iter().map(|v| v.as_f64() as f32).collect()).expect("heat map dims")
}

/// Heat maps for a batch of images. A `None` target selects the argmax
/// class. Samples do not interact in the classifier, so a single backward
/// sweep seeded with one-hot rows yields every per-image gradient.
pub fn gradcam_pp_batch<T: Scalar>(
    model: &Classifier<T>,
    images: &[&RgbImage],
    targets: &[Option<Grade>],
) -> Result<Vec<(Raster<f32>, Grade)>> {
    if images.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let batch = image_batch::<T>(images);
    model.check_input(batch.shape())?;
    let (h, w) = images[0].dims();
    let mut g = Graph::inference();
    let x = g.input(batch);
    let vars = model.forward_graph(&mut g, x);
    g.watch(vars.cam_tokens);
    let logits = g.value(vars.logits);
    let classes = logits.shape()[1];
    let predicted = argmax_rows(logits);
    let chosen: Vec<Grade> = targets
        .iter()
        .zip(&predicted)
        .map(|(t, &p)| t.unwrap_or(Grade::from_index(p)))
        .collect();
    let mut seed = Tensor::zeros(logits.shape().to_vec());
    for (i, c) in chosen.iter().enumerate() {
        seed.data_mut()[i * classes + c.index()] = T::one();
    }
    let grads = g.backward_with(vars.logits, seed);
    let acts = model.tokens_to_grid(g.value(vars.cam_tokens));
    let dacts = model.tokens_to_grid(&grads.get_or_zeros(vars.cam_tokens));
    let (d, gsz) = (model.cfg.embed_dim, model.cfg.grid());
    let per = d * gsz * gsz;
    Ok((0..images.len())
        .map(|i| {
            let span = i * per..(i + 1) * per;
            let map = gradcam_pp_weights(&acts.data()[span.clone()], &dacts.data()[span], d);
            (upsample_heat(&map, gsz, gsz, h, w), chosen[i])
        })
        .collect())
}

pub fn gradcam_pp<T: Scalar>(
    model: &Classifier<T>,
    image: &RgbImage,
    target: Option<Grade>,
    source_image_id: &str,
) -> Result<HeatMap> {
    let (values, target_class) = gradcam_pp_batch(model, &[image], &[target])?.remove(0);
    Ok(HeatMap {
        values,
        target_class,
        source_image_id: source_image_id.to_string(),
    })
}
