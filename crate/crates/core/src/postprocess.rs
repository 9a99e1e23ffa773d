//! From per-patch probabilities to labelled gland instances: stitch,
//! threshold, subtract contours, median filter, drop specks, fill holes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{label_components, Connectivity};
use crate::raster::{BinaryMask, InstanceMask, Raster};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub threshold: f32,
    pub median_radius: usize,
    pub min_object_px: usize,
    pub max_hole_px: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_radius: 2,
            min_object_px: 500,
            max_hole_px: 200,
        }
    }
}

/// Running per-pixel sum and coverage count of overlapping patches.
#[derive(Clone, Debug)]
pub struct StitchCanvas {
    sum: Raster<f64>,
    count: Raster<u32>,
}

impl StitchCanvas {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            sum: Raster::filled(height, width, 0.0),
            count: Raster::filled(height, width, 0),
        }
    }

    pub fn add(&mut self, patch: &Raster<f32>, offset: (usize, usize)) -> Result<()> {
        let (ph, pw) = patch.dims();
        let (h, w) = self.sum.dims();
        let (r0, c0) = offset;
        if r0 + ph > h || c0 + pw > w {
            return Err(Error::InvalidArgument(format!(
                "patch {ph}x{pw} at ({r0},{c0}) exceeds canvas {h}x{w}"
            )));
        }
        for r in 0..ph {
            for c in 0..pw {
                let (rr, cc) = (r0 + r, c0 + c);
                self.sum.set(rr, cc, self.sum.get(rr, cc) + patch.get(r, c) as f64);
                self.count.set(rr, cc, self.count.get(rr, cc) + 1);
            }
        }
        Ok(())
    }

    /// Mean of the covering patches; errors on any uncovered pixel.
    pub fn finish(&self) -> Result<Raster<f32>> {
        if let Some(i) = self.count.data().iter().position(|&n| n == 0) {
            let w = self.sum.width();
            return Err(Error::InvalidArgument(format!(
                "pixel ({}, {}) is not covered by any patch",
                i / w,
                i % w
            )));
        }
        self.sum.zip_map(&self.count, |s, n| (s / n as f64) as f32)
    }
}

pub fn stitch_patches(patches: &[(Raster<f32>, (usize, usize))], height: usize, width: usize) -> Result<Raster<f32>> {
    let mut canvas = StitchCanvas::new(height, width);
    for (p, off) in patches {
        canvas.add(p, *off)?;
    }
    canvas.finish()
}

/// Foreground where `value >= threshold`.
pub fn binarize(prob: &Raster<f32>, threshold: f32) -> BinaryMask {
    prob.map(|v| v >= threshold)
}

pub fn remove_contour_overlap(gland: &BinaryMask, contour: &BinaryMask) -> Result<BinaryMask> {
    gland.zip_map(contour, |g, c| g && !c)
}

/// Binary median (majority vote) over a `(2r+1)²` square with replicated
/// borders.
pub fn median_filter(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let (ph, pw) = (h + 2 * radius, w + 2 * radius);
    // summed-area table of the replicate-padded mask
    let mut sat = vec![0u32; (ph + 1) * (pw + 1)];
    for r in 0..ph {
        let sr = r.saturating_sub(radius).min(h - 1);
        let mut row = 0u32;
        for c in 0..pw {
            let sc = c.saturating_sub(radius).min(w - 1);
            row += mask.get(sr, sc) as u32;
            sat[(r + 1) * (pw + 1) + c + 1] = sat[r * (pw + 1) + c + 1] + row;
        }
    }
    let k = 2 * radius + 1;
    let half = (k * k) as u32 / 2;
    Raster::from_fn(h, w, |r, c| {
        let at = |rr: usize, cc: usize| sat[rr * (pw + 1) + cc];
        let s = at(r + k, c + k) + at(r, c) - at(r, c + k) - at(r + k, c);
        s > half
    })
}

/// Drops 8-connected foreground components smaller than `min_px`.
pub fn remove_small_objects(mask: &BinaryMask, min_px: usize) -> BinaryMask {
    let (labels, k) = label_components(mask, Connectivity::Eight);
    let mut sizes = vec![0usize; k + 1];
    for &l in labels.data() {
        sizes[l as usize] += 1;
    }
    labels.map(|l| l > 0 && sizes[l as usize] >= min_px)
}

/// Fills 4-connected background regions that do not touch the raster edge
/// and are smaller than `max_px`.
pub fn fill_holes(mask: &BinaryMask, max_px: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let background = mask.map(|b| !b);
    let (labels, k) = label_components(&background, Connectivity::Four);
    let mut sizes = vec![0usize; k + 1];
    let mut border = vec![false; k + 1];
    for r in 0..h {
        for c in 0..w {
            let l = labels.get(r, c) as usize;
            sizes[l] += 1;
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                border[l] = true;
            }
        }
    }
    labels.map(|l| l == 0 || (!border[l as usize] && sizes[l as usize] < max_px))
}

/// Median filter, speck removal, hole filling, then 8-connected labelling
/// as `1..=K`.
pub fn clean(mask: &BinaryMask, median_radius: usize, min_object_px: usize, max_hole_px: usize) -> InstanceMask {
    let m = median_filter(mask, median_radius);
    let m = remove_small_objects(&m, min_object_px);
    let m = fill_holes(&m, max_hole_px);
    InstanceMask::new(label_components(&m, Connectivity::Eight).0)
}

/// The full chain applied to stitched gland and contour probabilities.
pub fn postprocess(gland_prob: &Raster<f32>, contour_prob: &Raster<f32>, cfg: &PostprocessConfig) -> Result<InstanceMask> {
    let gland = binarize(gland_prob, cfg.threshold);
    let contour = binarize(contour_prob, cfg.threshold);
    let separated = remove_contour_overlap(&gland, &contour)?;
    Ok(clean(&separated, cfg.median_radius, cfg.min_object_px, cfg.max_hole_px))
}
