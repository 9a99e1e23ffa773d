//! Parametric stand-in for GlaS: elliptical glands on pink stroma, with a
//! smooth light texture for benign images and dark speckle for malignant ones.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Grade, ImageRecord, Split};
use crate::error::{io_err, Error, Result};
use crate::io;
use crate::raster::{InstanceMask, Raster, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub train_images: usize,
    /// Written as the `testA` split.
    pub test_images: usize,
    pub height: usize,
    pub width: usize,
    pub glands_min: usize,
    pub glands_max: usize,
    /// Semi-axis range in pixels.
    pub axis_min: f64,
    pub axis_max: f64,
    /// Minimum background gap between glands.
    pub min_gap: f64,
    /// Placement attempts per gland before giving up.
    pub max_attempts: usize,
    pub benign: Texture,
    pub malignant: Texture,
    pub seed: u64,
}

/// Gland appearance for one grade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub base: [f64; 3],
    /// Amplitude of the smooth blob field.
    pub blob_amplitude: f64,
    /// Cell size of the blob field in pixels.
    pub blob_scale: f64,
    /// Amplitude of independent per-pixel noise.
    pub speckle: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_images: 40,
            test_images: 10,
            height: 500,
            width: 500,
            glands_min: 2,
            glands_max: 5,
            axis_min: 28.0,
            axis_max: 60.0,
            min_gap: 6.0,
            max_attempts: 500,
            benign: Texture {
                base: [196.0, 150.0, 206.0],
                blob_amplitude: 22.0,
                blob_scale: 24.0,
                speckle: 4.0,
            },
            malignant: Texture {
                base: [120.0, 62.0, 142.0],
                blob_amplitude: 4.0,
                blob_scale: 24.0,
                speckle: 45.0,
            },
            seed: 7,
        }
    }
}

const STROMA: [f64; 3] = [236.0, 190.0, 212.0];
const RIM: [f64; 3] = [92.0, 40.0, 120.0];
const RIM_WIDTH: f64 = 3.0;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Implicit value `<= 1` inside, after growing both axes by `grow`.
    fn level(&self, r: f64, c: f64, grow: f64) -> f64 {
        let (s, co) = self.theta.sin_cos();
        let (dy, dx) = (r - self.cy, c - self.cx);
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        (u / (self.a + grow)).powi(2) + (v / (self.b + grow)).powi(2)
    }

    /// Approximate distance inward from the boundary for inside pixels.
    fn depth(&self, r: f64, c: f64) -> f64 {
        let l = self.level(r, c, 0.0).sqrt();
        (1.0 - l) * self.a.min(self.b)
    }

    fn bbox(&self, grow: f64, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let ext = self.a.max(self.b) + grow + 1.0;
        let r0 = (self.cy - ext).floor().max(0.0) as usize;
        let c0 = (self.cx - ext).floor().max(0.0) as usize;
        let r1 = ((self.cy + ext).ceil() as usize).min(h - 1);
        let c1 = ((self.cx + ext).ceil() as usize).min(w - 1);
        (r0, c0, r1, c1)
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.glands_min > self.glands_max {
            return bad("glands_min exceeds glands_max");
        }
        if !(self.axis_min > 0.0 && self.axis_min <= self.axis_max) {
            return bad("axis range must satisfy 0 < axis_min <= axis_max");
        }
        if 2.0 * self.axis_max + 2.0 >= self.height.min(self.width) as f64 {
            return bad("glands do not fit on the canvas");
        }
        if self.min_gap < 0.0 {
            return bad("min_gap must be non-negative");
        }
        Ok(())
    }

    fn texture(&self, grade: Grade) -> &Texture {
        match grade {
            Grade::Benign => &self.benign,
            Grade::Malignant => &self.malignant,
        }
    }

    /// `(split, index, grade)` for every image; grades alternate so both
    /// classes are balanced in each split.
    pub fn plan(&self) -> Vec<(Split, usize, Grade)> {
        let mut out = Vec::new();
        for (split, n) in [(Split::Train, self.train_images), (Split::TestA, self.test_images)] {
            for i in 1..=n {
                out.push((split, i, Grade::from_index((i + 1) % 2)));
            }
        }
        out
    }
}

/// Smooth random field in `[-1, 1]`: bilinear interpolation of uniform
/// values on a coarse lattice.
fn value_noise(h: usize, w: usize, cell: f64, rng: &mut impl Rng) -> Raster<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Raster::from_fn(h, w, |r, c| {
        let (y, x) = (r as f64 / cell, c as f64 / cell);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        // smoothstep keeps the field free of lattice creases
        let (fy, fx) = (fy * fy * (3.0 - 2.0 * fy), fx * fx * (3.0 - 2.0 * fx));
        let at = |i: usize, j: usize| lattice[i * gw + j];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn place_glands(spec: &SynthSpec, id: &str, rng: &mut impl Rng) -> Result<(InstanceMask, Vec<Ellipse>)> {
    let (h, w) = (spec.height, spec.width);
    let count = rng.gen_range(spec.glands_min..=spec.glands_max);
    let mut labels = Raster::filled(h, w, 0u32);
    let mut placed = Vec::with_capacity(count);
    for k in 0..count {
        let mut attempts = 0;
        let e = loop {
            if attempts == spec.max_attempts {
                return Err(Error::InfeasiblePacking {
                    image: id.to_string(),
                    requested: count,
                    attempts,
                });
            }
            attempts += 1;
            let a = rng.gen_range(spec.axis_min..=spec.axis_max);
            let b = rng.gen_range(spec.axis_min..=spec.axis_max);
            let ext = a.max(b) + 1.0;
            let e = Ellipse {
                cy: rng.gen_range(ext..h as f64 - ext),
                cx: rng.gen_range(ext..w as f64 - ext),
                a,
                b,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            };
            let (r0, c0, r1, c1) = e.bbox(spec.min_gap, h, w);
            let clash = (r0..=r1).any(|r| {
                (c0..=c1).any(|c| labels.get(r, c) != 0 && e.level(r as f64, c as f64, spec.min_gap) <= 1.0)
            });
            if !clash {
                break e;
            }
        };
        let (r0, c0, r1, c1) = e.bbox(0.0, h, w);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if e.level(r as f64, c as f64, 0.0) <= 1.0 {
                    labels.set(r, c, k as u32 + 1);
                }
            }
        }
        placed.push(e);
    }
    Ok((InstanceMask::new(labels), placed))
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Builds one synthetic record. The RNG stream is derived from the spec seed
/// and the image position so images are independent of generation order.
pub fn generate_record(spec: &SynthSpec, split: Split, index: usize, grade: Grade) -> Result<ImageRecord> {
    spec.validate()?;
    let id = format!("{}_{index}", split.as_str());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((split as u64) << 32) | index as u64);
    let (h, w) = (spec.height, spec.width);
    let (annotation, ellipses) = place_glands(spec, &id, &mut rng)?;
    let tex = spec.texture(grade);
    let stroma_field = value_noise(h, w, 40.0, &mut rng);
    let blob = value_noise(h, w, tex.blob_scale, &mut rng);
    let mut image = RgbImage::filled(h, w, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            let label = annotation.labels().get(r, c);
            let px = if label == 0 {
                let s = 10.0 * stroma_field.get(r, c) + rng.gen_range(-6.0..6.0);
                STROMA.map(|ch| clamp_u8(ch + s))
            } else {
                let e = &ellipses[label as usize - 1];
                if e.depth(r as f64, c as f64) < RIM_WIDTH {
                    let n = rng.gen_range(-10.0..10.0);
                    RIM.map(|ch| clamp_u8(ch + n))
                } else {
                    let smooth = tex.blob_amplitude * blob.get(r, c);
                    let speck = rng.gen_range(-tex.speckle..=tex.speckle);
                    tex.base.map(|ch| clamp_u8(ch + smooth + speck))
                }
            };
            image.set(r, c, px);
        }
    }
    Ok(ImageRecord {
        id,
        split,
        image,
        annotation,
        grade,
    })
}

/// Writes a GlaS-layout directory: `<split>_<n>.png`, `<split>_<n>_anno.png`
/// (16-bit labels) and `grades.csv`.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<Vec<(String, Grade)>> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut table = String::from("id,grade\n");
    let mut out = Vec::new();
    for (split, index, grade) in spec.plan() {
        let rec = generate_record(spec, split, index, grade)?;
        io::write_rgb(&rec.image, &root.join(format!("{}.png", rec.id)))?;
        io::write_labels(&rec.annotation, &root.join(format!("{}_anno.png", rec.id)))?;
        table.push_str(&format!("{},{}\n", rec.id, grade));
        out.push((rec.id, grade));
    }
    let path = root.join("grades.csv");
    fs::write(&path, table).map_err(io_err(&path))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_images: 3,
            test_images: 1,
            height: 160,
            width: 180,
            axis_min: 12.0,
            axis_max: 20.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn glands_do_not_overlap_and_stay_inside() {
        let spec = small();
        for i in 1..=4 {
            let rec = generate_record(&spec, Split::Train, i, Grade::Benign).unwrap();
            let n = rec.annotation.num_objects();
            assert!((spec.glands_min..=spec.glands_max).contains(&n));
            let (h, w) = rec.annotation.dims();
            let ids = rec.annotation.object_ids();
            for &id in &ids {
                let obj = rec.annotation.object(id);
                let (_, k) = crate::morphology::label_components(&obj, crate::morphology::Connectivity::Four);
                assert_eq!(k, 1);
                for r in 0..h {
                    assert!(!obj.get(r, 0) && !obj.get(r, w - 1));
                }
                let grown = crate::morphology::dilate(&obj, spec.min_gap as usize - 1);
                for &other in ids.iter().filter(|&&o| o != id) {
                    let o = rec.annotation.object(other);
                    assert!(grown.data().iter().zip(o.data()).all(|(a, b)| !(*a && *b)));
                }
            }
        }
    }

    #[test]
    fn zero_glands_gives_background_only() {
        let spec = SynthSpec {
            glands_min: 0,
            glands_max: 0,
            ..small()
        };
        let rec = generate_record(&spec, Split::TestA, 1, Grade::Malignant).unwrap();
        assert_eq!(rec.annotation.num_objects(), 0);
    }

    #[test]
    fn infeasible_packing_errors() {
        let spec = SynthSpec {
            glands_min: 40,
            glands_max: 40,
            max_attempts: 50,
            ..small()
        };
        let err = generate_record(&spec, Split::Train, 1, Grade::Benign).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePacking { requested: 40, .. }));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        for name in ["train_1.png", "train_2_anno.png", "testA_1.png", "grades.csv"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn grades_alternate() {
        let plan = small().plan();
        assert_eq!(plan.len(), 4);
        assert_eq!(plan[0].2, Grade::Benign);
        assert_eq!(plan[1].2, Grade::Malignant);
    }
}
