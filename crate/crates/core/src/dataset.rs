//! GlaS-layout ingestion, corner patches, rotations, contour targets and
//! boundary weight maps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::io;
use crate::morphology::{dilate, erode, squared_distance_transform};
use crate::raster::{BinaryMask, InstanceMask, Raster, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    Benign,
    Malignant,
}

impl Grade {
    pub const ALL: [Grade; 2] = [Grade::Benign, Grade::Malignant];

    /// Class index used by the classifier: benign 0, malignant 1.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Grade::Benign
        } else {
            Grade::Malignant
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::Benign => "benign",
            Grade::Malignant => "malignant",
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(Grade::Benign),
            "malignant" => Ok(Grade::Malignant),
            _ => Err(Error::UnknownGrade(s.trim().to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "testA")]
    TestA,
    #[serde(rename = "testB")]
    TestB,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestA, Split::TestB];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestA => "testA",
            Split::TestB => "testB",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}` (expected train, testA or testB)")))
    }
}

/// One histology image with its instance annotation and grade.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub image: RgbImage,
    pub annotation: InstanceMask,
    pub grade: Grade,
}

const IMAGE_EXTS: [&str; 4] = ["bmp", "png", "tif", "tiff"];

/// `train_12` → `(Train, 12)`.
fn parse_stem(stem: &str) -> Option<(Split, u32)> {
    let (prefix, num) = stem.split_once('_')?;
    let split = Split::ALL.into_iter().find(|s| s.as_str() == prefix)?;
    Some((split, num.parse().ok()?))
}

/// Reads a grade table: either `id,grade` or the original contest table
/// whose first column is the image name and whose grade column header
/// starts with `grade`.
pub fn read_grade_table(path: &Path) -> Result<HashMap<String, Grade>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format {
        what: "grade table",
        path: path.to_path_buf(),
        reason: "empty file".into(),
    })?;
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    let grade_col = cols.iter().position(|c| c.starts_with("grade")).ok_or_else(|| Error::Format {
        what: "grade table",
        path: path.to_path_buf(),
        reason: "no grade column".into(),
    })?;
    let mut out = HashMap::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (Some(id), Some(grade)) = (fields.first(), fields.get(grade_col)) else {
            return Err(Error::Format {
                what: "grade table",
                path: path.to_path_buf(),
                reason: format!("short row `{line}`"),
            });
        };
        out.insert(id.to_string(), grade.parse()?);
    }
    Ok(out)
}

fn find_grade_table(root: &Path) -> Option<PathBuf> {
    ["grades.csv", "Grade.csv", "grade.csv"]
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_file())
}

/// Loads every `<split>_<n>` image with its `<split>_<n>_anno` annotation
/// and grade, ordered by split then number.
pub fn load_glas_dataset(root: &Path) -> Result<Vec<ImageRecord>> {
    let entries = fs::read_dir(root).map_err(io_err(root))?;
    let mut images: BTreeMap<(Split, u32), PathBuf> = BTreeMap::new();
    let mut annos: HashMap<String, PathBuf> = HashMap::new();
    for entry in entries {
        let path = entry.map_err(io_err(root))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if !IMAGE_EXTS.contains(&ext.as_str()) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if let Some(base) = stem.strip_suffix("_anno") {
            annos.insert(base.to_string(), path.clone());
        } else if let Some(key) = parse_stem(stem) {
            images.insert(key, path.clone());
        }
    }
    if images.is_empty() {
        return Err(Error::NoRecords(root.to_path_buf()));
    }
    let table_path = find_grade_table(root).ok_or_else(|| Error::MissingArtifact {
        what: "grade table",
        path: root.join("grades.csv"),
        command: "synth",
    })?;
    let grades = read_grade_table(&table_path)?;
    let mut out = Vec::with_capacity(images.len());
    for ((split, n), path) in images {
        let id = format!("{}_{n}", split.as_str());
        let anno_path = annos.get(&id).ok_or_else(|| Error::MissingAnnotation(id.clone()))?;
        let grade = *grades.get(&id).ok_or_else(|| Error::MissingGrade(id.clone()))?;
        let image = io::read_rgb(&path)?;
        let annotation = io::read_labels(anno_path)?;
        image.same_dims(annotation.labels(), "image/annotation")?;
        out.push(ImageRecord {
            id,
            split,
            image,
            annotation,
            grade,
        });
    }
    Ok(out)
}

/// Top-left offsets of the four corner windows, in the order
/// top-left, top-right, bottom-left, bottom-right.
pub fn corner_offsets(height: usize, width: usize, patch: usize) -> Result<[(usize, usize); 4]> {
    if height < patch || width < patch {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} is smaller than the {patch}x{patch} patch"
        )));
    }
    let (r, c) = (height - patch, width - patch);
    Ok([(0, 0), (0, c), (r, 0), (r, c)])
}

/// Image and annotation cropped at one corner.
#[derive(Clone, Debug)]
pub struct CornerCrop {
    pub source_id: String,
    pub grade: Grade,
    pub offset: (usize, usize),
    pub image: RgbImage,
    pub annotation: InstanceMask,
}

pub fn extract_corner_patches(record: &ImageRecord, patch: usize) -> Result<Vec<CornerCrop>> {
    let (h, w) = record.image.dims();
    corner_offsets(h, w, patch)?
        .into_iter()
        .map(|(r, c)| {
            Ok(CornerCrop {
                source_id: record.id.clone(),
                grade: record.grade,
                offset: (r, c),
                image: record.image.crop(r, c, patch, patch)?,
                annotation: record.annotation.crop(r, c, patch, patch)?,
            })
        })
        .collect()
}

/// The four quarter-turn rotations `k = 0..4` of a square raster.
pub fn augment_rotations<P: Copy>(raster: &Raster<P>) -> Result<[Raster<P>; 4]> {
    let (h, w) = raster.dims();
    if h != w {
        return Err(Error::InvalidArgument(format!("rotation needs a square raster, got {h}x{w}")));
    }
    Ok([0u8, 1, 2, 3].map(|k| raster.rotate_quarter(k)))
}

/// Union over instances of `dilate(obj) AND NOT erode(obj)`.
pub fn derive_contour_mask(gland: &InstanceMask, dilate_radius: usize, erode_radius: usize) -> Result<BinaryMask> {
    if dilate_radius == 0 || erode_radius == 0 {
        return Err(Error::InvalidArgument("contour radii must be at least 1".into()));
    }
    let (h, w) = gland.dims();
    let mut out = BinaryMask::filled(h, w, false);
    for id in gland.object_ids() {
        let obj = gland.object(id);
        let ring = dilate(&obj, dilate_radius).zip_map(&erode(&obj, erode_radius), |d, e| d && !e)?;
        for (o, r) in out.data_mut().iter_mut().zip(ring.data()) {
            *o |= *r;
        }
    }
    Ok(out)
}

/// `N / (2 N_c)` per class; a class absent from the mask gets weight 1.
pub fn balanced_class_weights(gland: &BinaryMask) -> (f64, f64) {
    let n = gland.len() as f64;
    let fg = gland.count() as f64;
    let bg = n - fg;
    let w = |c: f64| if c > 0.0 { n / (2.0 * c) } else { 1.0 };
    (w(bg), w(fg))
}

/// `w(x) = w_c(x) + w0 · exp(-(d1 + d2)² / (2σ²))` with `d1`, `d2` the
/// distances to the nearest and second-nearest object. Evaluated at every
/// pixel; `d2 = ∞` with fewer than two objects.
pub fn compute_weight_map(
    gland: &InstanceMask,
    w0: f64,
    sigma: f64,
    class_weights: (f64, f64),
) -> Result<Raster<f32>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = gland.dims();
    let mut d1 = vec![f64::INFINITY; h * w];
    let mut d2 = vec![f64::INFINITY; h * w];
    for id in gland.object_ids() {
        let dist = squared_distance_transform(&gland.object(id));
        for (i, &sq) in dist.data().iter().enumerate() {
            if sq < d1[i] {
                d2[i] = d1[i];
                d1[i] = sq;
            } else if sq < d2[i] {
                d2[i] = sq;
            }
        }
    }
    let denom = 2.0 * sigma * sigma;
    let data = gland
        .labels()
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let wc = if l > 0 { class_weights.1 } else { class_weights.0 };
            let s = d1[i].sqrt() + d2[i].sqrt();
            let border = if s.is_finite() { w0 * (-(s * s) / denom).exp() } else { 0.0 };
            (wc + border) as f32
        })
        .collect();
    Raster::new(h, w, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub patch_size: usize,
    pub dilate_radius: usize,
    pub erode_radius: usize,
    pub w0: f64,
    pub sigma: f64,
    /// `[background, foreground]`; inverse-frequency balanced per image when absent.
    pub class_weights: Option<[f64; 2]>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            patch_size: 400,
            dilate_radius: 2,
            erode_radius: 2,
            w0: 10.0,
            sigma: 5.0,
            class_weights: None,
        }
    }
}

/// A corner crop with all training targets, before rotation.
#[derive(Clone, Debug)]
pub struct CornerSample {
    pub source_id: String,
    pub grade: Grade,
    pub offset: (usize, usize),
    pub image: RgbImage,
    pub gland_mask: BinaryMask,
    pub contour_mask: BinaryMask,
    pub weight_map: Raster<f32>,
}

/// One training sample: a rotated corner crop with its targets.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub image: RgbImage,
    pub gland_mask: BinaryMask,
    pub contour_mask: BinaryMask,
    pub weight_map: Raster<f32>,
    pub grade: Grade,
    pub source_id: String,
    pub offset: (usize, usize),
    pub rotation: u8,
}

impl CornerSample {
    pub fn rotated(&self, k: u8) -> PatchSample {
        PatchSample {
            image: self.image.rotate_quarter(k),
            gland_mask: self.gland_mask.rotate_quarter(k),
            contour_mask: self.contour_mask.rotate_quarter(k),
            weight_map: self.weight_map.rotate_quarter(k),
            grade: self.grade,
            source_id: self.source_id.clone(),
            offset: self.offset,
            rotation: k % 4,
        }
    }
}

/// Contours and weight maps are derived on the whole image, then cropped, so
/// objects cut by a crop edge keep their true boundary distances.
pub fn corner_samples(record: &ImageRecord, cfg: &DatasetConfig) -> Result<Vec<CornerSample>> {
    let contour = derive_contour_mask(&record.annotation, cfg.dilate_radius, cfg.erode_radius)?;
    let gland = record.annotation.foreground();
    let cw = match cfg.class_weights {
        Some([bg, fg]) => (bg, fg),
        None => balanced_class_weights(&gland),
    };
    let weight = compute_weight_map(&record.annotation, cfg.w0, cfg.sigma, cw)?;
    let p = cfg.patch_size;
    let (h, w) = record.image.dims();
    corner_offsets(h, w, p)?
        .into_iter()
        .map(|(r, c)| {
            Ok(CornerSample {
                source_id: record.id.clone(),
                grade: record.grade,
                offset: (r, c),
                image: record.image.crop(r, c, p, p)?,
                gland_mask: gland.crop(r, c, p, p)?,
                contour_mask: contour.crop(r, c, p, p)?,
                weight_map: weight.crop(r, c, p, p)?,
            })
        })
        .collect()
}

/// One manifest line: a patch identified by source, corner and rotation,
/// with raster paths relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patch_id: String,
    pub source_id: String,
    pub split: Split,
    pub grade: Grade,
    pub offset: (usize, usize),
    pub rotation: u8,
    pub image: String,
    pub gland: String,
    pub contour: String,
    pub weight: String,
}

pub const MANIFEST_HEADER: &str = "patch_id,source_id,split,grade,row,col,rotation,image,gland,contour,weight";

impl ManifestEntry {
    pub fn corner_key(&self) -> String {
        format!("{}_r{}_c{}", self.source_id, self.offset.0, self.offset.1)
    }

    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.patch_id,
            self.source_id,
            self.split,
            self.grade,
            self.offset.0,
            self.offset.1,
            self.rotation,
            self.image,
            self.gland,
            self.contour,
            self.weight
        )
    }

    fn parse(line: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "patch manifest",
            path: path.to_path_buf(),
            reason,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad(format!("expected 11 fields in `{line}`")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}`")));
        Ok(Self {
            patch_id: f[0].into(),
            source_id: f[1].into(),
            split: f[2].parse()?,
            grade: f[3].parse()?,
            offset: (num(f[4])?, num(f[5])?),
            rotation: num(f[6])? as u8,
            image: f[7].into(),
            gland: f[8].into(),
            contour: f[9].into(),
            weight: f[10].into(),
        })
    }
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format {
            what: "patch manifest",
            path: path.to_path_buf(),
            reason: "unexpected header".into(),
        });
    }
    lines.filter(|l| !l.is_empty()).map(|l| ManifestEntry::parse(l, path)).collect()
}

/// Writes the rasters of every corner sample of `record` under `dir` and
/// returns one manifest entry per rotation. Rasters are stored unrotated;
/// [`load_patch`] applies the rotation.
pub fn write_record_patches(record: &ImageRecord, cfg: &DatasetConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(16);
    for s in corner_samples(record, cfg)? {
        let key = format!("{}_r{}_c{}", s.source_id, s.offset.0, s.offset.1);
        let names = [
            format!("{key}_image.png"),
            format!("{key}_gland.png"),
            format!("{key}_contour.png"),
            format!("{key}_weight.npy"),
        ];
        io::write_rgb(&s.image, &dir.join(&names[0]))?;
        io::write_mask(&s.gland_mask, &dir.join(&names[1]))?;
        io::write_mask(&s.contour_mask, &dir.join(&names[2]))?;
        io::write_npy_f32(&s.weight_map, &dir.join(&names[3]))?;
        for k in 0..4u8 {
            entries.push(ManifestEntry {
                patch_id: format!("{key}_k{k}"),
                source_id: s.source_id.clone(),
                split: record.split,
                grade: s.grade,
                offset: s.offset,
                rotation: k,
                image: names[0].clone(),
                gland: names[1].clone(),
                contour: names[2].clone(),
                weight: names[3].clone(),
            });
        }
    }
    Ok(entries)
}

pub fn load_corner(dir: &Path, entry: &ManifestEntry) -> Result<CornerSample> {
    Ok(CornerSample {
        source_id: entry.source_id.clone(),
        grade: entry.grade,
        offset: entry.offset,
        image: io::read_rgb(&dir.join(&entry.image))?,
        gland_mask: io::read_mask(&dir.join(&entry.gland))?,
        contour_mask: io::read_mask(&dir.join(&entry.contour))?,
        weight_map: io::read_npy_f32(&dir.join(&entry.weight))?,
    })
}

pub fn load_patch(dir: &Path, entry: &ManifestEntry) -> Result<PatchSample> {
    Ok(load_corner(dir, entry)?.rotated(entry.rotation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(h: usize, w: usize, f: impl Fn(usize, usize) -> u32) -> InstanceMask {
        InstanceMask::new(Raster::from_fn(h, w, f))
    }

    /// Direct definition: a pixel is in `dilate(obj, r)` iff some object
    /// pixel lies within distance r; in `erode(obj, r)` iff every in-bounds
    /// or out-of-bounds pixel within r is an object pixel.
    fn brute_contour(m: &InstanceMask, rd: usize, re: usize) -> BinaryMask {
        let (h, w) = m.dims();
        let within = |r: usize, c: usize, rr: isize, cc: isize, rad: usize| {
            let (dr, dc) = (rr - r as isize, cc - c as isize);
            dr * dr + dc * dc <= (rad * rad) as isize
        };
        Raster::from_fn(h, w, |r, c| {
            m.object_ids().into_iter().any(|id| {
                let mut dil = false;
                let mut ero = true;
                let span = rd.max(re) as isize;
                for rr in r as isize - span..=r as isize + span {
                    for cc in c as isize - span..=c as isize + span {
                        let inside = rr >= 0
                            && cc >= 0
                            && (rr as usize) < h
                            && (cc as usize) < w
                            && m.labels().get(rr as usize, cc as usize) == id;
                        if inside && within(r, c, rr, cc, rd) {
                            dil = true;
                        }
                        if !inside && within(r, c, rr, cc, re) {
                            ero = false;
                        }
                    }
                }
                dil && !ero
            })
        })
    }

    fn brute_weight(m: &InstanceMask, w0: f64, sigma: f64, cw: (f64, f64)) -> Raster<f64> {
        let (h, w) = m.dims();
        let ids = m.object_ids();
        Raster::from_fn(h, w, |r, c| {
            let mut ds: Vec<f64> = ids
                .iter()
                .map(|&id| {
                    let mut best = f64::INFINITY;
                    for rr in 0..h {
                        for cc in 0..w {
                            if m.labels().get(rr, cc) == id {
                                let d = ((rr as f64 - r as f64).powi(2) + (cc as f64 - c as f64).powi(2)).sqrt();
                                best = best.min(d);
                            }
                        }
                    }
                    best
                })
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let wc = if m.labels().get(r, c) > 0 { cw.1 } else { cw.0 };
            if ds.len() < 2 {
                wc
            } else {
                wc + w0 * (-(ds[0] + ds[1]).powi(2) / (2.0 * sigma * sigma)).exp()
            }
        })
    }

    #[test]
    fn corner_offsets_match_examples() {
        assert_eq!(
            corner_offsets(522, 775, 400).unwrap(),
            [(0, 0), (0, 375), (122, 0), (122, 375)]
        );
        assert_eq!(corner_offsets(400, 400, 400).unwrap(), [(0, 0); 4]);
        let o = corner_offsets(401, 400, 400).unwrap();
        let rows: std::collections::BTreeSet<_> = o.iter().map(|p| p.0).collect();
        let cols: std::collections::BTreeSet<_> = o.iter().map(|p| p.1).collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(cols.into_iter().collect::<Vec<_>>(), vec![0]);
        assert!(corner_offsets(399, 500, 400).is_err());
    }

    #[test]
    fn rotation_of_l_shape_maps_cells() {
        let n = 5;
        let cells = [(1, 1), (2, 1), (2, 2)];
        let m = Raster::from_fn(n, n, |r, c| cells.contains(&(r, c)));
        let rots = augment_rotations(&m).unwrap();
        assert_eq!(rots[0], m);
        for r in 0..n {
            for c in 0..n {
                assert_eq!(rots[1].get(c, n - 1 - r), m.get(r, c));
            }
        }
        assert_eq!(augment_rotations(&rots[2]).unwrap()[2], m);
        assert!(augment_rotations(&Raster::filled(2, 3, false)).is_err());
    }

    #[test]
    fn contour_of_empty_mask_is_empty() {
        let m = InstanceMask::empty(8, 8);
        assert!(!derive_contour_mask(&m, 1, 1).unwrap().any());
    }

    #[test]
    fn contour_of_square_is_width_two_ring() {
        let m = labels(15, 15, |r, c| ((3..12).contains(&r) && (3..12).contains(&c)) as u32);
        let got = derive_contour_mask(&m, 1, 1).unwrap();
        assert_eq!(got, brute_contour(&m, 1, 1));
        // interior of the eroded square and the far background stay clear
        assert!(!got.get(7, 7) && !got.get(0, 0));
        assert!(got.get(3, 7) && got.get(2, 7) && got.get(3, 3));
        assert!(!got.get(4, 4));
        assert!(!got.get(4, 5) && !got.get(1, 7));
    }

    #[test]
    fn nearby_objects_get_disjoint_rings() {
        let m = labels(9, 15, |r, c| {
            if !(2..7).contains(&r) {
                0
            } else if (1..5).contains(&c) {
                1
            } else if (8..12).contains(&c) {
                2
            } else {
                0
            }
        });
        let got = derive_contour_mask(&m, 1, 1).unwrap();
        assert_eq!(got, brute_contour(&m, 1, 1));
        let (_, k) = crate::morphology::label_components(&got, crate::morphology::Connectivity::Eight);
        assert_eq!(k, 2);
    }

    #[test]
    fn weight_map_matches_two_nearest_object_scan() {
        let m = labels(20, 20, |r, c| {
            if (4..7).contains(&r) && (4..7).contains(&c) {
                1
            } else if (10..13).contains(&r) && (12..15).contains(&c) {
                2
            } else {
                0
            }
        });
        let cw = balanced_class_weights(&m.foreground());
        let got = compute_weight_map(&m, 10.0, 5.0, cw).unwrap();
        let want = brute_weight(&m, 10.0, 5.0, cw);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((*g as f64 - w).abs() < 1e-4 * w.max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn weight_map_touching_pixel_and_far_limit() {
        // Pixel (0,1) touches both single-pixel objects: d1 = d2 = 1. A pixel
        // inside object 1 has d1 = 0 and d2 = 2.
        let m = labels(1, 3, |_, c| [1, 0, 2][c]);
        let got = compute_weight_map(&m, 10.0, 5.0, (1.0, 1.0)).unwrap();
        let expect = 1.0 + 10.0 * (-(2.0f64).powi(2) / 50.0).exp();
        assert!((got.get(0, 1) as f64 - expect).abs() < 1e-5);
        assert!((got.get(0, 0) as f64 - expect).abs() < 1e-5);

        let far = labels(1, 200, |_, c| (c == 0) as u32 + 2 * (c == 199) as u32);
        let w = compute_weight_map(&far, 10.0, 5.0, (0.5, 2.0)).unwrap();
        assert!((w.get(0, 100) - 0.5).abs() < 1e-6);
        let single = labels(4, 4, |r, _| (r == 0) as u32);
        let w = compute_weight_map(&single, 10.0, 5.0, (0.5, 2.0)).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.5 || v == 2.0));
        assert!(compute_weight_map(&single, 10.0, 0.0, (1.0, 1.0)).is_err());
    }

    #[test]
    fn grade_and_split_parsing() {
        assert_eq!(" Malignant ".parse::<Grade>().unwrap(), Grade::Malignant);
        assert!(matches!("adenoma".parse::<Grade>(), Err(Error::UnknownGrade(_))));
        assert_eq!("testA".parse::<Split>().unwrap(), Split::TestA);
    }

    #[test]
    fn original_grade_table_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("Grade.csv");
        fs::write(
            &p,
            "name,Patient ID,grade (GlaS),grade (Sirinukunwattana et al. 2015)\n\
             testA_1,4, benign, adenomatous\ntrain_2,1, malignant, moderately differentiated\n",
        )
        .unwrap();
        let t = read_grade_table(&p).unwrap();
        assert_eq!(t["testA_1"], Grade::Benign);
        assert_eq!(t["train_2"], Grade::Malignant);
    }

    proptest! {
        #[test]
        fn weight_map_ignores_label_permutation(
            bits in proptest::collection::vec(0u32..4, 144), perm_seed in 0usize..6
        ) {
            let perms = [[1, 2, 3], [1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];
            let p = perms[perm_seed];
            let m = labels(12, 12, |r, c| bits[r * 12 + c]);
            let q = labels(12, 12, |r, c| match bits[r * 12 + c] { 0 => 0, l => p[l as usize - 1] });
            let a = compute_weight_map(&m, 10.0, 5.0, (1.0, 2.0)).unwrap();
            let b = compute_weight_map(&q, 10.0, 5.0, (1.0, 2.0)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn contour_never_covers_eroded_gland(
            bits in proptest::collection::vec(0u32..3, 196), rd in 1usize..3, re in 1usize..3
        ) {
            let m = labels(14, 14, |r, c| bits[r * 14 + c]);
            let got = derive_contour_mask(&m, rd, re).unwrap();
            prop_assert_eq!(&got, &brute_contour(&m, rd, re));
            for id in m.object_ids() {
                let e = erode(&m.object(id), re);
                for (i, &inside) in e.data().iter().enumerate() {
                    // an eroded pixel of one object may still lie in another object's ring
                    if inside {
                        let others = m.object_ids().into_iter().filter(|&o| o != id).any(|o| {
                            let ring = dilate(&m.object(o), rd);
                            ring.data()[i]
                        });
                        prop_assert!(others || !got.data()[i]);
                    }
                }
            }
        }

        #[test]
        fn patch_alignment_recovers_source(rot in 0u8..4, corner in 0usize..4) {
            let rec = ImageRecord {
                id: "train_1".into(),
                split: Split::Train,
                image: Raster::from_fn(13, 17, |r, c| [r as u8, c as u8, 0]),
                annotation: labels(13, 17, |r, c| ((r * 7 + c * 3) % 5) as u32),
                grade: Grade::Benign,
            };
            let crops = extract_corner_patches(&rec, 10).unwrap();
            let crop = &crops[corner];
            let rotated = crop.annotation.rotate_quarter(rot);
            let back = rotated.rotate_quarter((4 - rot) % 4);
            let (r0, c0) = crop.offset;
            prop_assert_eq!(back.labels(), &rec.annotation.labels().crop(r0, c0, 10, 10).unwrap());
            let img_back = crop.image.rotate_quarter(rot).rotate_quarter((4 - rot) % 4);
            prop_assert_eq!(img_back, rec.image.crop(r0, c0, 10, 10).unwrap());
        }
    }
}
