//! Weight manifests: a JSON index of named tensors plus one flat
//! little-endian binary blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gradeprompt_autograd::kernels::resize_planes;
use gradeprompt_autograd::{Module, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn of<T: Scalar>() -> Self {
        if std::mem::size_of::<T>() == 8 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    /// Training stage that produced the weights, if any.
    pub stage: Option<String>,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub entries: Vec<TensorEntry>,
}

/// Named tensors read from a manifest, kept in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet {
    pub stage: Option<String>,
    pub tensors: BTreeMap<String, Tensor<f64>>,
}

impl WeightSet {
    pub fn from_module<T: Scalar>(module: &impl Module<T>) -> Self {
        let mut tensors = BTreeMap::new();
        module.visit(&mut |p| {
            tensors.insert(p.name().to_string(), p.value().cast());
        });
        Self { stage: None, tensors }
    }

    /// Renames every tensor under `from.` to `to.`; others are kept.
    pub fn remap_prefix(&self, from: &str, to: &str) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| match strip_group(k, from) {
                Some(rest) => (format!("{to}.{rest}"), v.clone()),
                None => (k.clone(), v.clone()),
            })
            .collect();
        Self {
            stage: self.stage.clone(),
            tensors,
        }
    }

    /// Adds copies of everything under `from.` as `to.`, replacing any
    /// existing `to.` entries.
    pub fn duplicate_prefix(&mut self, from: &str, to: &str) {
        self.tensors.retain(|k, _| strip_group(k, to).is_none());
        let copies: Vec<(String, Tensor<f64>)> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| strip_group(k, from).map(|rest| (format!("{to}.{rest}"), v.clone())))
            .collect();
        self.tensors.extend(copies);
    }

    /// Keeps only tensors under one of `prefixes`.
    pub fn retain_groups(&mut self, prefixes: &[&str]) {
        self.tensors.retain(|k, _| prefixes.iter().any(|p| strip_group(k, p).is_some()));
    }

    /// Splits fused `attn.qkv` projections and renames `attn.proj` to
    /// `attn.out`, the layout used by common ViT checkpoints.
    pub fn split_fused_qkv(&self) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (k, v) in &self.tensors {
            if let Some(stem) = k.strip_suffix(".qkv.weight").or_else(|| k.strip_suffix(".qkv.bias")) {
                let is_weight = k.ends_with("weight");
                let rows = v.shape()[0];
                if rows % 3 != 0 {
                    return Err(Error::InvalidArgument(format!("{k}: fused rows {rows} not divisible by 3")));
                }
                let part = v.numel() / 3;
                for (i, tag) in ["q", "k", "v"].iter().enumerate() {
                    let mut shape = v.shape().to_vec();
                    shape[0] = rows / 3;
                    let data = v.data()[i * part..(i + 1) * part].to_vec();
                    let suffix = if is_weight { "weight" } else { "bias" };
                    tensors.insert(format!("{stem}.{tag}.{suffix}"), Tensor::new(shape, data)?);
                }
            } else if k.contains(".attn.proj.") {
                tensors.insert(k.replace(".attn.proj.", ".attn.out."), v.clone());
            } else {
                tensors.insert(k.clone(), v.clone());
            }
        }
        Ok(Self {
            stage: self.stage.clone(),
            tensors,
        })
    }
}

fn strip_group<'a>(name: &'a str, prefix: &str) -> Option<&'a str> {
    name.strip_prefix(prefix)?.strip_prefix('.')
}

/// Blob path beside a manifest: `x.json` → `x.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_weights<T: Scalar>(module: &impl Module<T>, manifest_path: &Path, stage: Option<&str>) -> Result<()> {
    let dtype = DType::of::<T>();
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    module.visit(&mut |p| {
        let offset = blob.len();
        for v in p.value().data() {
            match dtype {
                DType::F32 => blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => blob.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        entries.push(TensorEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            dtype,
            offset,
            length: blob.len() - offset,
        });
    });
    let blob_file = blob_path(manifest_path);
    let manifest = WeightManifest {
        stage: stage.map(str::to_string),
        blob: blob_file.file_name().expect("blob name").to_string_lossy().into_owned(),
        entries,
    };
    if let Some(dir) = manifest_path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&blob_file, &blob).map_err(io_err(&blob_file))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(manifest_path, json).map_err(io_err(manifest_path))
}

pub fn read_manifest(path: &Path) -> Result<WeightManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "weight manifest",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_weights(path: &Path) -> Result<WeightSet> {
    let manifest = read_manifest(path)?;
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(io_err(&blob_file))?;
    let bad = |reason: String| Error::Format {
        what: "weight blob",
        path: blob_file.clone(),
        reason,
    };
    let mut tensors = BTreeMap::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        if e.length != n * e.dtype.width() {
            return Err(bad(format!("{}: length {} does not match shape {:?}", e.name, e.length, e.shape)));
        }
        let bytes = blob
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| bad(format!("{}: range beyond blob end", e.name)))?;
        let data: Vec<f64> = match e.dtype {
            DType::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        };
        if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(bad(format!("duplicate entry {}", e.name)));
        }
    }
    Ok(WeightSet {
        stage: manifest.stage,
        tensors,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    /// Every model tensor present with the right shape, nothing extra.
    #[default]
    Strict,
    /// Load what matches, report the rest.
    Permissive,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model tensors absent from the manifest (left as initialised).
    pub missing: Vec<String>,
    /// Manifest tensors with no model counterpart.
    pub unexpected: Vec<String>,
    /// `(name, model shape, manifest shape)`.
    pub mismatched: Vec<(String, Vec<usize>, Vec<usize>)>,
    /// Position tables resampled to the model grid (also in `loaded`).
    pub interpolated: Vec<String>,
}

impl LoadReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.mismatched.is_empty()
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self.missing.iter().map(|n| format!("missing {n}")).collect();
        out.extend(self.unexpected.iter().map(|n| format!("unexpected {n}")));
        out.extend(
            self.mismatched
                .iter()
                .map(|(n, want, got)| format!("shape of {n}: model {want:?}, manifest {got:?}")),
        );
        out
    }
}

/// Resamples a `[1, P + s², D]` position table (P leading tokens such as a
/// class token) to `[1, P + t², D]`. `None` when the shapes do not fit that
/// pattern.
pub fn interpolate_positions(src: &Tensor<f64>, target: &[usize]) -> Option<Tensor<f64>> {
    let s = src.shape();
    if s.len() != 3 || target.len() != 3 || s[0] != 1 || target[0] != 1 || s[2] != target[2] {
        return None;
    }
    let d = s[2];
    let split = |l: usize| {
        (0..=1).find_map(|p: usize| {
            let g = ((l.checked_sub(p)?) as f64).sqrt().round() as usize;
            (g * g + p == l && g > 0).then_some((p, g))
        })
    };
    let (ps, gs) = split(s[1])?;
    let (pt, gt) = split(target[1])?;
    if ps != pt {
        return None;
    }
    // channels-first planes for the resize kernel
    let mut planes = vec![0.0; d * gs * gs];
    for t in 0..gs * gs {
        for c in 0..d {
            planes[c * gs * gs + t] = src.data()[(ps + t) * d + c];
        }
    }
    let up = resize_planes(&planes, d, gs, gs, gt, gt);
    let mut out = src.data()[..ps * d].to_vec();
    out.resize((pt + gt * gt) * d, 0.0);
    for t in 0..gt * gt {
        for c in 0..d {
            out[(pt + t) * d + c] = up[c * gt * gt + t];
        }
    }
    Tensor::new(target.to_vec(), out).ok()
}

/// Copies matching tensors into `module`. Position tables (`*pos_embed`)
/// of a different grid are resampled. In strict mode any missing,
/// unexpected or mismatched tensor fails the load before anything is
/// written.
pub fn load_into<T: Scalar>(module: &mut impl Module<T>, weights: &WeightSet, mode: LoadMode) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut plan: Vec<(String, Tensor<T>)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    module.visit(&mut |p| {
        let name = p.name().to_string();
        seen.insert(name.clone());
        let want = p.value().shape();
        match weights.tensors.get(&name) {
            None => report.missing.push(name),
            Some(t) if t.shape() == want => plan.push((name, t.cast())),
            Some(t) => match name.ends_with("pos_embed").then(|| interpolate_positions(t, want)).flatten() {
                Some(resampled) => {
                    report.interpolated.push(name.clone());
                    plan.push((name, resampled.cast()));
                }
                None => report.mismatched.push((name, want.to_vec(), t.shape().to_vec())),
            },
        }
    });
    report.unexpected = weights.tensors.keys().filter(|k| !seen.contains(*k)).cloned().collect();
    if mode == LoadMode::Strict && !report.is_complete() {
        return Err(Error::WeightMismatch(report.problems()));
    }
    let mut values: BTreeMap<String, Tensor<T>> = plan.into_iter().collect();
    module.visit_mut(&mut |p| {
        if let Some(v) = values.remove(p.name()) {
            p.assign(v).expect("shape checked");
            report.loaded.push(p.name().to_string());
        }
    });
    Ok(report)
}

pub fn load_weights<T: Scalar>(module: &mut impl Module<T>, path: &Path, mode: LoadMode) -> Result<LoadReport> {
    load_into(module, &read_weights(path)?, mode)
}

/// Order-independent digest of every tensor whose name starts with `prefix`.
pub fn checksum<T: Scalar>(module: &impl Module<T>, prefix: &str) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut parts: Vec<(String, Vec<u64>)> = Vec::new();
    module.visit(&mut |p| {
        if p.name().starts_with(prefix) {
            parts.push((p.name().to_string(), p.value().data().iter().map(|v| v.as_f64().to_bits()).collect()));
        }
    });
    parts.sort();
    let mut h = std::collections::hash_map::DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{Segmenter, GROUP_CONTOUR_DECODER, GROUP_CONTOUR_PROMPT, GROUP_GLAND_DECODER, GROUP_GLAND_PROMPT};
    use crate::segmenter::tests::tiny_cfg;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(seed: u64) -> Segmenter<f32> {
        Segmenter::new(tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_loads_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let a = seg(1);
        save_weights(&a, &path, Some("gland")).unwrap();
        let set = read_weights(&path).unwrap();
        assert_eq!(set.stage.as_deref(), Some("gland"));
        let mut b = seg(2);
        let report = load_into(&mut b, &set, LoadMode::Strict).unwrap();
        assert!(report.is_complete());
        let mut count = 0;
        a.visit(&mut |_| count += 1);
        assert_eq!(report.loaded.len(), count);
        assert_eq!(a.named_tensors(), b.named_tensors());
    }

    #[test]
    fn f64_models_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let a = Segmenter::<f64>::new(tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        save_weights(&a, &path, None).unwrap();
        let mut b = Segmenter::<f64>::new(tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        load_weights(&mut b, &path, LoadMode::Strict).unwrap();
        assert_eq!(checksum(&a, ""), checksum(&b, ""));
    }

    #[test]
    fn missing_decoder_permissive_reports_it() {
        let mut set = WeightSet::from_module(&seg(5));
        set.tensors.retain(|k, _| !k.starts_with(GROUP_GLAND_DECODER));
        let mut b = seg(6);
        let before = checksum(&b, GROUP_GLAND_DECODER);
        assert!(matches!(load_into(&mut b, &set, LoadMode::Strict), Err(Error::WeightMismatch(_))));
        assert_eq!(checksum(&b, ""), checksum(&seg(6), ""), "strict failure must not write");
        let report = load_into(&mut b, &set, LoadMode::Permissive).unwrap();
        assert!(!report.missing.is_empty());
        assert!(report.missing.iter().all(|n| n.starts_with(GROUP_GLAND_DECODER)));
        assert_eq!(checksum(&b, GROUP_GLAND_DECODER), before);
    }

    #[test]
    fn strict_mode_lists_shape_offenders() {
        let mut set = WeightSet::from_module(&seg(7));
        let name = "image_encoder.neck.weight".to_string();
        set.tensors.insert(name.clone(), Tensor::zeros([3, 3]));
        set.tensors.insert("bogus".into(), Tensor::zeros([1]));
        match load_into(&mut seg(8), &set, LoadMode::Strict) {
            Err(Error::WeightMismatch(list)) => {
                assert!(list.iter().any(|m| m.contains(&name)));
                assert!(list.iter().any(|m| m.contains("bogus")));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gland_branch_duplicated_into_contour() {
        let mut set = WeightSet::from_module(&seg(9));
        set.duplicate_prefix(GROUP_GLAND_PROMPT, GROUP_CONTOUR_PROMPT);
        set.duplicate_prefix(GROUP_GLAND_DECODER, GROUP_CONTOUR_DECODER);
        let mut m = seg(10);
        load_into(&mut m, &set, LoadMode::Strict).unwrap();
        let strip = |prefix: &str| -> Vec<(String, Vec<f32>)> {
            m.named_tensors()
                .into_iter()
                .filter_map(|(k, v)| strip_group(&k, prefix).map(|r| (r.to_string(), v.data().to_vec())))
                .collect()
        };
        assert_eq!(strip(GROUP_GLAND_DECODER), strip(GROUP_CONTOUR_DECODER));
        assert_eq!(strip(GROUP_GLAND_PROMPT), strip(GROUP_CONTOUR_PROMPT));
    }

    #[test]
    fn position_table_interpolation() {
        // constant table stays constant, class token is carried over
        let mut data = vec![9.0, 9.0];
        data.extend(std::iter::repeat(1.5).take(4 * 2));
        let src = Tensor::new([1, 5, 2], data).unwrap();
        let out = interpolate_positions(&src, &[1, 10, 2]).unwrap();
        assert_eq!(&out.data()[..2], &[9.0, 9.0]);
        assert!(out.data()[2..].iter().all(|&v| (v - 1.5).abs() < 1e-12));
        assert!(interpolate_positions(&src, &[1, 9, 2]).is_none());
        // a linear ramp along columns stays monotone
        let ramp = Tensor::from_fn([1, 9, 1], |i| (i % 3) as f64);
        let up = interpolate_positions(&ramp, &[1, 36, 1]).unwrap();
        let row: Vec<f64> = up.data()[..6].to_vec();
        assert!(row.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn pos_embed_resized_on_load() {
        let small = crate::segmenter::SegmenterConfig { image_size: 16, ..tiny_cfg() };
        let a = Segmenter::<f32>::new(small, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let set = WeightSet::from_module(&a);
        let mut b = seg(12);
        let report = load_into(&mut b, &set, LoadMode::Strict).unwrap();
        assert_eq!(report.interpolated, vec!["image_encoder.pos_embed".to_string()]);
    }

    #[test]
    fn fused_qkv_is_split() {
        let mut set = WeightSet::default();
        set.tensors.insert("blocks.0.attn.qkv.weight".into(), Tensor::from_fn([6, 2], |i| i as f64));
        set.tensors.insert("blocks.0.attn.qkv.bias".into(), Tensor::from_fn([6], |i| i as f64));
        set.tensors.insert("blocks.0.attn.proj.weight".into(), Tensor::zeros([2, 2]));
        let out = set.split_fused_qkv().unwrap();
        assert_eq!(out.tensors["blocks.0.attn.k.weight"].data(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(out.tensors["blocks.0.attn.v.bias"].data(), &[4.0, 5.0]);
        assert!(out.tensors.contains_key("blocks.0.attn.out.weight"));
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_weights(&seg(13), &path, None).unwrap();
        let blob = blob_path(&path);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_weights(&path).is_err());
    }
}
