//! Pipeline commands over a run directory.
//!
//! Layout under `<work_dir>/<run_id>/`:
//!
//! ```text
//! config.toml                 snapshot written by `prepare`
//! patches/manifest.csv        training patches (+ rasters)
//! heatmaps/<split>/           CAM heat maps (.npy) + manifest.csv
//! checkpoints/                classifier.json, segmenter_gland.json, segmenter_contour.json (+ .bin)
//! predictions/<split>/        16-bit instance labels, probability maps, index.csv
//! reports/                    training/evaluation summaries, loss curves
//! figures/                    static PNG figures
//! ```
//!
//! Every command refuses to overwrite its outputs unless `force` is set and
//! names the producing command when a prerequisite is missing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use gradeprompt_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::gradcam_pp_batch;
use crate::classifier::{accuracy, image_batch, split_by_source, train_classifier, Classifier, ClassifierReport, LabeledImage};
use crate::config::RunConfig;
use crate::dataset::{
    extract_corner_patches, load_corner, load_glas_dataset, read_manifest, write_manifest, write_record_patches, Grade,
    ImageRecord, ManifestEntry, Split,
};
use crate::error::{io_err, Error, Result};
use crate::figures;
use crate::io;
use crate::metrics::{aggregate, evaluate_image, format_table, MetricsReport};
use crate::postprocess::{postprocess, StitchCanvas};
use crate::raster::{BinaryMask, Raster, RgbImage};
use crate::segmenter::{Segmenter, GROUP_CONTOUR_DECODER, GROUP_CONTOUR_PROMPT, GROUP_GLAND_DECODER, GROUP_GLAND_PROMPT};
use crate::synthetic;
use crate::training::{read_loss_curve, run_stage, write_loss_curve, SegSample, Stage, StageReport};
use crate::weights::{load_into, read_weights, save_weights, LoadMode, LoadReport, WeightSet};

/// Scalar type used by the command-line pipeline.
pub type Real = f32;

/// Stage tag stored in classifier checkpoints.
pub const CLASSIFIER_TAG: &str = "classifier";

/// Mixes a command tag into the run seed so each random stream is
/// independent yet fully determined by `RunConfig::seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finaliser
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn patches(&self) -> PathBuf {
        self.root.join("patches")
    }
    pub fn patch_manifest(&self) -> PathBuf {
        self.patches().join("manifest.csv")
    }
    pub fn heatmaps(&self, split: Split) -> PathBuf {
        self.root.join("heatmaps").join(split.as_str())
    }
    pub fn heatmap_manifest(&self, split: Split) -> PathBuf {
        self.heatmaps(split).join("manifest.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn classifier_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("classifier.json")
    }
    pub fn segmenter_checkpoint(&self, stage: Stage) -> PathBuf {
        self.checkpoints().join(format!("segmenter_{}.json", stage.as_str()))
    }
    pub fn predictions(&self, split: Split) -> PathBuf {
        self.root.join("predictions").join(split.as_str())
    }
    pub fn prediction_index(&self, split: Split) -> PathBuf {
        self.predictions(split).join("index.csv")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn classifier_report(&self) -> PathBuf {
        self.reports().join("classifier.json")
    }
    pub fn classifier_split(&self) -> PathBuf {
        self.reports().join("classifier_split.json")
    }
    pub fn heatmap_report(&self, split: Split) -> PathBuf {
        self.reports().join(format!("heatmaps_{}.json", split.as_str()))
    }
    pub fn loss_curve(&self, stage: Stage) -> PathBuf {
        self.reports().join(format!("loss_{}.csv", stage.as_str()))
    }
    pub fn stage_report(&self, stage: Stage) -> PathBuf {
        self.reports().join(format!("train_{}.json", stage.as_str()))
    }
    pub fn metrics_csv(&self, split: Split) -> PathBuf {
        self.reports().join(format!("metrics_{}.csv", split.as_str()))
    }
    pub fn metrics_json(&self, split: Split) -> PathBuf {
        self.reports().join(format!("metrics_{}.json", split.as_str()))
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Allow commands to replace existing outputs.
    pub force: bool,
    /// Load external init weights strictly regardless of the config.
    pub strict_weights: bool,
}

/// Source images held out for classifier validation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSplit {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
}

/// Mean heat inside and outside the gland annotation of one source image,
/// pooled over its unrotated corner crops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatLocalization {
    pub source_id: String,
    pub grade: Grade,
    pub predicted: Grade,
    pub inside_mean: Option<f64>,
    pub outside_mean: Option<f64>,
    pub validation: bool,
}

impl HeatLocalization {
    /// `None` when the image lacks either region.
    pub fn inside_higher(&self) -> Option<bool> {
        Some(self.inside_mean? > self.outside_mean?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub split: Split,
    pub maps: usize,
    pub images: Vec<HeatLocalization>,
    /// Share of images (with both regions) whose inside mean is higher.
    pub inside_higher_fraction: Option<f64>,
    /// The same share restricted to classifier validation images.
    pub validation_inside_higher_fraction: Option<f64>,
}

fn inside_higher_fraction<'a>(images: impl Iterator<Item = &'a HeatLocalization>) -> Option<f64> {
    let flags: Vec<bool> = images.filter_map(HeatLocalization::inside_higher).collect();
    (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
}

/// One heat-map store row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatEntry {
    pub key: String,
    pub source_id: String,
    pub rotation: u8,
    pub target: Grade,
    pub file: String,
}

const HEAT_HEADER: &str = "key,source_id,rotation,target,file";

fn heatmaps_command(split: Split) -> &'static str {
    match split {
        Split::Train => "heatmaps --split train",
        Split::TestA => "heatmaps --split testA",
        Split::TestB => "heatmaps --split testB",
    }
}

fn predict_command(split: Split) -> &'static str {
    match split {
        Split::Train => "predict --split train",
        Split::TestA => "predict --split testA",
        Split::TestB => "predict --split testB",
    }
}

fn corner_key(source: &str, offset: (usize, usize)) -> String {
    format!("{source}_r{}_c{}", offset.0, offset.1)
}

/// Heat maps of one split, keyed by `(corner key, rotation)`.
pub type HeatStore = HashMap<(String, u8), Raster<f32>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub split: Split,
    pub images: Vec<(String, usize)>,
}

/// A single unit of CAM work: images of one batch with their keys.
struct CamJob {
    source_id: String,
    grade: Grade,
    items: Vec<(String, u8, RgbImage, BinaryMask)>,
}

/// Runs pipeline commands for one [`RunConfig`].
pub struct Pipeline {
    pub cfg: RunConfig,
    pub opts: RunOptions,
    pub layout: RunLayout,
    log: fn(&str),
}

fn stderr_log(msg: &str) {
    eprintln!("{msg}");
}

impl Pipeline {
    pub fn new(cfg: RunConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let layout = RunLayout::new(cfg.run_dir());
        Ok(Self {
            cfg,
            opts,
            layout,
            log: stderr_log,
        })
    }

    /// Replaces the progress sink (stderr by default).
    pub fn with_log(mut self, log: fn(&str)) -> Self {
        self.log = log;
        self
    }

    fn say(&self, msg: impl AsRef<str>) {
        (self.log)(msg.as_ref());
    }

    fn guard(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.opts.force {
            return Err(Error::WouldOverwrite(path.to_path_buf()));
        }
        Ok(())
    }

    fn make_dirs(&self) -> Result<()> {
        for d in [self.layout.checkpoints(), self.layout.reports()] {
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(())
    }

    fn require(path: PathBuf, what: &'static str, command: &'static str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { what, path, command })
        }
    }

    fn init_mode(&self) -> LoadMode {
        if self.opts.strict_weights {
            LoadMode::Strict
        } else {
            self.cfg.weight_loading
        }
    }

    fn records(&self, split: Split) -> Result<Vec<ImageRecord>> {
        let root = Self::require(self.cfg.paths.data_root.clone(), "dataset directory", "synth")?;
        let recs: Vec<ImageRecord> = load_glas_dataset(&root)?.into_iter().filter(|r| r.split == split).collect();
        if recs.is_empty() {
            return Err(Error::Empty(match split {
                Split::Train => "train split",
                Split::TestA => "testA split",
                Split::TestB => "testB split",
            }));
        }
        Ok(recs)
    }

    fn patch_entries(&self) -> Result<Vec<ManifestEntry>> {
        read_manifest(&Self::require(self.layout.patch_manifest(), "patch manifest", "prepare")?)
    }

    /// Generates the synthetic dataset into `paths.data_root`.
    pub fn synth(&self) -> Result<Vec<(String, Grade)>> {
        let root = &self.cfg.paths.data_root;
        self.guard(&root.join("grades.csv"))?;
        let mut spec = self.cfg.synthetic.clone();
        spec.seed = derive_seed(self.cfg.seed, "synthetic");
        let out = synthetic::generate(&spec, root)?;
        self.say(format!("synth: wrote {} images to {}", out.len(), root.display()));
        Ok(out)
    }

    /// Writes corner patches of every training image and the manifest.
    pub fn prepare(&self) -> Result<Vec<ManifestEntry>> {
        let manifest = self.layout.patch_manifest();
        self.guard(&manifest)?;
        let records = self.records(Split::Train)?;
        let dir = self.layout.patches();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut entries = Vec::with_capacity(records.len() * 16);
        for rec in &records {
            entries.extend(write_record_patches(rec, &self.cfg.dataset, &dir)?);
        }
        write_manifest(&entries, &manifest)?;
        let snap = self.layout.config_snapshot();
        fs::write(&snap, self.cfg.to_toml()).map_err(io_err(&snap))?;
        self.say(format!("prepare: {} records -> {} patches", records.len(), entries.len()));
        Ok(entries)
    }

    fn new_classifier(&self) -> Result<Classifier<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "classifier-init"));
        Classifier::new(self.cfg.classifier.model.clone(), &mut rng)
    }

    fn new_segmenter(&self) -> Result<Segmenter<Real>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "segmenter-init"));
        Segmenter::new(self.cfg.segmenter.clone(), &mut rng)
    }

    fn log_load(&self, what: &str, report: &LoadReport) {
        self.say(format!(
            "{what}: loaded {}, missing {}, unexpected {}, mismatched {}, interpolated {}",
            report.loaded.len(),
            report.missing.len(),
            report.unexpected.len(),
            report.mismatched.len(),
            report.interpolated.len()
        ));
    }

    /// Loads a checkpoint written by this pipeline, checking its stage tag.
    fn load_checkpoint<M: gradeprompt_autograd::Module<Real>>(
        &self,
        model: &mut M,
        path: PathBuf,
        what: &'static str,
        command: &'static str,
        tag: &str,
    ) -> Result<()> {
        let path = Self::require(path, what, command)?;
        let ws = read_weights(&path)?;
        if ws.stage.as_deref() != Some(tag) {
            return Err(Error::InvalidArgument(format!(
                "{} is tagged {:?}, expected `{tag}`",
                path.display(),
                ws.stage
            )));
        }
        load_into(model, &ws, LoadMode::Strict)?;
        Ok(())
    }

    pub fn load_classifier(&self) -> Result<Classifier<Real>> {
        let mut model = self.new_classifier()?;
        self.load_checkpoint(
            &mut model,
            self.layout.classifier_checkpoint(),
            "classifier checkpoint",
            "train-classifier",
            CLASSIFIER_TAG,
        )?;
        Ok(model)
    }

    pub fn load_segmenter(&self, stage: Stage) -> Result<Segmenter<Real>> {
        let mut model = self.new_segmenter()?;
        let command = match stage {
            Stage::Gland => "train-seg --stage gland",
            Stage::Contour => "train-seg --stage contour",
        };
        self.load_checkpoint(
            &mut model,
            self.layout.segmenter_checkpoint(stage),
            "segmenter checkpoint",
            command,
            stage.as_str(),
        )?;
        Ok(model)
    }

    fn corners_as_labeled(&self, split: Split) -> Result<Vec<LabeledImage>> {
        let mut out = Vec::new();
        for rec in self.records(split)? {
            for c in extract_corner_patches(&rec, self.cfg.dataset.patch_size)? {
                out.push(LabeledImage {
                    source_id: c.source_id,
                    image: c.image,
                    grade: c.grade,
                });
            }
        }
        Ok(out)
    }

    /// Trains the grade classifier on unrotated training corners, holding
    /// out whole source images for validation.
    pub fn train_classifier(&self) -> Result<ClassifierReport> {
        let ckpt = self.layout.classifier_checkpoint();
        self.guard(&ckpt)?;
        let entries = self.patch_entries()?;
        let dir = self.layout.patches();
        let mut data = Vec::new();
        for e in entries.iter().filter(|e| e.rotation == 0) {
            data.push(LabeledImage {
                source_id: e.source_id.clone(),
                image: io::read_rgb(&dir.join(&e.image))?,
                grade: e.grade,
            });
        }
        let sources: BTreeMap<String, Grade> = data.iter().map(|d| (d.source_id.clone(), d.grade)).collect();
        let sources: Vec<(String, Grade)> = sources.into_iter().collect();
        let tc = &self.cfg.classifier.train;
        let (train_ids, val_ids) = split_by_source(&sources, tc.val_fraction, derive_seed(self.cfg.seed, "classifier-split"))?;
        let (train, val): (Vec<_>, Vec<_>) = data.into_iter().partition(|d| train_ids.contains(&d.source_id));

        let mut model = self.new_classifier()?;
        if let Some(path) = &self.cfg.classifier.init_weights {
            let ws = read_weights(path)?.split_fused_qkv()?;
            let rep = load_into(&mut model, &ws, self.init_mode())?;
            self.log_load("classifier init", &rep);
        }
        self.say(format!(
            "train-classifier: {} train / {} val crops, {} parameters",
            train.len(),
            val.len(),
            gradeprompt_autograd::Module::num_params(&model)
        ));
        let log = self.log;
        let mut report = train_classifier(&mut model, &train, &val, tc, derive_seed(self.cfg.seed, "classifier-train"), |s| {
            log(&format!(
                "  epoch {:>3}: loss {:.4} train acc {:.3} val acc {:.3} val loss {:.4}",
                s.epoch, s.train_loss, s.train_accuracy, s.val_accuracy, s.val_loss
            ))
        })?;
        for split in [Split::TestA, Split::TestB] {
            match self.corners_as_labeled(split) {
                Ok(test) => {
                    let acc = accuracy(&model, &test, tc.batch_size)?;
                    report.split_accuracy.insert(split.as_str().to_string(), acc);
                }
                Err(Error::Empty(_)) => {}
                Err(e) => return Err(e),
            }
        }
        self.make_dirs()?;
        save_weights(&model, &ckpt, Some(CLASSIFIER_TAG))?;
        write_json(&self.layout.classifier_report(), &report)?;
        write_json(
            &self.layout.classifier_split(),
            &ClassifierSplit {
                train: train_ids,
                val: val_ids,
            },
        )?;
        self.say(format!(
            "train-classifier: best val accuracy {:.3} at epoch {}",
            report.best_val_accuracy, report.best_epoch
        ));
        Ok(report)
    }

    fn cam_jobs(&self, split: Split) -> Result<Vec<CamJob>> {
        if split == Split::Train {
            let entries = self.patch_entries()?;
            let dir = self.layout.patches();
            entries
                .iter()
                .filter(|e| e.rotation == 0)
                .map(|e| {
                    let c = load_corner(&dir, e)?;
                    let key = corner_key(&c.source_id, c.offset);
                    let items = (0..4u8)
                        .map(|k| (key.clone(), k, c.image.rotate_quarter(k), c.gland_mask.rotate_quarter(k)))
                        .collect();
                    Ok(CamJob {
                        source_id: c.source_id,
                        grade: c.grade,
                        items,
                    })
                })
                .collect()
        } else {
            let p = self.cfg.dataset.patch_size;
            self.records(split)?
                .iter()
                .map(|rec| {
                    let items = extract_corner_patches(rec, p)?
                        .into_iter()
                        .map(|c| (corner_key(&c.source_id, c.offset), 0u8, c.image, c.annotation.foreground()))
                        .collect();
                    Ok(CamJob {
                        source_id: rec.id.clone(),
                        grade: rec.grade,
                        items,
                    })
                })
                .collect()
        }
    }

    /// Computes and caches Grad-CAM++ heat maps. For the training split
    /// every rotation of every corner gets its own map; test splits get the
    /// unrotated corners used at prediction time.
    pub fn heatmaps(&self, split: Split) -> Result<HeatmapReport> {
        let manifest = self.layout.heatmap_manifest(split);
        self.guard(&manifest)?;
        let model = self.load_classifier()?;
        let jobs = self.cam_jobs(split)?;
        let validation: BTreeSet<String> = if split == Split::Train {
            read_json::<ClassifierSplit>(&self.layout.classifier_split())
                .map(|s| s.val)
                .unwrap_or_default()
        } else {
            BTreeSet::new()
        };
        let dir = self.layout.heatmaps(split);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut lines = vec![HEAT_HEADER.to_string()];
        // source -> (inside sum, inside n, outside sum, outside n, votes)
        let mut pooled: BTreeMap<String, (Grade, [f64; 4], [usize; 2])> = BTreeMap::new();
        let mut maps = 0;
        let target_of = |g: Grade| if self.cfg.cam.use_true_label { Some(g) } else { None };
        for job in &jobs {
            for chunk in job.items.chunks(self.cfg.cam.batch_size.max(1)) {
                let imgs: Vec<&RgbImage> = chunk.iter().map(|it| &it.2).collect();
                let targets = vec![target_of(job.grade); chunk.len()];
                let heats = gradcam_pp_batch(&model, &imgs, &targets)?;
                for ((key, rot, _, mask), (heat, target)) in chunk.iter().zip(heats) {
                    let file = format!("{key}_k{rot}.npy");
                    io::write_npy_f32(&heat, &dir.join(&file))?;
                    lines.push(format!("{key},{},{rot},{target},{file}", job.source_id));
                    maps += 1;
                    if *rot == 0 {
                        let slot = pooled.entry(job.source_id.clone()).or_insert((job.grade, [0.0; 4], [0; 2]));
                        for (&h, &m) in heat.data().iter().zip(mask.data()) {
                            let i = if m { 0 } else { 2 };
                            slot.1[i] += f64::from(h);
                            slot.1[i + 1] += 1.0;
                        }
                        slot.2[target.index()] += 1;
                    }
                }
            }
        }
        fs::write(&manifest, lines.join("\n") + "\n").map_err(io_err(&manifest))?;
        let images: Vec<HeatLocalization> = pooled
            .into_iter()
            .map(|(source_id, (grade, s, votes))| HeatLocalization {
                validation: validation.contains(&source_id),
                predicted: if votes[1] > votes[0] { Grade::Malignant } else { Grade::Benign },
                source_id,
                grade,
                inside_mean: (s[1] > 0.0).then(|| s[0] / s[1]),
                outside_mean: (s[3] > 0.0).then(|| s[2] / s[3]),
            })
            .collect();
        let report = HeatmapReport {
            split,
            maps,
            inside_higher_fraction: inside_higher_fraction(images.iter()),
            validation_inside_higher_fraction: inside_higher_fraction(images.iter().filter(|i| i.validation)),
            images,
        };
        self.make_dirs()?;
        write_json(&self.layout.heatmap_report(split), &report)?;
        self.say(format!(
            "heatmaps {split}: {maps} maps, inside>outside on {}",
            report.inside_higher_fraction.map_or("n/a".into(), |f| format!("{:.1}% of images", 100.0 * f))
        ));
        Ok(report)
    }

    pub fn read_heat_entries(&self, split: Split) -> Result<Vec<HeatEntry>> {
        let command = heatmaps_command(split);
        let path = Self::require(self.layout.heatmap_manifest(split), "heat-map store", command)?;
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let bad = |reason: String| Error::Format {
            what: "heat-map manifest",
            path: path.clone(),
            reason,
        };
        let mut lines = text.lines();
        if lines.next() != Some(HEAT_HEADER) {
            return Err(bad("unexpected header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(format!("expected 5 fields in `{l}`")));
                }
                Ok(HeatEntry {
                    key: f[0].into(),
                    source_id: f[1].into(),
                    rotation: f[2].parse().map_err(|_| bad(format!("bad rotation `{}`", f[2])))?,
                    target: f[3].parse()?,
                    file: f[4].into(),
                })
            })
            .collect()
    }

    pub fn read_heat_store(&self, split: Split) -> Result<HeatStore> {
        let dir = self.layout.heatmaps(split);
        self.read_heat_entries(split)?
            .into_iter()
            .map(|e| Ok(((e.key, e.rotation), io::read_npy_f32(&dir.join(&e.file))?)))
            .collect()
    }

    /// Runs one segmentation training stage and writes a stage-tagged
    /// checkpoint plus its loss curve.
    pub fn train_seg(&self, stage: Stage) -> Result<StageReport> {
        let ckpt = self.layout.segmenter_checkpoint(stage);
        self.guard(&ckpt)?;
        let (mut model, input_stage) = match stage {
            Stage::Gland => (self.initial_segmenter()?, None),
            Stage::Contour => (self.load_segmenter(Stage::Gland)?, Some(Stage::Gland)),
        };
        let entries = self.patch_entries()?;
        let mut heat = if stage == Stage::Gland {
            Some(self.read_heat_store(Split::Train)?)
        } else {
            None
        };
        let dir = self.layout.patches();
        let mut data = Vec::new();
        for e in entries.iter().filter(|e| e.rotation == 0) {
            let corner = load_corner(&dir, e)?;
            let key = e.corner_key();
            let maps = match heat.as_mut() {
                Some(store) => {
                    let mut take = |k: u8| {
                        store.remove(&(key.clone(), k)).ok_or_else(|| Error::MissingArtifact {
                            what: "heat map",
                            path: self.layout.heatmaps(Split::Train).join(format!("{key}_k{k}.npy")),
                            command: heatmaps_command(Split::Train),
                        })
                    };
                    Some([take(0)?, take(1)?, take(2)?, take(3)?])
                }
                None => None,
            };
            data.push(SegSample { corner, heat: maps });
        }
        let sc = match stage {
            Stage::Gland => &self.cfg.training.gland,
            Stage::Contour => &self.cfg.training.contour,
        };
        self.say(format!("train-seg {stage}: {} corners x 4 rotations, {} epochs", data.len(), sc.epochs));
        let log = self.log;
        let report = run_stage(
            &mut model,
            stage,
            input_stage,
            &data,
            sc,
            derive_seed(self.cfg.seed, stage.as_str()),
            |epoch, loss| log(&format!("  epoch {epoch:>3}: mean loss {loss:.5}")),
        )?;
        self.make_dirs()?;
        save_weights(&model, &ckpt, Some(stage.as_str()))?;
        write_loss_curve(&report.curve, &self.layout.loss_curve(stage))?;
        write_json(&self.layout.stage_report(stage), &report)?;
        Ok(report)
    }

    /// Fresh segmenter, optionally initialised from external weights.
    fn initial_segmenter(&self) -> Result<Segmenter<Real>> {
        let mut model = self.new_segmenter()?;
        if let Some(path) = &self.cfg.training.init_weights {
            let mut ws: WeightSet = read_weights(path)?.split_fused_qkv()?;
            let has_contour = ws.tensors.keys().any(|k| k.starts_with(GROUP_CONTOUR_PROMPT) || k.starts_with(GROUP_CONTOUR_DECODER));
            if self.cfg.training.duplicate_into_contour && !has_contour {
                ws.duplicate_prefix(GROUP_GLAND_PROMPT, GROUP_CONTOUR_PROMPT);
                ws.duplicate_prefix(GROUP_GLAND_DECODER, GROUP_CONTOUR_DECODER);
            }
            let rep = load_into(&mut model, &ws, self.init_mode())?;
            self.log_load("segmenter init", &rep);
        }
        Ok(model)
    }

    /// Predicts instance masks for every image of `split`: corner
    /// probabilities are stitched by overlap averaging, then post-processed.
    pub fn predict(&self, split: Split) -> Result<PredictionSummary> {
        let index = self.layout.prediction_index(split);
        self.guard(&index)?;
        let model = self.load_segmenter(Stage::Contour)?;
        let store = self.read_heat_store(split)?;
        let records = self.records(split)?;
        let dir = self.layout.predictions(split);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let p = self.cfg.dataset.patch_size;
        let mut lines = vec!["id,objects,labels".to_string()];
        let mut images = Vec::new();
        for rec in &records {
            let corners = extract_corner_patches(rec, p)?;
            let (h, w) = rec.image.dims();
            let (mut gland, mut contour) = (StitchCanvas::new(h, w), StitchCanvas::new(h, w));
            for chunk in corners.chunks(self.cfg.inference_batch) {
                let imgs: Vec<&RgbImage> = chunk.iter().map(|c| &c.image).collect();
                let mut heat = Vec::with_capacity(chunk.len() * p * p);
                for c in chunk {
                    let key = corner_key(&c.source_id, c.offset);
                    let map = store.get(&(key.clone(), 0)).ok_or_else(|| Error::MissingArtifact {
                        what: "heat map",
                        path: self.layout.heatmaps(split).join(format!("{key}_k0.npy")),
                        command: heatmaps_command(split),
                    })?;
                    heat.extend(map.data().iter().map(|&v| v as Real));
                }
                let heat = Tensor::new(vec![chunk.len(), 1, p, p], heat)?;
                let out = model.forward(&image_batch::<Real>(&imgs), &heat)?;
                for (i, c) in chunk.iter().enumerate() {
                    gland.add(&out.gland_raster(i), c.offset)?;
                    contour.add(&out.contour_raster(i), c.offset)?;
                }
            }
            let (gp, cp) = (gland.finish()?, contour.finish()?);
            let mask = postprocess(&gp, &cp, &self.cfg.postprocess)?;
            let file = format!("{}.png", rec.id);
            io::write_labels(&mask, &dir.join(&file))?;
            io::write_npy_f32(&gp, &dir.join(format!("{}_gland.npy", rec.id)))?;
            io::write_npy_f32(&cp, &dir.join(format!("{}_contour.npy", rec.id)))?;
            lines.push(format!("{},{},{file}", rec.id, mask.num_objects()));
            images.push((rec.id.clone(), mask.num_objects()));
        }
        fs::write(&index, lines.join("\n") + "\n").map_err(io_err(&index))?;
        self.say(format!("predict {split}: {} images", images.len()));
        Ok(PredictionSummary { split, images })
    }

    /// Scores predicted instance masks against the annotations.
    pub fn evaluate(&self, split: Split) -> Result<MetricsReport> {
        let csv = self.layout.metrics_csv(split);
        self.guard(&csv)?;
        let command = predict_command(split);
        Self::require(self.layout.prediction_index(split), "predictions", command)?;
        let dir = self.layout.predictions(split);
        let mut per_image = Vec::new();
        for rec in self.records(split)? {
            let pred_path = Self::require(dir.join(format!("{}.png", rec.id)), "prediction", command)?;
            let pred = io::read_labels(&pred_path)?;
            per_image.push(evaluate_image(&rec.id, &pred, &rec.annotation, &self.cfg.metrics)?);
        }
        let report = aggregate(per_image, split.as_str(), self.cfg.metrics.aggregation)?;
        self.make_dirs()?;
        fs::write(&csv, report.to_csv()).map_err(io_err(&csv))?;
        write_json(&self.layout.metrics_json(split), &report)?;
        self.say(format_table(std::slice::from_ref(&report)));
        Ok(report)
    }

    /// Writes per-image panels (image, heat overlay, annotation, prediction,
    /// gland and contour probabilities) and the loss-curve chart. Returns
    /// the files written.
    pub fn plot(&self, split: Split) -> Result<Vec<PathBuf>> {
        let dir = self.layout.figures().join(split.as_str());
        let records = self.records(split)?;
        let targets: Vec<PathBuf> = records.iter().map(|r| dir.join(format!("{}.png", r.id))).collect();
        let curves = self.layout.figures().join("loss_curves.png");
        for t in targets.iter().chain(std::iter::once(&curves)) {
            self.guard(t)?;
        }
        let command = predict_command(split);
        Self::require(self.layout.prediction_index(split), "predictions", command)?;
        let store = self.read_heat_store(split).ok();
        let pred_dir = self.layout.predictions(split);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let p = self.cfg.dataset.patch_size;
        let mut written = Vec::new();
        for (rec, target) in records.iter().zip(&targets) {
            let (h, w) = rec.image.dims();
            let pred = io::read_labels(&pred_dir.join(format!("{}.png", rec.id)))?;
            let gp = io::read_npy_f32(&pred_dir.join(format!("{}_gland.npy", rec.id)))?;
            let cp = io::read_npy_f32(&pred_dir.join(format!("{}_contour.npy", rec.id)))?;
            let mut panels = vec![rec.image.clone()];
            if let Some(store) = &store {
                let mut canvas = StitchCanvas::new(h, w);
                for c in extract_corner_patches(rec, p)? {
                    if let Some(m) = store.get(&(corner_key(&c.source_id, c.offset), 0)) {
                        canvas.add(m, c.offset)?;
                    }
                }
                if let Ok(heat) = canvas.finish() {
                    panels.push(figures::blend_heat(&rec.image, &heat, 0.5)?);
                }
            }
            panels.push(figures::draw_outlines(&rec.image, &rec.annotation, [0, 160, 0])?);
            panels.push(figures::draw_outlines(&rec.image, &pred, [0, 0, 0])?);
            panels.push(figures::label_colors(&pred));
            panels.push(figures::heat_to_rgb(&gp));
            panels.push(figures::heat_to_rgb(&cp));
            io::write_rgb(&figures::hstack(&panels, 8), target)?;
            written.push(target.clone());
        }
        let mut series = Vec::new();
        for (stage, color) in [(Stage::Gland, [200, 30, 30]), (Stage::Contour, [30, 60, 200])] {
            if let Ok(curve) = read_loss_curve(&self.layout.loss_curve(stage)) {
                series.push((curve.iter().map(|pt| (pt.step as f64, pt.loss)).collect(), color));
            }
        }
        if !series.is_empty() {
            io::write_rgb(&figures::line_chart(&series, 640, 360), &curves)?;
            written.push(curves);
        }
        self.say(format!("plot {split}: {} figures in {}", written.len(), self.layout.figures().display()));
        Ok(written)
    }

    /// `prepare` through `evaluate` in dependency order for the given
    /// evaluation splits.
    pub fn run_all(&self, splits: &[Split]) -> Result<Vec<MetricsReport>> {
        self.prepare()?;
        self.train_classifier()?;
        self.heatmaps(Split::Train)?;
        for &s in splits {
            self.heatmaps(s)?;
        }
        self.train_seg(Stage::Gland)?;
        self.train_seg(Stage::Contour)?;
        let mut reports = Vec::new();
        for &s in splits {
            self.predict(s)?;
            reports.push(self.evaluate(s)?);
        }
        Ok(reports)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "json report",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
