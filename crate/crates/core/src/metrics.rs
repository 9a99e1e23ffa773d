//! GlaS object-level metrics: detection F1, object Dice and object Hausdorff.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{boundary, squared_distance_transform};
use crate::raster::{BinaryMask, InstanceMask, Raster};

/// How per-image results combine over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Objects from every image share one weighting, as in the contest.
    #[default]
    Pooled,
    /// Per-image values averaged with weights proportional to image area.
    ImageWeighted,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Pooled => "pooled",
            Aggregation::ImageWeighted => "image_weighted",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub aggregation: Aggregation,
    /// Hausdorff distance charged when the opposing map has no foreground;
    /// the image diagonal when absent.
    pub hausdorff_penalty: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    /// `2PR/(P+R)`, written as `2tp/(2tp+fp+fn)`; 1 when both maps are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

/// Pairwise overlap areas and object areas of two instance maps.
struct Overlaps {
    pred_area: BTreeMap<u32, usize>,
    gt_area: BTreeMap<u32, usize>,
    /// `(pred, gt) -> shared pixels`
    pairs: HashMap<(u32, u32), usize>,
}

impl Overlaps {
    fn new(pred: &InstanceMask, gt: &InstanceMask) -> Result<Self> {
        pred.labels().same_dims(gt.labels(), "metrics")?;
        let mut pairs = HashMap::new();
        for (&p, &g) in pred.labels().data().iter().zip(gt.labels().data()) {
            if p > 0 && g > 0 {
                *pairs.entry((p, g)).or_insert(0) += 1;
            }
        }
        Ok(Self {
            pred_area: pred.areas(),
            gt_area: gt.areas(),
            pairs,
        })
    }

    /// Object on the other side with the largest overlap, lower label on ties.
    fn best_gt_for(&self, p: u32) -> Option<(u32, usize)> {
        self.best(|&(pp, g), &n| (pp == p).then_some((g, n)))
    }

    fn best_pred_for(&self, g: u32) -> Option<(u32, usize)> {
        self.best(|&(p, gg), &n| (gg == g).then_some((p, n)))
    }

    fn best(&self, pick: impl Fn(&(u32, u32), &usize) -> Option<(u32, usize)>) -> Option<(u32, usize)> {
        self.pairs
            .iter()
            .filter_map(|(k, v)| pick(k, v))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
    }
}

fn match_counts(ov: &Overlaps) -> MatchCounts {
    // candidate pairs cover more than half of their ground-truth object
    let mut cands: Vec<(usize, u32, u32)> = ov
        .pairs
        .iter()
        .filter(|(&(_, g), &n)| 2 * n > ov.gt_area[&g])
        .map(|(&(p, g), &n)| (n, g, p))
        .collect();
    cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = Vec::new();
    let mut used_g = Vec::new();
    for (_, g, p) in cands {
        if !used_p.contains(&p) && !used_g.contains(&g) {
            used_p.push(p);
            used_g.push(g);
        }
    }
    let tp = used_p.len();
    MatchCounts {
        tp,
        fp: ov.pred_area.len() - tp,
        fn_: ov.gt_area.len() - tp,
    }
}

pub fn object_f1(pred: &InstanceMask, gt: &InstanceMask) -> Result<(MatchCounts, f64)> {
    let c = match_counts(&Overlaps::new(pred, gt)?);
    Ok((c, c.f1()))
}

fn dice(a: usize, b: usize, inter: usize) -> f64 {
    2.0 * inter as f64 / (a + b) as f64
}

/// Area-weighted sums for one direction of a symmetric object metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightedSum {
    /// `Σ |X_i| · m_i`
    pub num: f64,
    /// `Σ |X_i|`
    pub den: f64,
}

impl WeightedSum {
    fn add(&mut self, area: usize, v: f64) {
        self.num += area as f64 * v;
        self.den += area as f64;
    }

    fn merge(&mut self, o: &WeightedSum) {
        self.num += o.num;
        self.den += o.den;
    }

    fn mean(&self) -> Option<f64> {
        (self.den > 0.0).then(|| self.num / self.den)
    }
}

/// Combines the ground-truth and prediction directions. An empty side
/// takes the other side's value; two empty sides give `both_empty`.
fn combine(g: &WeightedSum, s: &WeightedSum, both_empty: f64) -> f64 {
    match (g.mean(), s.mean()) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => both_empty,
    }
}

fn dice_sums(ov: &Overlaps) -> (WeightedSum, WeightedSum) {
    let mut g_side = WeightedSum::default();
    for (&g, &area) in &ov.gt_area {
        let d = ov.best_pred_for(g).map_or(0.0, |(p, n)| dice(area, ov.pred_area[&p], n));
        g_side.add(area, d);
    }
    let mut s_side = WeightedSum::default();
    for (&p, &area) in &ov.pred_area {
        let d = ov.best_gt_for(p).map_or(0.0, |(g, n)| dice(area, ov.gt_area[&g], n));
        s_side.add(area, d);
    }
    (g_side, s_side)
}

pub fn object_dice(pred: &InstanceMask, gt: &InstanceMask) -> Result<f64> {
    let (g, s) = dice_sums(&Overlaps::new(pred, gt)?);
    Ok(combine(&g, &s, 1.0))
}

/// Boundary pixels and distance field of one object (or a whole foreground).
struct Shape {
    edge: Vec<usize>,
    sq_dist: Raster<f64>,
}

impl Shape {
    fn new(mask: &BinaryMask) -> Self {
        let b = boundary(mask);
        let edge = b.data().iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        Self {
            edge,
            sq_dist: squared_distance_transform(&b),
        }
    }

    /// Directed Hausdorff from `self`'s boundary to `other`'s.
    fn directed(&self, other: &Shape) -> f64 {
        self.edge.iter().map(|&i| other.sq_dist.data()[i]).fold(0.0, f64::max).sqrt()
    }

    fn hausdorff(&self, other: &Shape) -> f64 {
        self.directed(other).max(other.directed(self))
    }
}

fn hausdorff_sums(pred: &InstanceMask, gt: &InstanceMask, ov: &Overlaps, penalty: f64) -> (WeightedSum, WeightedSum) {
    let shapes = |m: &InstanceMask| -> BTreeMap<u32, Shape> {
        m.object_ids().into_iter().map(|id| (id, Shape::new(&m.object(id)))).collect()
    };
    let (ps, gs) = (shapes(pred), shapes(gt));
    let pred_all = Shape::new(&pred.foreground());
    let gt_all = Shape::new(&gt.foreground());
    let dist = |own: &Shape, matched: Option<&Shape>, all: &Shape, other_empty: bool| {
        if other_empty {
            penalty
        } else {
            own.hausdorff(matched.unwrap_or(all))
        }
    };
    let mut g_side = WeightedSum::default();
    for (&g, &area) in &ov.gt_area {
        let m = ov.best_pred_for(g).map(|(p, _)| &ps[&p]);
        g_side.add(area, dist(&gs[&g], m, &pred_all, ps.is_empty()));
    }
    let mut s_side = WeightedSum::default();
    for (&p, &area) in &ov.pred_area {
        let m = ov.best_gt_for(p).map(|(g, _)| &gs[&g]);
        s_side.add(area, dist(&ps[&p], m, &gt_all, gs.is_empty()));
    }
    (g_side, s_side)
}

pub fn image_diagonal(height: usize, width: usize) -> f64 {
    ((height * height + width * width) as f64).sqrt()
}

/// Object Hausdorff with an explicit penalty for objects facing an empty map.
pub fn object_hausdorff_with(pred: &InstanceMask, gt: &InstanceMask, penalty: f64) -> Result<f64> {
    let ov = Overlaps::new(pred, gt)?;
    let (g, s) = hausdorff_sums(pred, gt, &ov, penalty);
    Ok(combine(&g, &s, 0.0))
}

/// Object Hausdorff with the image diagonal as the empty-map penalty.
pub fn object_hausdorff(pred: &InstanceMask, gt: &InstanceMask) -> Result<f64> {
    let (h, w) = gt.dims();
    object_hausdorff_with(pred, gt, image_diagonal(h, w))
}

/// Everything needed to report one image and to pool it with others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub counts: MatchCounts,
    pub f1: f64,
    pub object_dice: f64,
    pub object_hausdorff: f64,
    pub dice_gt: WeightedSum,
    pub dice_pred: WeightedSum,
    pub haus_gt: WeightedSum,
    pub haus_pred: WeightedSum,
}

pub fn evaluate_image(id: &str, pred: &InstanceMask, gt: &InstanceMask, cfg: &MetricsConfig) -> Result<ImageMetrics> {
    let ov = Overlaps::new(pred, gt)?;
    let (h, w) = gt.dims();
    let penalty = cfg.hausdorff_penalty.unwrap_or_else(|| image_diagonal(h, w));
    let counts = match_counts(&ov);
    let (dice_gt, dice_pred) = dice_sums(&ov);
    let (haus_gt, haus_pred) = hausdorff_sums(pred, gt, &ov, penalty);
    Ok(ImageMetrics {
        id: id.to_string(),
        height: h,
        width: w,
        counts,
        f1: counts.f1(),
        object_dice: combine(&dice_gt, &dice_pred, 1.0),
        object_hausdorff: combine(&haus_gt, &haus_pred, 0.0),
        dice_gt,
        dice_pred,
        haus_gt,
        haus_pred,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub aggregation: Aggregation,
    pub counts: MatchCounts,
    pub f1: f64,
    pub object_dice: f64,
    pub object_hausdorff: f64,
    pub per_image: Vec<ImageMetrics>,
}

/// Dataset-level metrics. F1 always pools detection counts; Dice and
/// Hausdorff follow `mode`.
pub fn aggregate(per_image: Vec<ImageMetrics>, split: &str, mode: Aggregation) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut counts = MatchCounts::default();
    for m in &per_image {
        counts.tp += m.counts.tp;
        counts.fp += m.counts.fp;
        counts.fn_ += m.counts.fn_;
    }
    let (object_dice, object_hausdorff) = match mode {
        Aggregation::Pooled => {
            let mut acc = [WeightedSum::default(); 4];
            for m in &per_image {
                acc[0].merge(&m.dice_gt);
                acc[1].merge(&m.dice_pred);
                acc[2].merge(&m.haus_gt);
                acc[3].merge(&m.haus_pred);
            }
            (combine(&acc[0], &acc[1], 1.0), combine(&acc[2], &acc[3], 0.0))
        }
        Aggregation::ImageWeighted => {
            let total: f64 = per_image.iter().map(|m| (m.height * m.width) as f64).sum();
            let mean = |f: fn(&ImageMetrics) -> f64| {
                per_image.iter().map(|m| f(m) * (m.height * m.width) as f64).sum::<f64>() / total
            };
            (mean(|m| m.object_dice), mean(|m| m.object_hausdorff))
        }
    };
    Ok(MetricsReport {
        split: split.to_string(),
        aggregation: mode,
        f1: counts.f1(),
        counts,
        object_dice,
        object_hausdorff,
        per_image,
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,tp,fp,fn,f1,object_dice,object_hausdorff\n");
        for m in &self.per_image {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                m.id, m.counts.tp, m.counts.fp, m.counts.fn_, m.f1, m.object_dice, m.object_hausdorff
            );
        }
        let _ = writeln!(
            s,
            "{}({}),{},{},{},{:.6},{:.6},{:.6}",
            self.split,
            self.aggregation.as_str(),
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.f1,
            self.object_dice,
            self.object_hausdorff
        );
        s
    }
}

/// Table with one row per split, in the F1 / ObjDice / ObjHaus layout.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut s = format!("{:<8} {:>8} {:>8} {:>10}  {}\n", "split", "F1", "ObjDice", "ObjHaus", "mode");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<8} {:>8.3} {:>8.3} {:>10.3}  {}",
            r.split,
            r.f1,
            r.object_dice,
            r.object_hausdorff,
            r.aggregation.as_str()
        );
    }
    s
}
