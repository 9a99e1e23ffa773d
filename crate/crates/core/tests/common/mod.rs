//! Brute-force reference implementations and fixture generators shared by
//! the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gradeprompt::{InstanceMask, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Px = (usize, usize);

fn objects(m: &InstanceMask) -> BTreeMap<u32, BTreeSet<Px>> {
    let (h, w) = m.dims();
    let mut out: BTreeMap<u32, BTreeSet<Px>> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            let l = m.labels().get(r, c);
            if l > 0 {
                out.entry(l).or_default().insert((r, c));
            }
        }
    }
    out
}

fn overlap(a: &BTreeSet<Px>, b: &BTreeSet<Px>) -> usize {
    a.intersection(b).count()
}

/// `(tp, fp, fn)` by exhaustive greedy matching over all pairs.
pub fn f1_counts(pred: &InstanceMask, gt: &InstanceMask) -> (usize, usize, usize) {
    let (p, g) = (objects(pred), objects(gt));
    let mut free_p: BTreeSet<u32> = p.keys().copied().collect();
    let mut free_g: BTreeSet<u32> = g.keys().copied().collect();
    let mut tp = 0;
    loop {
        let mut best: Option<(usize, u32, u32)> = None;
        for &gi in &free_g {
            for &pi in &free_p {
                let n = overlap(&p[&pi], &g[&gi]);
                if 2 * n <= g[&gi].len() {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bn, bg, bp)) => n > bn || (n == bn && (gi, pi) < (bg, bp)),
                };
                if better {
                    best = Some((n, gi, pi));
                }
            }
        }
        let Some((_, gi, pi)) = best else { break };
        free_g.remove(&gi);
        free_p.remove(&pi);
        tp += 1;
    }
    (tp, p.len() - tp, g.len() - tp)
}

fn best_match<'a>(obj: &BTreeSet<Px>, others: &'a BTreeMap<u32, BTreeSet<Px>>) -> Option<&'a BTreeSet<Px>> {
    let mut best: Option<(usize, &BTreeSet<Px>)> = None;
    for set in others.values() {
        let n = overlap(obj, set);
        // keys iterate in ascending order, so strict `>` keeps the lower label
        if n > 0 && best.map_or(true, |(bn, _)| n > bn) {
            best = Some((n, set));
        }
    }
    best.map(|(_, s)| s)
}

fn side_mean(values: &[(usize, f64)]) -> Option<f64> {
    let den: usize = values.iter().map(|v| v.0).sum();
    (den > 0).then(|| values.iter().map(|&(a, v)| a as f64 * v).sum::<f64>() / den as f64)
}

fn combine(g: Option<f64>, s: Option<f64>, both_empty: f64) -> f64 {
    match (g, s) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => both_empty,
    }
}

pub fn object_dice(pred: &InstanceMask, gt: &InstanceMask) -> f64 {
    let (p, g) = (objects(pred), objects(gt));
    let side = |from: &BTreeMap<u32, BTreeSet<Px>>, to: &BTreeMap<u32, BTreeSet<Px>>| -> Vec<(usize, f64)> {
        from.values()
            .map(|o| {
                let d = best_match(o, to).map_or(0.0, |m| 2.0 * overlap(o, m) as f64 / (o.len() + m.len()) as f64);
                (o.len(), d)
            })
            .collect()
    };
    combine(side_mean(&side(&g, &p)), side_mean(&side(&p, &g)), 1.0)
}

fn boundary(set: &BTreeSet<Px>, h: usize, w: usize) -> Vec<Px> {
    set.iter()
        .copied()
        .filter(|&(r, c)| {
            let nb = [
                (r as isize - 1, c as isize),
                (r as isize + 1, c as isize),
                (r as isize, c as isize - 1),
                (r as isize, c as isize + 1),
            ];
            nb.iter().any(|&(rr, cc)| {
                rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w || !set.contains(&(rr as usize, cc as usize))
            })
        })
        .collect()
}

fn directed(a: &[Px], b: &[Px]) -> f64 {
    a.iter()
        .map(|&(r, c)| {
            b.iter()
                .map(|&(rr, cc)| {
                    let (dr, dc) = (r as i64 - rr as i64, c as i64 - cc as i64);
                    (dr * dr + dc * dc) as f64
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

pub fn object_hausdorff(pred: &InstanceMask, gt: &InstanceMask) -> f64 {
    let (h, w) = gt.dims();
    let penalty = ((h * h + w * w) as f64).sqrt();
    let (p, g) = (objects(pred), objects(gt));
    let union = |m: &BTreeMap<u32, BTreeSet<Px>>| -> BTreeSet<Px> { m.values().flatten().copied().collect() };
    let side = |from: &BTreeMap<u32, BTreeSet<Px>>, to: &BTreeMap<u32, BTreeSet<Px>>| -> Vec<(usize, f64)> {
        let all = union(to);
        from.values()
            .map(|o| {
                let d = if to.is_empty() {
                    penalty
                } else {
                    let target = best_match(o, to).unwrap_or(&all);
                    let (a, b) = (boundary(o, h, w), boundary(target, h, w));
                    directed(&a, &b).max(directed(&b, &a))
                };
                (o.len(), d)
            })
            .collect()
    };
    combine(side_mean(&side(&g, &p)), side_mean(&side(&p, &g)), 0.0)
}

/// Random instance map with up to `max_objects` painted rectangles and
/// scattered pixels; labels are sparse so id order differs from area order.
pub fn random_instances(rng: &mut impl Rng, h: usize, w: usize, max_objects: u32) -> InstanceMask {
    let n = rng.gen_range(0..=max_objects);
    let mut labels = Raster::filled(h, w, 0u32);
    for k in 1..=n {
        let id = 3 * k + rng.gen_range(0..3);
        let (rh, rw) = (rng.gen_range(1..=h.min(12)), rng.gen_range(1..=w.min(12)));
        let (r0, c0) = (rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw));
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                labels.set(r, c, id);
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            labels.set(rng.gen_range(0..h), rng.gen_range(0..w), id);
        }
    }
    InstanceMask::new(labels)
}

/// Shifts and relabels `gt`, sometimes dropping an object, so predictions
/// partially match.
pub fn perturb(rng: &mut impl Rng, gt: &InstanceMask) -> InstanceMask {
    let (h, w) = gt.dims();
    let (dr, dc) = (rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2));
    let drop = gt.object_ids().get(rng.gen_range(0..gt.num_objects().max(1))).copied();
    let drop = if rng.gen_bool(0.3) { drop } else { None };
    let offset = rng.gen_range(1..50);
    InstanceMask::new(Raster::from_fn(h, w, |r, c| {
        let (sr, sc) = (r as i64 - dr, c as i64 - dc);
        if sr < 0 || sc < 0 || sr >= h as i64 || sc >= w as i64 {
            return 0;
        }
        let l = gt.labels().get(sr as usize, sc as usize);
        if l == 0 || Some(l) == drop {
            0
        } else {
            l * 7 % 64 + offset
        }
    }))
}

/// Seeded pair `(pred, gt)` no larger than 32×32 with at most 5 objects each.
pub fn random_pair(seed: u64) -> (InstanceMask, InstanceMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(4..=32), rng.gen_range(4..=32));
    let gt = random_instances(&mut rng, h, w, 5);
    let pred = if rng.gen_bool(0.5) {
        perturb(&mut rng, &gt)
    } else {
        random_instances(&mut rng, h, w, 5)
    };
    (pred, gt)
}
