//! Binary morphology, connected components and exact distance transforms.

use std::collections::VecDeque;

use crate::raster::{BinaryMask, Raster};

/// Offsets `(dr, dc)` of a Euclidean disk of the given radius.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Dilation by a disk; pixels outside the raster are background.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let offsets = disk_offsets(radius);
    let mut out = BinaryMask::filled(h, w, false);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            for &(dr, dc) in &offsets {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    out.set(rr as usize, cc as usize, true);
                }
            }
        }
    }
    out
}

/// Erosion by a disk; pixels outside the raster are background, so objects
/// touching the border erode there.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let offsets = disk_offsets(radius);
    Raster::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && offsets.iter().all(|&(dr, dc)| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && mask.get(rr as usize, cc as usize)
            })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Labels the connected regions of `mask` as `1..=K` in raster order of
/// their first pixel. Returns the label raster and `K`.
pub fn label_components(mask: &BinaryMask, conn: Connectivity) -> (Raster<u32>, usize) {
    let (h, w) = mask.dims();
    let mut labels = Raster::filled(h, w, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || labels.get(r, c) != 0 {
                continue;
            }
            next += 1;
            labels.set(r, c, next);
            queue.push_back((r, c));
            while let Some((pr, pc)) = queue.pop_front() {
                for &(dr, dc) in conn.offsets() {
                    let (rr, cc) = (pr as isize + dr, pc as isize + dc);
                    if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                        continue;
                    }
                    let (rr, cc) = (rr as usize, cc as usize);
                    if mask.get(rr, cc) && labels.get(rr, cc) == 0 {
                        labels.set(rr, cc, next);
                        queue.push_back((rr, cc));
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Squared Euclidean distance from each pixel to the nearest `true` pixel,
/// `+inf` when there is none. Exact (Felzenszwalb–Huttenlocher lower envelope).
pub fn squared_distance_transform(sites: &BinaryMask) -> Raster<f64> {
    let (h, w) = sites.dims();
    let mut grid = sites.map(|s| if s { 0.0 } else { f64::INFINITY });
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            buf[r] = grid.get(r, c);
        }
        edt_1d(&buf[..h], &mut out[..h]);
        for r in 0..h {
            grid.set(r, c, out[r]);
        }
    }
    for r in 0..h {
        buf[..w].copy_from_slice(&grid.data()[r * w..(r + 1) * w]);
        edt_1d(&buf[..w], &mut out[..w]);
        grid.data_mut()[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        d.fill(f64::INFINITY);
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Foreground pixels with at least one 4-neighbour in the background;
/// pixels beyond the raster edge count as background.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    Raster::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_sq_dist(sites: &BinaryMask) -> Raster<f64> {
        let (h, w) = sites.dims();
        Raster::from_fn(h, w, |r, c| {
            let mut best = f64::INFINITY;
            for rr in 0..h {
                for cc in 0..w {
                    if sites.get(rr, cc) {
                        let d = (rr as f64 - r as f64).powi(2) + (cc as f64 - c as f64).powi(2);
                        best = best.min(d);
                    }
                }
            }
            best
        })
    }

    #[test]
    fn disk_radius_one_is_a_cross() {
        let mut d = disk_offsets(1);
        d.sort();
        assert_eq!(d, vec![(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]);
        assert_eq!(disk_offsets(2).len(), 13);
    }

    #[test]
    fn erosion_then_dilation_of_square() {
        let m = Raster::from_fn(9, 9, |r, c| (2..7).contains(&r) && (2..7).contains(&c));
        let e = erode(&m, 1);
        assert_eq!(e.count(), 9);
        let d = dilate(&m, 1);
        assert_eq!(d.count(), 25 + 4 * 5);
    }

    #[test]
    fn diagonal_pixels_join_only_under_eight_connectivity() {
        let m = Raster::new(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(label_components(&m, Connectivity::Four).1, 2);
        assert_eq!(label_components(&m, Connectivity::Eight).1, 1);
    }

    #[test]
    fn empty_sites_give_infinite_distance() {
        let d = squared_distance_transform(&BinaryMask::filled(3, 4, false));
        assert!(d.data().iter().all(|v| v.is_infinite()));
    }

    proptest! {
        #[test]
        fn distance_transform_matches_brute_force(
            h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<u8>(), 144)
        ) {
            let sites = Raster::from_fn(h, w, |r, c| bits[r * 12 + c] % 7 == 0);
            let fast = squared_distance_transform(&sites);
            let slow = brute_sq_dist(&sites);
            prop_assert_eq!(fast.data(), slow.data());
        }
    }
}
