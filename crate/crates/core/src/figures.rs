//! Static figure rendering: heat-map overlays, instance outlines, panels and
//! loss curves, all as plain RGB rasters.

use crate::raster::{InstanceMask, Raster, RgbImage};

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const BLACK: [u8; 3] = [0, 0, 0];

/// Blue→cyan→yellow→red ramp for values in `[0, 1]` (clamped).
pub fn heat_color(v: f32) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let stops: [[f32; 3]; 4] = [[0.0, 0.0, 0.5], [0.0, 0.9, 1.0], [1.0, 0.9, 0.0], [0.6, 0.0, 0.0]];
    let x = v * 3.0;
    let i = (x.floor() as usize).min(2);
    let t = x - i as f32;
    let (a, b) = (stops[i], stops[i + 1]);
    std::array::from_fn(|k| ((a[k] + (b[k] - a[k]) * t) * 255.0).round() as u8)
}

pub fn heat_to_rgb(heat: &Raster<f32>) -> RgbImage {
    heat.map(heat_color)
}

/// `(1 - alpha) * image + alpha * colour(heat)`.
pub fn blend_heat(image: &RgbImage, heat: &Raster<f32>, alpha: f32) -> crate::Result<RgbImage> {
    image.zip_map(heat, |p, h| {
        let c = heat_color(h);
        std::array::from_fn(|k| (p[k] as f32 * (1.0 - alpha) + c[k] as f32 * alpha).round() as u8)
    })
}

/// Foreground pixels with a 4-neighbour carrying a different label.
pub fn instance_boundary(mask: &InstanceMask) -> Raster<bool> {
    let l = mask.labels();
    let (h, w) = l.dims();
    Raster::from_fn(h, w, |r, c| {
        let v = l.get(r, c);
        if v == 0 {
            return false;
        }
        let differs = |rr: usize, cc: usize| l.get(rr, cc) != v;
        (r > 0 && differs(r - 1, c))
            || (r + 1 < h && differs(r + 1, c))
            || (c > 0 && differs(r, c - 1))
            || (c + 1 < w && differs(r, c + 1))
    })
}

/// Paints instance outlines onto a copy of `image`.
pub fn draw_outlines(image: &RgbImage, mask: &InstanceMask, color: [u8; 3]) -> crate::Result<RgbImage> {
    image.zip_map(&instance_boundary(mask), |p, b| if b { color } else { p })
}

/// Distinct colour per instance id, black background.
pub fn label_colors(mask: &InstanceMask) -> RgbImage {
    mask.labels().map(|l| {
        if l == 0 {
            BLACK
        } else {
            // Golden-ratio hue walk keeps neighbouring ids apart.
            let hue = (l as f32 * 0.618_034).fract();
            hsv(hue, 0.65, 0.95)
        }
    })
}

fn hsv(h: f32, s: f32, v: f32) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Panels side by side, top-aligned, separated by `gap` white columns.
pub fn hstack(panels: &[RgbImage], gap: usize) -> RgbImage {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<usize>() + gap * panels.len().saturating_sub(1);
    let mut out = Raster::filled(h, w, WHITE);
    let mut x0 = 0;
    for p in panels {
        for r in 0..p.height() {
            for c in 0..p.width() {
                out.set(r, x0 + c, p.get(r, c));
            }
        }
        x0 += p.width() + gap;
    }
    out
}

/// Panels stacked vertically, left-aligned.
pub fn vstack(rows: &[RgbImage], gap: usize) -> RgbImage {
    let w = rows.iter().map(|p| p.width()).max().unwrap_or(0);
    let h = rows.iter().map(|p| p.height()).sum::<usize>() + gap * rows.len().saturating_sub(1);
    let mut out = Raster::filled(h, w, WHITE);
    let mut y0 = 0;
    for p in rows {
        for r in 0..p.height() {
            for c in 0..p.width() {
                out.set(y0 + r, c, p.get(r, c));
            }
        }
        y0 += p.height() + gap;
    }
    out
}

/// Nearest-neighbour downscale by an integer factor.
pub fn downscale(image: &RgbImage, factor: usize) -> RgbImage {
    let f = factor.max(1);
    let (h, w) = image.dims();
    Raster::from_fn(h.div_ceil(f), w.div_ceil(f), |r, c| image.get(r * f, c * f))
}

/// Line chart of several `(x, y)` series on shared axes. No text; the axes
/// span the data range, with y starting at zero when all values are
/// non-negative.
pub fn line_chart(series: &[(Vec<(f64, f64)>, [u8; 3])], width: usize, height: usize) -> RgbImage {
    let mut img = Raster::filled(height, width, WHITE);
    let margin = 12usize;
    if width <= 2 * margin || height <= 2 * margin {
        return img;
    }
    let pts = series.iter().flat_map(|(s, _)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (pw, ph) = ((width - 2 * margin - 1) as f64, (height - 2 * margin - 1) as f64);
    let axis = [90, 90, 90];
    for c in margin..width - margin {
        img.set(height - margin - 1, c, axis);
    }
    for r in margin..height - margin {
        img.set(r, margin, axis);
    }
    if !x0.is_finite() {
        return img;
    }
    if y0 >= 0.0 {
        y0 = 0.0;
    }
    let xs = if x1 > x0 { x1 - x0 } else { 1.0 };
    let ys = if y1 > y0 { y1 - y0 } else { 1.0 };
    let to_px = |x: f64, y: f64| {
        let px = margin as f64 + (x - x0) / xs * pw;
        let py = (height - margin - 1) as f64 - (y - y0) / ys * ph;
        (px.round() as i64, py.round() as i64)
    };
    for (s, color) in series {
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in s.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let p = to_px(x, y);
            match prev {
                Some(q) => draw_line(&mut img, q, p, *color),
                None => draw_line(&mut img, p, p, *color),
            }
            prev = Some(p);
        }
    }
    img
}

/// Bresenham segment, clipped to the raster.
fn draw_line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    let (h, w) = (img.height() as i64, img.width() as i64);
    loop {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.set(y as usize, x as usize, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(heat_color(0.0), [0, 0, 128]);
        assert_eq!(heat_color(1.0), [153, 0, 0]);
        assert_eq!(heat_color(f32::NAN), heat_color(0.0));
        assert_eq!(heat_color(7.0), heat_color(1.0));
    }

    #[test]
    fn boundary_of_square_is_its_ring() {
        let labels = Raster::from_fn(6, 6, |r, c| u32::from((1..5).contains(&r) && (1..5).contains(&c)));
        let b = instance_boundary(&InstanceMask::new(labels));
        assert_eq!(b.count(), 12);
        assert!(!b.get(2, 2) && b.get(1, 1) && !b.get(0, 0));
    }

    #[test]
    fn touching_instances_both_get_outlines() {
        let labels = Raster::from_fn(1, 4, |_, c| if c < 2 { 1 } else { 2 });
        let b = instance_boundary(&InstanceMask::new(labels));
        assert_eq!(b.data(), &[false, true, true, false]);
    }

    #[test]
    fn stacking_dims() {
        let a = Raster::filled(3, 2, BLACK);
        let b = Raster::filled(5, 4, BLACK);
        let h = hstack(&[a.clone(), b.clone()], 1);
        assert_eq!(h.dims(), (5, 7));
        assert_eq!(h.get(4, 0), WHITE);
        assert_eq!(h.get(4, 3), BLACK);
        assert_eq!(vstack(&[a, b], 2).dims(), (10, 4));
    }

    #[test]
    fn chart_draws_the_series() {
        let s = vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)];
        let img = line_chart(&[(s, [255, 0, 0])], 100, 60);
        assert!(img.data().iter().any(|&p| p == [255, 0, 0]));
        let empty = line_chart(&[], 100, 60);
        assert!(!empty.data().iter().any(|&p| p == [255, 0, 0]));
    }
}
