//! 2-D rasters: RGB images, binary masks, instance label maps and real fields.

use std::collections::BTreeMap;

use gradeprompt_autograd::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster<P> {
    height: usize,
    width: usize,
    data: Vec<P>,
}

pub type BinaryMask = Raster<bool>;
pub type RgbImage = Raster<[u8; 3]>;

impl<P: Copy> Raster<P> {
    pub fn new(height: usize, width: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                op: "raster",
                expected: vec![height, width],
                got: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: P) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<P> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> P {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: P) {
        self.data[r * self.width + c] = v;
    }

    pub fn map<Q: Copy>(&self, f: impl Fn(P) -> Q) -> Raster<Q> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn same_dims<Q>(&self, other: &Raster<Q>, op: &'static str) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape {
                op,
                expected: vec![self.height, self.width],
                got: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// `h×w` window with top-left corner at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in row..row + h {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Rotation by `k` quarter turns clockwise: pixel `(r, c)` moves to
    /// `(c, H-1-r)` per turn.
    pub fn rotate_quarter(&self, k: u8) -> Self {
        let mut out = self.clone();
        for _ in 0..(k % 4) {
            let (h, w) = (out.height, out.width);
            let mut data = out.data.clone();
            for r in 0..h {
                for c in 0..w {
                    data[c * h + (h - 1 - r)] = out.data[r * w + c];
                }
            }
            out = Self {
                height: w,
                width: h,
                data,
            };
        }
        out
    }

    pub fn zip_map<Q: Copy, R: Copy>(&self, other: &Raster<Q>, f: impl Fn(P, Q) -> R) -> Result<Raster<R>> {
        self.same_dims(other, "zip")?;
        Ok(Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

impl<T: Scalar> Raster<T> {
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([self.height, self.width], self.data.clone()).expect("raster dims")
    }

    /// Interprets the last two axes of a tensor with exactly `H·W` elements.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
            return Err(Error::Shape {
                op: "raster from tensor",
                expected: vec![1, 0, 0],
                got: s.to_vec(),
            });
        }
        Self::new(s[s.len() - 2], s[s.len() - 1], t.data().to_vec())
    }
}

/// Channel means and standard deviations applied to network inputs.
pub const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl RgbImage {
    /// `[3, H, W]` tensor scaled to `[0,1]` and standardised per channel.
    pub fn to_normalized_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.len();
        let mut data = vec![T::zero(); 3 * plane];
        for (i, px) in self.data.iter().enumerate() {
            for ch in 0..3 {
                data[ch * plane + i] = T::of((px[ch] as f64 / 255.0 - RGB_MEAN[ch]) / RGB_STD[ch]);
            }
        }
        Tensor::new([3, self.height, self.width], data).expect("rgb dims")
    }
}

/// Integer-labelled segmentation: 0 is background, every positive label is
/// one object. Connectivity is never re-derived from the labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask(Raster<u32>);

impl InstanceMask {
    pub fn new(labels: Raster<u32>) -> Self {
        Self(labels)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self(Raster::filled(height, width, 0))
    }

    pub fn labels(&self) -> &Raster<u32> {
        &self.0
    }

    pub fn labels_mut(&mut self) -> &mut Raster<u32> {
        &mut self.0
    }

    pub fn into_labels(self) -> Raster<u32> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    /// Sorted distinct positive labels.
    pub fn object_ids(&self) -> Vec<u32> {
        self.areas().into_keys().collect()
    }

    pub fn num_objects(&self) -> usize {
        self.areas().len()
    }

    /// Pixel count per positive label.
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for &l in self.0.data() {
            if l > 0 {
                *m.entry(l).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn foreground(&self) -> BinaryMask {
        self.0.map(|l| l > 0)
    }

    pub fn object(&self, id: u32) -> BinaryMask {
        self.0.map(|l| l == id)
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self(self.0.crop(row, col, h, w)?))
    }

    pub fn rotate_quarter(&self, k: u8) -> Self {
        Self(self.0.rotate_quarter(k))
    }

    /// Renumbers objects to `1..=K` in order of first appearance.
    pub fn relabel_sequential(&self) -> Self {
        let mut map = BTreeMap::new();
        let mut next = 0u32;
        let mut out = self.0.clone();
        for l in out.data_mut() {
            if *l > 0 {
                *l = *map.entry(*l).or_insert_with(|| {
                    next += 1;
                    next
                });
            }
        }
        Self(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_reads_window() {
        let r = Raster::from_fn(4, 5, |r, c| r * 10 + c);
        let c = r.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.data(), &[12, 13, 14, 22, 23, 24]);
        assert!(r.crop(3, 0, 2, 1).is_err());
    }

    #[test]
    fn quarter_turn_maps_coordinates() {
        let n = 5;
        let r = Raster::from_fn(n, n, |r, c| (r, c));
        let q = r.rotate_quarter(1);
        for row in 0..n {
            for col in 0..n {
                assert_eq!(q.get(col, n - 1 - row), (row, col));
            }
        }
        assert_eq!(r.rotate_quarter(4), r);
        assert_eq!(r.rotate_quarter(2).rotate_quarter(2), r);
    }

    #[test]
    fn non_square_rotation_swaps_dims() {
        let r = Raster::from_fn(2, 3, |r, c| r * 3 + c);
        let q = r.rotate_quarter(1);
        assert_eq!(q.dims(), (3, 2));
        assert_eq!(q.rotate_quarter(3), r);
    }

    #[test]
    fn relabel_is_sequential_by_first_appearance() {
        let m = InstanceMask::new(Raster::new(1, 5, vec![7, 0, 3, 7, 9]).unwrap());
        assert_eq!(m.relabel_sequential().labels().data(), &[1, 0, 2, 1, 3]);
        assert_eq!(m.object_ids(), vec![3, 7, 9]);
    }

    #[test]
    fn normalization_uses_channel_statistics() {
        let img = RgbImage::filled(1, 1, [255, 0, 128]);
        let t = img.to_normalized_tensor::<f64>();
        assert!((t.data()[0] - (1.0 - 0.485) / 0.229).abs() < 1e-12);
        assert!((t.data()[1] - (-0.456 / 0.224)).abs() < 1e-12);
    }
}
