//! Raster codecs: lossless PNG/BMP images and label maps, NPY float fields.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{io_err, Error, Result};
use crate::raster::{BinaryMask, InstanceMask, Raster, RgbImage};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save<P, C>(buf: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0).collect();
    Raster::new(h as usize, w as usize, data)
}

pub fn write_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let flat: Vec<u8> = img.data().iter().flat_map(|p| p.iter().copied()).collect();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, flat).expect("rgb buffer size");
    save(buf, path)
}

/// Reads an integer label raster without any intensity rescaling. Colour
/// images contribute their first channel.
pub fn read_labels(path: &Path) -> Result<InstanceMask> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u32> = match &img {
        DynamicImage::ImageLuma8(b) => b.pixels().map(|p| p.0[0] as u32).collect(),
        DynamicImage::ImageLuma16(b) => b.pixels().map(|p| p.0[0] as u32).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as u32).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as u32).collect(),
        DynamicImage::ImageRgb16(b) => b.pixels().map(|p| p.0[0] as u32).collect(),
        DynamicImage::ImageRgba16(b) => b.pixels().map(|p| p.0[0] as u32).collect(),
        other => other.to_rgb8().pixels().map(|p| p.0[0] as u32).collect(),
    };
    Ok(InstanceMask::new(Raster::new(h, w, data)?))
}

/// Writes labels as a 16-bit grayscale PNG.
pub fn write_labels(mask: &InstanceMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let mut data = Vec::with_capacity(h * w);
    for &l in mask.labels().data() {
        let v = u16::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a 16-bit raster")))?;
        data.push(v);
    }
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, data).expect("label buffer size");
    save(buf, path)
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let data = mask.data().iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let buf = ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, data).expect("mask buffer size");
    save(buf, path)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(read_labels(path)?.foreground())
}

/// Writes a 2-D `<f4` array in NPY 1.0 format.
pub fn write_npy_f32(field: &Raster<f32>, path: &Path) -> Result<()> {
    let (h, w) = field.dims();
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({h}, {w}), }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + 4 * h * w);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in field.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn read_npy_f32(path: &Path) -> Result<Raster<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |reason: &str| Error::Format {
        what: "npy file",
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("missing magic"));
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12),
        _ => return Err(bad("unsupported version")),
    };
    let header = std::str::from_utf8(bytes.get(start..start + header_len).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    if !header.contains("'<f4'") {
        return Err(bad("dtype must be <f4"));
    }
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran order not supported"));
    }
    let shape_start = header.find("'shape': (").ok_or_else(|| bad("no shape"))? + 10;
    let shape_end = header[shape_start..].find(')').ok_or_else(|| bad("no shape"))? + shape_start;
    let dims: Vec<usize> = header[shape_start..shape_end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(bad("expected a 2-D array"));
    }
    let payload = &bytes[start + header_len..];
    if payload.len() != 4 * dims[0] * dims[1] {
        return Err(bad("payload length"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Raster::new(dims[0], dims[1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_header_is_64_byte_aligned_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.npy");
        let f = Raster::from_fn(3, 5, |r, c| r as f32 - 0.5 * c as f32);
        write_npy_f32(&f, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let hl = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hl) % 64, 0);
        assert_eq!(read_npy_f32(&p).unwrap(), f);
    }

    #[test]
    fn labels_keep_values_above_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let m = InstanceMask::new(Raster::new(1, 3, vec![0, 300, 2]).unwrap());
        write_labels(&m, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), m);
    }
}
