//! Image/label loading.
//!
//! IDX files (the MNIST distribution format) are big-endian:
//!
//! ```text
//! images: u32 magic 0x00000803, u32 count, u32 rows, u32 cols, count*rows*cols bytes
//! labels: u32 magic 0x00000801, u32 count, count bytes
//! ```
//!
//! Pixel bytes are divided by 255 so every image lives in `[0, 1]`.
//! Single tensors can be stored losslessly with the IDX `f64` type code
//! (`0x0E`): magic `0x00000E<rank>`, one u32 per dimension, then the values.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
const F64_TYPE: u32 = 0x0E;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `H×W×C` with every pixel in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::UnexpectedEof)?;
        let chunk = self.bytes.get(self.pos..end).ok_or(Error::UnexpectedEof)?;
        self.pos = end;
        Ok(chunk)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }
}

/// Parses an IDX image file into `rows×cols×1` tensors.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMAGE_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let per = rows * cols;
    let payload = r.take(count.checked_mul(per).ok_or(Error::UnexpectedEof)?)?;
    payload
        .chunks(per.max(1))
        .take(count)
        .map(|px| Tensor::new(vec![rows, cols, 1], px.iter().map(|&b| f64::from(b) / 255.0).collect()))
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.take(count)?.iter().map(|&b| usize::from(b)).collect())
}

/// Inverse of [`parse_idx_images`]. Pixels are rounded to the nearest byte.
pub fn write_idx_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first() {
        Some(t) => {
            let (h, w, _) = t.dims3()?;
            (h, w)
        }
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.shape() != [rows, cols, 1] {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, cols, 1],
                actual: img.shape().to_vec(),
            });
        }
        out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| invalid(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

/// Lossless big-endian IDX encoding of one tensor.
pub fn write_idx_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape().len()).map_err(|_| invalid("rank above 255"))?;
    let mut out = Vec::with_capacity(4 + 4 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(&((F64_TYPE << 8) | u32::from(rank)).to_be_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| invalid("dimension above u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn parse_idx_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.u32()?;
    if magic >> 8 != F64_TYPE || magic & 0xff == 0 {
        return Err(Error::BadMagic {
            expected: F64_TYPE << 8,
            found: magic,
        });
    }
    let shape = (0..magic & 0xff).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let payload = r.take(n.checked_mul(8).ok_or(Error::UnexpectedEof)?)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    Tensor::new(shape, data)
}

/// Zips images with labels, rejecting labels outside `0..classes`.
pub fn pair(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Vec<LabeledImage>> {
    if images.len() != labels.len() {
        return Err(invalid(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    images
        .into_iter()
        .zip(labels)
        .map(|(image, label)| {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            Ok(LabeledImage { image, label })
        })
        .collect()
}

/// Reads an image file and a label file from disk and pairs them.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Vec<LabeledImage>> {
    let imgs = parse_idx_images(&read_file(images)?)?;
    let lbls = parse_idx_labels(&read_file(labels)?)?;
    pair(imgs, lbls, classes)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Deterministic bar-pattern dataset: class `j` is a bright bar, horizontal
/// for even `j` and vertical for odd `j`, at one of `ceil(k/2)` evenly
/// spaced offsets, jittered by up to one pixel, over uniform `[0, 0.1]`
/// background noise. Labels cycle `0, 1, …, k-1` so classes stay balanced.
pub fn synthetic_dataset(seed: u64, n: usize, side: usize, k: usize) -> Result<Vec<LabeledImage>> {
    if side == 0 || k == 0 {
        return Err(invalid("synthetic dataset needs side ≥ 1 and k ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = k.div_ceil(2);
    let thickness = (side / 8).max(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let slot = label / 2;
        let centre = ((slot + 1) * side) as f64 / (slots + 1) as f64;
        let jitter: i64 = if side >= 8 { rng.gen_range(-1..=1) } else { 0 };
        let start = (centre as i64 - thickness as i64 / 2 + jitter).clamp(0, (side - thickness) as i64) as usize;
        let mut data = vec![0.0; side * side];
        for (idx, px) in data.iter_mut().enumerate() {
            let (row, col) = (idx / side, idx % side);
            let along = if label.is_multiple_of(2) { row } else { col };
            let bar = if (start..start + thickness).contains(&along) { 0.9 } else { 0.0 };
            *px = (bar + rng.gen_range(0.0..0.1f64)).clamp(0.0, 1.0);
        }
        out.push(LabeledImage {
            image: Tensor::new(vec![side, side, 1], data)?,
            label,
        });
    }
    Ok(out)
}
