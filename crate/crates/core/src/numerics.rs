//! Dense real tensors and the image primitives used by the attack.
//!
//! Images are stored row-major as `H×W×C`, so the flat index of pixel
//! `(row, col, channel)` is `(row * W + col) * C + channel`. Every value is
//! an `f64`: symmetric differences with `h = 1e-4` cancel about eight
//! significant digits, which single precision cannot spare.

use crate::error::{invalid, Error, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(invalid(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// One-dimensional tensor over `values`.
    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data viewed under another shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(invalid(format!("expected an H×W×C tensor, got shape {other:?}"))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::EmptyTensor);
        }
        // Scaled accumulation keeps huge or tiny entries from over/underflowing.
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return Ok(0.0);
        }
        let sum: f64 = self.data.iter().map(|v| (v / scale) * (v / scale)).sum();
        Ok(scale * sum.sqrt())
    }

    /// Sum of squared entries.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Squared Euclidean distance to `other`.
    pub fn squared_distance(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Elementwise clamp into `[lo, hi]`.
    pub fn project_box(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(invalid(format!("box bounds reversed: [{lo}, {hi}]")));
        }
        Ok(self.map(|v| v.clamp(lo, hi)))
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.data)
    }

    /// Per-channel bilinear resize of an `H×W×C` tensor with corner-aligned
    /// sampling: output index `i` reads source coordinate
    /// `i * (src - 1) / (dst - 1)`, and a size-1 axis reads coordinate 0.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (h, w, c) = self.dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(invalid("resize to zero-size output"));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::EmptyTensor);
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let rows = axis_samples(h, out_h);
        let cols = axis_samples(w, out_w);
        let mut out = vec![0.0; out_h * out_w * c];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                for ch in 0..c {
                    let at = |y: usize, x: usize| self.data[(y * w + x) * c + ch];
                    let top = lerp(at(ry.lo, rx.lo), at(ry.lo, rx.hi), rx.frac);
                    let bottom = lerp(at(ry.hi, rx.lo), at(ry.hi, rx.hi), rx.frac);
                    out[(oy * out_w + ox) * c + ch] = lerp(top, bottom, ry.frac);
                }
            }
        }
        Tensor::new(vec![out_h, out_w, c], out)
    }

    /// Non-overlapping `k×k` max pooling of `|value|` per channel. Partial
    /// windows at the bottom and right edges are pooled over what remains.
    pub fn maxpool_abs(&self, k: usize) -> Result<Tensor> {
        let (h, w, c) = self.dims3()?;
        if k == 0 {
            return Err(invalid("pooling kernel must be at least 1"));
        }
        let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
        let mut out = vec![0.0f64; oh * ow * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let slot = &mut out[((y / k) * ow + x / k) * c + ch];
                    *slot = slot.max(self.data[(y * w + x) * c + ch].abs());
                }
            }
        }
        Tensor::new(vec![oh, ow, c], out)
    }
}

/// Index of the largest value, ties toward the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `a + t (b - a)`, kept inside `[min(a,b), max(a,b)]`. Equal endpoints
/// return `a` exactly, so constant fields survive resizing bit-for-bit.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        return a;
    }
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Where one output index samples the source axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisSample {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn axis_samples(src: usize, dst: usize) -> Vec<AxisSample> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 || src == 1 {
                0.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            AxisSample {
                lo,
                hi,
                frac: if hi == lo { 0.0 } else { pos - lo as f64 },
            }
        })
        .collect()
}

/// For each source index, the output indices it feeds and their weights.
/// This is the transpose of [`axis_samples`] and describes one column of
/// the (separable) resize operator.
pub(crate) fn axis_footprints(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let mut feet = vec![Vec::new(); src];
    if src == dst {
        for (i, f) in feet.iter_mut().enumerate() {
            f.push((i, 1.0));
        }
        return feet;
    }
    for (o, s) in axis_samples(src, dst).into_iter().enumerate() {
        if s.hi == s.lo {
            feet[s.lo].push((o, 1.0));
            continue;
        }
        if s.frac < 1.0 {
            feet[s.lo].push((o, 1.0 - s.frac));
        }
        if s.frac > 0.0 {
            feet[s.hi].push((o, s.frac));
        }
    }
    feet
}
