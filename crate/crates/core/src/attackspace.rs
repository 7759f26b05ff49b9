//! Reduced-dimension noise `y`, its decoder `D(y)`, the stage schedule that
//! grows `y` during an attack, and the importance map used to bias which
//! coordinates get updated.
//!
//! `D` is a corner-aligned bilinear upscale from the stage grid to the image
//! grid, applied per channel. It is linear, so the effect of moving one
//! coordinate of `y` is a fixed sparse column of `D` (see
//! [`AttackSpace::column`]).

use crate::error::{invalid, Error, Result};
use crate::numerics::{axis_footprints, Tensor};

/// Added to every importance cell before normalizing, so no coordinate is
/// ever unreachable.
pub const IMPORTANCE_FLOOR: f64 = 1e-12;

/// One stage of the schedule: a `height×width` noise grid (channels follow
/// the image) that takes over at `start_iteration`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub height: usize,
    pub width: usize,
    pub start_iteration: usize,
}

impl Stage {
    pub fn new(height: usize, width: usize, start_iteration: usize) -> Self {
        Self {
            height,
            width,
            start_iteration,
        }
    }
}

/// Sampling distribution over the current attack-space coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    shape: [usize; 3],
    probs: Vec<f64>,
}

impl ImportanceMap {
    pub fn uniform(shape: [usize; 3]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Binary PGM (P5) with channels tiled left to right, scaled so the
    /// largest probability is white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let [h, w, c] = self.shape;
        let max = self.probs.iter().cloned().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", w * c, h).into_bytes();
        for y in 0..h {
            for ch in 0..c {
                for x in 0..w {
                    let p = self.probs[(y * w + x) * c + ch];
                    out.push(if max > 0.0 { (p / max * 255.0).round() as u8 } else { 0 });
                }
            }
        }
        out
    }
}

/// Importance from accumulated full-resolution noise: `|Δx|`, max-pooled
/// per channel with a `kernel×kernel` window, bilinearly resized to
/// `out_h×out_w`, floored and normalized. All-zero noise gives the uniform
/// distribution.
pub fn importance_map(delta_x: &Tensor, kernel: usize, out_h: usize, out_w: usize) -> Result<ImportanceMap> {
    let (_, _, c) = delta_x.dims3()?;
    if delta_x.data().iter().all(|&v| v == 0.0) {
        return Ok(ImportanceMap::uniform([out_h, out_w, c]));
    }
    let pooled = delta_x.maxpool_abs(kernel)?;
    let up = pooled.bilinear_resize(out_h, out_w)?;
    let mut probs: Vec<f64> = up.into_data().into_iter().map(|v| v + IMPORTANCE_FLOOR).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok(ImportanceMap {
        shape: [out_h, out_w, c],
        probs,
    })
}

/// Default pooling kernel: the image split into an 8×8 grid of regions.
pub fn default_importance_kernel(height: usize, width: usize) -> usize {
    (height.min(width) / 8).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpace {
    stages: Vec<Stage>,
    current: usize,
    target: [usize; 3],
    y: Tensor,
    importance_from_stage: Option<usize>,
    importance_kernel: usize,
    importance: ImportanceMap,
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
}

impl AttackSpace {
    /// Noise lives directly in image space; no importance sampling.
    pub fn full(target_shape: &[usize]) -> Result<Self> {
        let [h, w, _] = shape3(target_shape)?;
        Self::new(target_shape, vec![Stage::new(h, w, 0)], None)
    }

    /// Staged schedule. `importance_from_stage` is the first stage index at
    /// which coordinates are importance-sampled (`None`: never).
    pub fn new(target_shape: &[usize], stages: Vec<Stage>, importance_from_stage: Option<usize>) -> Result<Self> {
        let target = shape3(target_shape)?;
        let first = *stages.first().ok_or_else(|| invalid("attack space needs at least one stage"))?;
        if first.start_iteration != 0 {
            return Err(invalid("first stage must start at iteration 0"));
        }
        for s in &stages {
            if s.height == 0 || s.width == 0 || s.height > target[0] || s.width > target[1] {
                return Err(invalid(format!(
                    "stage {}×{} does not fit image {}×{}",
                    s.height, s.width, target[0], target[1]
                )));
            }
        }
        for pair in stages.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.height < a.height || b.width < a.width || b.height * b.width <= a.height * a.width {
                return Err(invalid("stage dimensions must strictly increase"));
            }
            if b.start_iteration <= a.start_iteration {
                return Err(invalid("stage start iterations must strictly increase"));
            }
        }
        let mut space = Self {
            stages,
            current: 0,
            target,
            y: Tensor::zeros(&[first.height, first.width, target[2]]),
            importance_from_stage,
            importance_kernel: default_importance_kernel(target[0], target[1]),
            importance: ImportanceMap::uniform([first.height, first.width, target[2]]),
            rows: Vec::new(),
            cols: Vec::new(),
        };
        space.refresh_footprints();
        Ok(space)
    }

    /// Overrides the pooling kernel used by [`AttackSpace::update_importance`].
    pub fn with_importance_kernel(mut self, kernel: usize) -> Result<Self> {
        if kernel == 0 {
            return Err(invalid("importance kernel must be ≥ 1"));
        }
        self.importance_kernel = kernel;
        Ok(self)
    }

    fn refresh_footprints(&mut self) {
        let s = self.stages[self.current];
        self.rows = axis_footprints(s.height, self.target[0]);
        self.cols = axis_footprints(s.width, self.target[1]);
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn current_stage(&self) -> usize {
        self.current
    }

    pub fn target_shape(&self) -> [usize; 3] {
        self.target
    }

    /// `[height, width, channels]` of the current noise grid.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.stages[self.current];
        [s.height, s.width, self.target[2]]
    }

    /// Number of attack-space coordinates in the current stage.
    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest coordinate count over all stages.
    pub fn min_len(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.height * s.width * self.target[2])
            .min()
            .unwrap_or(0)
    }

    /// True when the current grid is the image grid and `D` is the identity.
    pub fn is_identity(&self) -> bool {
        let [h, w, _] = self.dims();
        (h, w) == (self.target[0], self.target[1])
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn y_mut(&mut self) -> &mut Tensor {
        &mut self.y
    }

    pub fn set_y(&mut self, y: Tensor) -> Result<()> {
        self.check_y(&y)?;
        self.y = y;
        Ok(())
    }

    fn check_y(&self, y: &Tensor) -> Result<()> {
        if y.shape() != self.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.dims().to_vec(),
                actual: y.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `D(y)`: the full-resolution noise for a current-stage `y`.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        self.check_y(y)?;
        if self.is_identity() {
            return Ok(y.clone());
        }
        y.bilinear_resize(self.target[0], self.target[1])
    }

    /// Column `coord` of `D`: the image entries moved by a unit change of
    /// that coordinate, as `(flat image index, weight)`.
    pub fn column(&self, coord: usize) -> Result<Vec<(usize, f64)>> {
        let [_, w, c] = self.dims();
        if coord >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: coord,
                dim: self.len(),
            });
        }
        let (row, col, ch) = (coord / (w * c), (coord / c) % w, coord % c);
        let [_, tw, tc] = self.target;
        let mut out = Vec::with_capacity(self.rows[row].len() * self.cols[col].len());
        for &(oy, wy) in &self.rows[row] {
            for &(ox, wx) in &self.cols[col] {
                out.push(((oy * tw + ox) * tc + ch, wy * wx));
            }
        }
        Ok(out)
    }

    /// Iteration at which the next stage takes over, if any.
    pub fn next_stage_start(&self) -> Option<usize> {
        self.stages.get(self.current + 1).map(|s| s.start_iteration)
    }

    /// Moves to the next stage, carrying `y` over by a grid-to-grid bilinear
    /// resize. The importance map resets to uniform until the next
    /// [`AttackSpace::update_importance`].
    pub fn upscale_stage(&mut self) -> Result<()> {
        let next = *self
            .stages
            .get(self.current + 1)
            .ok_or_else(|| invalid("no further stage to upscale to"))?;
        self.y = self.y.bilinear_resize(next.height, next.width)?;
        self.current += 1;
        self.refresh_footprints();
        self.importance = ImportanceMap::uniform(self.dims());
        Ok(())
    }

    /// Whether coordinates in the current stage are importance-sampled.
    pub fn importance_active(&self) -> bool {
        self.importance_from_stage.is_some_and(|s| self.current >= s)
    }

    pub fn importance(&self) -> &ImportanceMap {
        &self.importance
    }

    /// Recomputes the importance map from full-resolution noise `Δx`.
    pub fn update_importance(&mut self, delta_x: &Tensor) -> Result<&ImportanceMap> {
        if delta_x.shape() != self.target {
            return Err(Error::ShapeMismatch {
                expected: self.target.to_vec(),
                actual: delta_x.shape().to_vec(),
            });
        }
        let [h, w, _] = self.dims();
        self.importance = importance_map(delta_x, self.importance_kernel, h, w)?;
        Ok(&self.importance)
    }
}

fn shape3(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok([h, w, c]),
        _ => Err(Error::InvalidShape(shape.to_vec())),
    }
}
