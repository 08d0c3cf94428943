//! Priority maps, fixation points and Gaussian fixation blurring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObserverId(pub u32);

impl std::fmt::Display for ObserverId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "obs{:02}", self.0)
    }
}

/// One observer's gaze position at one subsampled frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixationPoint {
    /// Column index.
    pub x: usize,
    /// Row index.
    pub y: usize,
    pub observer: ObserverId,
    pub frame: usize,
}

impl FixationPoint {
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.x >= width || self.y >= height {
            return Err(Error::InvalidArgument(format!(
                "fixation ({}, {}) outside {height}x{width} map",
                self.x, self.y
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Prediction,
    GroundTruthBlur,
    Density,
}

/// Nonnegative single-channel map `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorityMap {
    grid: Tensor,
    kind: MapKind,
}

impl PriorityMap {
    pub fn new(grid: Tensor, kind: MapKind) -> Result<Self> {
        let shape = grid.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::shape("priority_map", "shape", "[1, H, W]", format!("{shape:?}")));
        }
        if !grid.is_finite() || grid.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("priority map values must be finite and >= 0".into()));
        }
        if kind == MapKind::Density && (grid.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("density map mass {} != 1", grid.sum())));
        }
        Ok(Self { grid, kind })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn into_grid(self) -> Tensor {
        self.grid
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.grid.data()[y * self.width() + x]
    }

    /// Mass-normalized copy.
    pub fn to_density(&self) -> Result<PriorityMap> {
        let s = self.grid.sum();
        if s <= 0.0 {
            return Err(Error::InvalidArgument("cannot normalize a map with zero mass".into()));
        }
        PriorityMap::new(self.grid.scale(1.0 / s), MapKind::Density)
    }

    /// `(x, y)` of the first maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let i = self.grid.argmax();
        (i % self.width(), i / self.width())
    }
}

fn gaussian(height: usize, width: usize, cx: f64, cy: f64, sigma: f64) -> Tensor {
    let inv = 1.0 / (2.0 * sigma * sigma);
    Tensor::from_fn(&[1, height, width], |i| {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        (-((x - cx).powi(2) + (y - cy).powi(2)) * inv).exp()
    })
}

/// Gaussian of standard deviation `sigma_px` around the fixation, peak 1.
pub fn blur_fixation(p: &FixationPoint, height: usize, width: usize, sigma_px: f64) -> Result<PriorityMap> {
    p.check_bounds(height, width)?;
    if !(sigma_px > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma_px}")));
    }
    PriorityMap::new(gaussian(height, width, p.x as f64, p.y as f64, sigma_px), MapKind::GroundTruthBlur)
}

/// Sum of per-point Gaussians normalized to unit mass.
pub fn density_from_group(points: &[FixationPoint], height: usize, width: usize, sigma_px: f64) -> Result<PriorityMap> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("density of an empty fixation set".into()));
    }
    let mut acc = Tensor::zeros(&[1, height, width]);
    for p in points {
        acc.add_assign(blur_fixation(p, height, width, sigma_px)?.grid());
    }
    let s = acc.sum();
    PriorityMap::new(acc.scale(1.0 / s), MapKind::Density)
}
