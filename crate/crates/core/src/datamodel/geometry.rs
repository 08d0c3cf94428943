use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eye-tracking setup used to convert one degree of visual angle into pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewingGeometry {
    pub distance_cm: f64,
    pub monitor_diagonal_inch: f64,
    pub aspect_w: f64,
    pub aspect_h: f64,
    pub pixels_w: u32,
    pub pixels_h: u32,
}

impl ViewingGeometry {
    /// 55 cm from a 23-inch 16:9 monitor at 1280x720.
    pub fn mvva() -> Self {
        Self {
            distance_cm: 55.0,
            monitor_diagonal_inch: 23.0,
            aspect_w: 16.0,
            aspect_h: 9.0,
            pixels_w: 1280,
            pixels_h: 720,
        }
    }

    /// 60 cm from a 23.8-inch 16:9 monitor at 1280x720.
    pub fn findwho() -> Self {
        Self {
            distance_cm: 60.0,
            monitor_diagonal_inch: 23.8,
            ..Self::mvva()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("distance_cm", self.distance_cm),
            ("monitor_diagonal_inch", self.monitor_diagonal_inch),
            ("aspect_w", self.aspect_w),
            ("aspect_h", self.aspect_h),
            ("pixels_w", self.pixels_w as f64),
            ("pixels_h", self.pixels_h as f64),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("viewing geometry: {name} must be positive, got {v}")));
            }
        }
        let aspect = self.aspect_w / self.aspect_h;
        let pixels = self.pixels_w as f64 / self.pixels_h as f64;
        if ((pixels - aspect) / aspect).abs() > 0.01 {
            return Err(Error::InvalidArgument(format!(
                "viewing geometry: pixel aspect {pixels:.4} inconsistent with {}:{}",
                self.aspect_w, self.aspect_h
            )));
        }
        Ok(())
    }

    pub fn monitor_width_cm(&self) -> f64 {
        let diag = self.aspect_w.hypot(self.aspect_h);
        2.54 * self.monitor_diagonal_inch * self.aspect_w / diag
    }

    /// Pixels spanned by one degree of visual angle at the screen centre.
    pub fn pixels_per_degree(&self) -> Result<f64> {
        self.validate()?;
        let cm_per_degree = 2.0 * self.distance_cm * 0.5f64.to_radians().tan();
        Ok(self.pixels_w as f64 / self.monitor_width_cm() * cm_per_degree)
    }

    /// Blur standard deviation (one degree) on a map `map_width` pixels wide,
    /// scaled down from the native screen resolution.
    pub fn sigma_for_map(&self, map_width: usize) -> Result<f64> {
        Ok(self.pixels_per_degree()? * map_width as f64 / self.pixels_w as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_setups() {
        let mvva = ViewingGeometry::mvva().pixels_per_degree().unwrap();
        let findwho = ViewingGeometry::findwho().pixels_per_degree().unwrap();
        assert!((mvva - 24.1).abs() < 0.05, "{mvva}");
        assert!((findwho - 25.4).abs() < 0.05, "{findwho}");
    }

    #[test]
    fn doubling_distance_doubles_resolution() {
        let g = ViewingGeometry::mvva();
        let far = ViewingGeometry {
            distance_cm: 2.0 * g.distance_cm,
            ..g
        };
        let ratio = far.pixels_per_degree().unwrap() / g.pixels_per_degree().unwrap();
        assert!((ratio - 2.0).abs() / 2.0 < 1e-3);
    }

    #[test]
    fn rejects_bad_geometry() {
        let g = ViewingGeometry::mvva();
        assert!(ViewingGeometry { distance_cm: 0.0, ..g }.pixels_per_degree().is_err());
        assert!(ViewingGeometry { pixels_h: 1024, ..g }.validate().is_err());
    }
}
