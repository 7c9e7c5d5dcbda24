use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Direction of arrival in radians: azimuth in `[-pi, pi)`, elevation in `[-pi/2, pi/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaAngle {
    azimuth: f64,
    elevation: f64,
}

impl DoaAngle {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        ensure!(
            (-PI..PI).contains(&azimuth),
            InvalidArgument,
            "azimuth {azimuth} outside [-pi, pi)"
        );
        ensure!(
            (-PI / 2.0..=PI / 2.0).contains(&elevation),
            InvalidArgument,
            "elevation {elevation} outside [-pi/2, pi/2]"
        );
        Ok(Self { azimuth, elevation })
    }

    /// Builds an angle from degrees, wrapping azimuth into `[-180, 180)`.
    pub fn from_degrees(azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        let az = (azimuth_deg + 180.0).rem_euclid(360.0) - 180.0;
        Self::new(az.to_radians(), elevation_deg.to_radians())
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (a, e) = (self.azimuth, self.elevation);
        [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]
    }
}

/// Real first-order spherical harmonics, ACN order (W, Y, Z, X), SN3D normalization.
pub fn sh_vector(doa: DoaAngle, order: usize) -> Result<Vec<f64>> {
    ensure!(
        order == 1,
        InvalidArgument,
        "only first-order ambisonics is supported, got order {order}"
    );
    let (a, e) = (doa.azimuth(), doa.elevation());
    Ok(vec![1.0, a.sin() * e.cos(), e.sin(), a.cos() * e.cos()])
}
