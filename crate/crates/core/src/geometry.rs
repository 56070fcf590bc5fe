use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of sound at 20 degrees C, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

pub type Point3 = [f64; 3];

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    c
}

/// Microphone positions (meters, centroid at the origin) and per-microphone
/// gains (geometric mean 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    positions: Vec<Point3>,
    gains: Vec<f64>,
}

impl ArrayGeometry {
    /// Centres the positions and rescales the gains to unit geometric mean.
    pub fn new(positions: Vec<Point3>, gains: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Geometry("array has no microphones".into()));
        }
        if gains.len() != positions.len() {
            return Err(Error::Geometry(format!(
                "{} gains for {} microphones",
                gains.len(),
                positions.len()
            )));
        }
        if gains.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::Geometry("gains must be positive and finite".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("positions must be finite".into()));
        }
        // Already-normalized input is kept bit-for-bit, so reloading a stored
        // geometry reproduces it exactly.
        let c = centroid(&positions);
        let scale = positions.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let positions = if c.iter().all(|v| v.abs() <= 1e-12 * scale) {
            positions
        } else {
            positions
                .iter()
                .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
                .collect()
        };
        let log_mean = gains.iter().map(|g| g.ln()).sum::<f64>() / gains.len() as f64;
        let gains = if log_mean.abs() <= 1e-12 {
            gains
        } else {
            gains.iter().map(|g| g / log_mean.exp()).collect()
        };
        Ok(ArrayGeometry { positions, gains })
    }

    pub fn with_unit_gains(positions: Vec<Point3>) -> Result<Self> {
        let n = positions.len();
        ArrayGeometry::new(positions, vec![1.0; n])
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest inter-microphone distance.
    pub fn aperture(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.positions.iter().enumerate() {
            for b in &self.positions[i + 1..] {
                best = best.max(distance(a, b));
            }
        }
        best
    }

    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let m = self.len();
        DMatrix::from_fn(m, m, |i, j| distance(&self.positions[i], &self.positions[j]))
    }

    /// Singular values of the centred position cloud, descending.
    pub fn spread(&self) -> Vector3<f64> {
        let mut scatter = Matrix3::zeros();
        for p in &self.positions {
            let v = Vector3::from(*p);
            scatter += v * v.transpose();
        }
        let mut ev: Vec<f64> = scatter
            .symmetric_eigenvalues()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        Vector3::new(ev[0], ev[1], ev[2])
    }

    /// True when the microphones span three dimensions.
    pub fn is_volumetric(&self) -> bool {
        let s = self.spread();
        s[0] > 0.0 && s[2] > 1e-3 * s[0]
    }

    /// True when every microphone lies on the z = 0 plane of this frame.
    pub fn is_in_xy_plane(&self) -> bool {
        let a = self.aperture().max(1e-12);
        self.positions.iter().all(|p| p[2].abs() <= 1e-6 * a)
    }
}

/// RMS distance between two point sets after optimal rotation/reflection and
/// translation of `estimate` onto `truth`.
pub fn procrustes_rms(estimate: &[Point3], truth: &[Point3]) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "point sets differ in size");
    let ca = centroid(estimate);
    let cb = centroid(truth);
    let a: Vec<Vector3<f64>> = estimate
        .iter()
        .map(|p| Vector3::new(p[0] - ca[0], p[1] - ca[1], p[2] - ca[2]))
        .collect();
    let b: Vec<Vector3<f64>> = truth
        .iter()
        .map(|p| Vector3::new(p[0] - cb[0], p[1] - cb[1], p[2] - cb[2]))
        .collect();
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(&b) {
        h += x * y.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let rot = vt.transpose() * u.transpose();
    let sq: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (rot * x - y).norm_squared())
        .sum();
    (sq / a.len() as f64).sqrt()
}
