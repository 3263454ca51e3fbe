//! Limb-local cylindrical coordinates and point-to-segment distances.
//!
//! A limb is the segment from its parent keypoint `ya` to its child keypoint `yb`.
//! Every point gets an axial coordinate `z` (signed projection onto the limb
//! direction, measured from `ya`) and a radial coordinate `r` (distance to the
//! infinite limb line). The gradient variants return partial derivatives with
//! respect to both endpoints; the points themselves are never optimised.

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Default guard on limb length, in meters.
pub const DEFAULT_EPS_LEN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimbCoords {
    /// Signed axial coordinate; negative behind the parent keypoint.
    pub z: f64,
    /// Radial distance to the limb axis, always non-negative.
    pub r: f64,
}

/// Partial derivatives of `(z, r)` with respect to the two limb endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimbCoordsGrad {
    pub dz_da: Vec3,
    pub dz_db: Vec3,
    pub dr_da: Vec3,
    pub dr_db: Vec3,
}

/// Precomputed limb frame so many points can be projected against one limb.
#[derive(Debug, Clone, Copy)]
pub struct LimbFrame {
    pub origin: Vec3,
    pub axis: Vec3,
    pub length: f64,
}

impl LimbFrame {
    pub fn new(ya: &Vec3, yb: &Vec3, eps_len: f64) -> Option<Self> {
        let d = yb - ya;
        let length = d.norm();
        if !(length > eps_len) {
            return None;
        }
        Some(Self { origin: *ya, axis: d / length, length })
    }

    pub fn coords(&self, p: &Vec3) -> LimbCoords {
        let w = p - self.origin;
        let z = w.dot(&self.axis);
        let r = (w - self.axis * z).norm();
        LimbCoords { z, r }
    }

    /// Coordinates together with their endpoint gradients.
    ///
    /// At `r = 0` the radial gradient is taken as zero.
    pub fn coords_grad(&self, p: &Vec3) -> (LimbCoords, LimbCoordsGrad) {
        let w = p - self.origin;
        let z = w.dot(&self.axis);
        let q = w - self.axis * z;
        let r = q.norm();
        let inv_len = 1.0 / self.length;

        let dz_db = q * inv_len;
        let dz_da = -self.axis - dz_db;

        let (dr_da, dr_db) = if r > 0.0 {
            let n = q / r;
            let dr_db = n * (-z * inv_len);
            (-n - dr_db, dr_db)
        } else {
            (Vec3::zeros(), Vec3::zeros())
        };
        (LimbCoords { z, r }, LimbCoordsGrad { dz_da, dz_db, dr_da, dr_db })
    }
}

/// Cylindrical coordinates of `p` relative to the limb `ya -> yb`.
pub fn cylindrical_coords(p: &Vec3, ya: &Vec3, yb: &Vec3) -> Result<LimbCoords> {
    cylindrical_coords_eps(p, ya, yb, DEFAULT_EPS_LEN)
}

pub fn cylindrical_coords_eps(p: &Vec3, ya: &Vec3, yb: &Vec3, eps_len: f64) -> Result<LimbCoords> {
    LimbFrame::new(ya, yb, eps_len)
        .map(|f| f.coords(p))
        .ok_or(Error::DegenerateLimb { limb: 0, length: (yb - ya).norm() })
}

/// Euclidean distance from `p` to the closed segment `ya -> yb`.
///
/// A zero-length segment degrades to the point distance.
pub fn point_segment_distance(p: &Vec3, ya: &Vec3, yb: &Vec3) -> f64 {
    point_segment_distance_grad(p, ya, yb).0
}

/// Distance plus its gradient with respect to `(ya, yb)`.
///
/// The interior formula is used whenever the foot parameter lies in `[0, 1]`,
/// and the gradient of a zero distance is zero.
pub fn point_segment_distance_grad(p: &Vec3, ya: &Vec3, yb: &Vec3) -> (f64, Vec3, Vec3) {
    let d = yb - ya;
    let len2 = d.norm_squared();
    let w = p - ya;
    let t = if len2 > 0.0 { w.dot(&d) / len2 } else { -1.0 };

    if t < 0.0 {
        let dist = w.norm();
        let g = if dist > 0.0 { -w / dist } else { Vec3::zeros() };
        return (dist, g, Vec3::zeros());
    }
    if t > 1.0 {
        let v = p - yb;
        let dist = v.norm();
        let g = if dist > 0.0 { -v / dist } else { Vec3::zeros() };
        return (dist, Vec3::zeros(), g);
    }
    let frame = LimbFrame { origin: *ya, axis: d / len2.sqrt(), length: len2.sqrt() };
    let (c, g) = frame.coords_grad(p);
    (c.r, g.dr_da, g.dr_db)
}

/// Foot parameter of `p` on the segment, unclamped. `None` for a zero-length segment.
pub fn segment_parameter(p: &Vec3, ya: &Vec3, yb: &Vec3) -> Option<f64> {
    let d = yb - ya;
    let len2 = d.norm_squared();
    (len2 > 0.0).then(|| (p - ya).dot(&d) / len2)
}

/// `exp(-((x - y) / h)^2)`.
pub fn gaussian_kernel(x: f64, y: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidBandwidth(h));
    }
    Ok(kernel_unchecked(x, y, h))
}

#[inline]
pub(crate) fn kernel_unchecked(x: f64, y: f64, h: f64) -> f64 {
    let u = (x - y) / h;
    (-u * u).exp()
}
