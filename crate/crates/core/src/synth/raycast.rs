//! Spinning-LiDAR ray caster against posed capsules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, Vec3};
use crate::skeleton::{LimbAttachment, PointCloud, SkeletonTopology};

use super::body::{rest_segment, CapsuleBody, PosedBody};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RayCasterConfig {
    /// Columns per revolution, spread uniformly over the azimuth range.
    pub azimuth_steps: usize,
    pub beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_min_deg: f64,
    pub azimuth_max_deg: f64,
    pub origin: [f64; 3],
    pub max_range: f64,
}

impl Default for RayCasterConfig {
    fn default() -> Self {
        Self {
            azimuth_steps: 2650,
            beams: 64,
            elevation_min_deg: -15.0,
            elevation_max_deg: 3.0,
            azimuth_min_deg: 0.0,
            azimuth_max_deg: 360.0,
            origin: [0.0; 3],
            max_range: 75.0,
        }
    }
}

impl RayCasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_steps == 0 || self.beams == 0 {
            return Err(Error::InvalidConfig("ray caster needs at least one column and one beam".into()));
        }
        if !(self.max_range > 0.0) || self.elevation_max_deg < self.elevation_min_deg {
            return Err(Error::InvalidConfig("bad ray caster range or elevation interval".into()));
        }
        Ok(())
    }

    pub fn azimuth_deg(&self, k: usize) -> f64 {
        self.azimuth_min_deg + k as f64 * (self.azimuth_max_deg - self.azimuth_min_deg) / self.azimuth_steps as f64
    }

    pub fn elevation_deg(&self, b: usize) -> f64 {
        if self.beams == 1 {
            self.elevation_min_deg
        } else {
            self.elevation_min_deg
                + b as f64 * (self.elevation_max_deg - self.elevation_min_deg) / (self.beams - 1) as f64
        }
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }
}

fn direction(az_deg: f64, el_deg: f64) -> Vec3 {
    let (az, el) = (az_deg.to_radians(), el_deg.to_radians());
    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// A world-space capsule tagged with the limb it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    pub limb: usize,
}

fn ray_sphere(ro: &Vec3, rd: &Vec3, center: &Vec3, r: f64) -> Option<f64> {
    let oc = ro - center;
    let b = oc.dot(rd);
    let c = oc.norm_squared() - r * r;
    let h = b * b - c;
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

/// Nearest positive hit distance of a unit-direction ray with a capsule.
///
/// The capsule is the union of a finite cylinder and two end spheres, so the
/// nearest entry into any of the three is the nearest entry into the capsule
/// for rays starting outside it.
pub fn ray_capsule(ro: &Vec3, rd: &Vec3, cap: &Capsule) -> Option<f64> {
    let ba = cap.b - cap.a;
    let oa = ro - cap.a;
    let baba = ba.norm_squared();
    let bard = ba.dot(rd);
    let baoa = ba.dot(&oa);
    let rdoa = rd.dot(&oa);
    let oaoa = oa.norm_squared();
    let mut best: Option<f64> = None;
    let mut take = |t: f64| {
        if t > 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };

    let a = baba - bard * bard;
    if a > 1e-12 * baba.max(1.0) {
        let b = baba * rdoa - baoa * bard;
        let c = baba * oaoa - baoa * baoa - cap.radius * cap.radius * baba;
        let h = b * b - a * c;
        if h >= 0.0 {
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if y > 0.0 && y < baba {
                take(t);
            }
        }
    }
    if let Some(t) = ray_sphere(ro, rd, &cap.a, cap.radius) {
        take(t);
    }
    if let Some(t) = ray_sphere(ro, rd, &cap.b, cap.radius) {
        take(t);
    }
    best
}

pub fn posed_capsules(body: &CapsuleBody, posed: &PosedBody) -> Vec<Capsule> {
    (0..body.topology().limbs().len())
        .map(|l| {
            let (s0, s1) = rest_segment(body, l);
            let t = &posed.limb_transforms[l];
            Capsule { a: t.apply(&s0), b: t.apply(&s1), radius: body.limb_radius(l), limb: l }
        })
        .collect()
}

/// Ray-cast result: the cloud plus the number of hits per limb.
#[derive(Debug, Clone)]
pub struct Scan {
    pub cloud: PointCloud,
    pub hits_per_limb: Vec<usize>,
}

/// Casts every ray of the sensor against the capsules; one point per ray that hits.
///
/// Labels are the hit limb's part class; attachments store the hit in the limb's
/// rest frame.
pub fn raycast(body: &CapsuleBody, posed: &PosedBody, cfg: &RayCasterConfig) -> Result<Scan> {
    cfg.validate()?;
    let caps = posed_capsules(body, posed);
    let topo = body.topology();
    let hits = cast_capsules(&caps, cfg);
    if hits.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut hits_per_limb = vec![0; caps.len()];
    let mut points = Vec::with_capacity(hits.len());
    let mut labels = Vec::with_capacity(hits.len());
    let mut attachment = Vec::with_capacity(hits.len());
    for (p, l) in hits {
        hits_per_limb[l] += 1;
        points.push(p);
        labels.push(topo.limbs()[l].parent);
        attachment.push(LimbAttachment { limb: l, local: posed.limb_transforms[l].inverse_apply(&p) });
    }
    let cloud = PointCloud { points, gt_label: Some(labels), attachment: Some(attachment), ..Default::default() };
    Ok(Scan { cloud, hits_per_limb })
}

/// Nearest hit per ray, as `(point, limb)`, in column-major ray order.
pub fn cast_capsules(caps: &[Capsule], cfg: &RayCasterConfig) -> Vec<(Vec3, usize)> {
    if caps.is_empty() {
        return Vec::new();
    }
    let o = cfg.origin();
    // bounding sphere of all capsules
    let mut center = Vec3::zeros();
    for c in caps {
        center += (c.a + c.b) * 0.5;
    }
    center /= caps.len() as f64;
    let radius = caps.iter().map(|c| (c.a - center).norm().max((c.b - center).norm()) + c.radius).fold(0.0, f64::max);
    let d = center - o;
    let dist = d.norm();
    let horiz = d.x.hypot(d.y);
    let az_c = d.y.atan2(d.x).to_degrees();
    let el_c = d.z.atan2(horiz).to_degrees();
    // angular windows that any ray hitting the sphere must fall in
    let az_window = if horiz > radius { (radius / horiz).asin().to_degrees() + 1e-6 } else { 360.0 };
    let el_window = if dist > radius { (radius / dist).asin().to_degrees() + 1e-6 } else { 360.0 };

    let mut out = Vec::new();
    for k in 0..cfg.azimuth_steps {
        let az = cfg.azimuth_deg(k);
        let diff = (az - az_c + 540.0).rem_euclid(360.0) - 180.0;
        if diff.abs() > az_window {
            continue;
        }
        for b in 0..cfg.beams {
            let el = cfg.elevation_deg(b);
            if (el - el_c).abs() > el_window {
                continue;
            }
            let rd = direction(az, el);
            let mut best: Option<(f64, usize)> = None;
            for c in caps {
                if let Some(t) = ray_capsule(&o, &rd, c) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, c.limb));
                    }
                }
            }
            if let Some((t, l)) = best {
                if t <= cfg.max_range {
                    out.push((o + rd * t, l));
                }
            }
        }
    }
    out
}

/// Distance from `p` to the nearest capsule surface.
pub fn surface_distance(p: &Vec3, caps: &[Capsule]) -> f64 {
    caps.iter().map(|c| (point_segment_distance(p, &c.a, &c.b) - c.radius).abs()).fold(f64::INFINITY, f64::min)
}

/// A joint is visible when at least `min_hits` rays hit limbs touching it.
pub fn visibility(topo: &SkeletonTopology, hits_per_limb: &[usize], min_hits: usize) -> Vec<bool> {
    (0..topo.num_joints()).map(|j| topo.limbs_of(j).map(|l| hits_per_limb[l]).sum::<usize>() >= min_hits).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn central_ray() -> RayCasterConfig {
        RayCasterConfig {
            azimuth_steps: 1,
            beams: 1,
            elevation_min_deg: 0.0,
            elevation_max_deg: 0.0,
            azimuth_min_deg: 0.0,
            azimuth_max_deg: 360.0,
            ..Default::default()
        }
    }

    #[test]
    fn hit_on_cylinder_midsection() {
        let cap = Capsule { a: Vec3::new(10.0, 0.0, -0.5), b: Vec3::new(10.0, 0.0, 0.5), radius: 0.1, limb: 0 };
        let hits = cast_capsules(&[cap], &central_ray());
        assert_eq!(hits.len(), 1);
        assert_abs_diff_eq!(hits[0].0.x, 9.9, epsilon = 1e-12);
    }

    #[test]
    fn hit_on_end_cap_and_parallel_axis() {
        let o = Vec3::zeros();
        let rd = Vec3::x();
        // axis along the ray: only the near sphere can be hit
        let cap = Capsule { a: Vec3::new(5.0, 0.0, 0.0), b: Vec3::new(6.0, 0.0, 0.0), radius: 0.2, limb: 0 };
        assert_abs_diff_eq!(ray_capsule(&o, &rd, &cap).unwrap(), 4.8, epsilon = 1e-12);
        let miss = Capsule { a: Vec3::new(5.0, 1.0, 0.0), b: Vec3::new(6.0, 1.0, 0.0), radius: 0.2, limb: 0 };
        assert!(ray_capsule(&o, &rd, &miss).is_none());
        let behind = Capsule { a: Vec3::new(-5.0, 0.0, -1.0), b: Vec3::new(-5.0, 0.0, 1.0), radius: 0.2, limb: 0 };
        assert!(ray_capsule(&o, &rd, &behind).is_none());
    }

    #[test]
    fn body_behind_forward_only_sensor_is_empty() {
        let body = CapsuleBody::default_body();
        let place = super::super::body::Placement { translation: Vec3::new(-10.0, 0.0, -1.8), yaw_deg: 0.0 };
        let posed = super::super::body::forward_kinematics(&body, &body.rest_angles(), &place);
        let cfg = RayCasterConfig {
            azimuth_min_deg: -90.0,
            azimuth_max_deg: 90.0,
            azimuth_steps: 1325,
            ..Default::default()
        };
        assert!(matches!(raycast(&body, &posed, &cfg), Err(Error::EmptyCloud)));
    }

    #[test]
    fn scan_points_lie_on_capsules() {
        let body = CapsuleBody::default_body();
        let place = super::super::body::Placement { translation: Vec3::new(7.0, 3.0, -1.8), yaw_deg: 120.0 };
        let angles = super::super::body::sample_end_pose(&body, 11);
        let posed = super::super::body::forward_kinematics(&body, &angles, &place);
        let scan = raycast(&body, &posed, &RayCasterConfig::default()).unwrap();
        let caps = posed_capsules(&body, &posed);
        assert!(scan.cloud.len() > 100);
        for (i, p) in scan.cloud.points.iter().enumerate() {
            assert!(surface_distance(p, &caps) <= 1e-6);
            let att = scan.cloud.attachment.as_ref().unwrap()[i];
            let label = scan.cloud.gt_label.as_ref().unwrap()[i];
            assert_eq!(body.topology().limbs()[att.limb].parent, label);
            let c = &caps[att.limb];
            assert!((point_segment_distance(p, &c.a, &c.b) - c.radius).abs() <= 1e-6);
        }
        assert_eq!(scan.hits_per_limb.iter().sum::<usize>(), scan.cloud.len());
    }
}
