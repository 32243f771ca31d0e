//! Camera poses, canonical normalization, orbit generation, and rays.
//!
//! Conventions: camera-to-world extrinsics, OpenCV-style camera axes
//! (x right, y down, z forward). The canonical front camera sits at
//! (0,-2,0) looking along +y with world z up in the image; azimuth 0 is
//! the front (-y side).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Rigid camera-to-world extrinsic plus normalized pinhole intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    /// Rotation columns are the camera axes expressed in world coordinates.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Two-ring orbit: a high-elevation ring and a low-elevation ring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub n_high: usize,
    pub n_low: usize,
    pub elevation_high_deg: f64,
    pub elevation_low_deg: f64,
    pub radius: f64,
    pub fov_deg: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        OrbitSpec {
            n_high: 24,
            n_low: 12,
            elevation_high_deg: 25.0,
            elevation_low_deg: 0.0,
            radius: 2.0,
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

/// Field of view is a config default; the canonical setup never states it.
pub const DEFAULT_FOV_DEG: f64 = 50.0;

pub fn focal_from_fov(fov_deg: f64) -> f64 {
    // Normalized focal: image plane spans [0,1], so f = 0.5 / tan(fov/2).
    0.5 / (fov_deg.to_radians() / 2.0).tan()
}

// ------------------------------------------------------------------ small linear algebra

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i] += a[i][k] * v[k];
        }
    }
    out
}

pub fn mat_t(a: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[j][i];
        }
    }
    c
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation by 180° around the world z axis.
pub fn rot_z_180() -> Mat3 {
    [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]
}

impl CameraPose {
    pub fn validate_rigid(&self) -> Result<()> {
        let rt_r = mat_mul(&mat_t(&self.rotation), &self.rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rt_r[i][j] - expect).abs() > 1e-6 {
                    return Err(Error::Validation(format!(
                        "non-orthonormal rotation: RᵀR[{i}][{j}] = {}",
                        rt_r[i][j]
                    )));
                }
            }
        }
        if (det3(&self.rotation) - 1.0).abs() > 1e-6 {
            return Err(Error::Validation("rotation determinant != +1".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Validation("focal lengths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(Error::Validation("principal point outside [0,1]".into()));
        }
        Ok(())
    }

    /// 4×4 camera-to-world matrix, row-major.
    pub fn extrinsic_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0],
            r[1][0], r[1][1], r[1][2], t[1],
            r[2][0], r[2][1], r[2][2], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// View direction (camera z axis) in world coordinates.
    pub fn view_dir(&self) -> Vec3 {
        [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]]
    }

    /// World point -> camera coordinates.
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        mat_vec(&mat_t(&self.rotation), &d)
    }

    /// Compose a world-space rigid transform with this pose: (R_g, t_g)·pose.
    pub fn transformed(&self, rot: &Mat3, trans: Vec3) -> CameraPose {
        let rotation = mat_mul(rot, &self.rotation);
        let c = mat_vec(rot, &self.translation);
        CameraPose {
            rotation,
            translation: [c[0] + trans[0], c[1] + trans[1], c[2] + trans[2]],
            ..*self
        }
    }

    /// Relative transform self⁻¹·other as (rotation, translation).
    pub fn relative_to(&self, other: &CameraPose) -> (Mat3, Vec3) {
        let rt = mat_t(&self.rotation);
        let rot = mat_mul(&rt, &other.rotation);
        let d = [
            other.translation[0] - self.translation[0],
            other.translation[1] - self.translation[1],
            other.translation[2] - self.translation[2],
        ];
        (rot, mat_vec(&rt, &d))
    }
}

/// Inward-looking pose at a world-space camera center, world z up in the image.
fn look_at_origin(center: Vec3, fx: f64, fy: f64) -> CameraPose {
    let forward = normalize([-center[0], -center[1], -center[2]]);
    let x_cam = normalize(cross(forward, [0.0, 0.0, 1.0]));
    let y_cam = cross(forward, x_cam);
    CameraPose {
        rotation: [
            [x_cam[0], y_cam[0], forward[0]],
            [x_cam[1], y_cam[1], forward[1]],
            [x_cam[2], y_cam[2], forward[2]],
        ],
        translation: center,
        fx,
        fy,
        cx: 0.5,
        cy: 0.5,
    }
}

/// The canonical reference camera: center (0,-2,0), looking along +y,
/// world z up in the image.
pub fn canonical_front_pose() -> CameraPose {
    let f = focal_from_fov(DEFAULT_FOV_DEG);
    look_at_origin([0.0, -2.0, 0.0], f, f)
}

/// The canonical back camera: the front pose rotated 180° about world z,
/// i.e. center (0,2,0) looking along −y.
pub fn canonical_back_pose() -> CameraPose {
    canonical_front_pose().transformed(&rot_z_180(), [0.0; 3])
}

/// Apply the unique rigid transform G with G·poses[ref_index] = canonical
/// front pose to every pose; relative transforms are preserved.
pub fn normalize_to_reference(poses: &[CameraPose], ref_index: usize) -> Result<Vec<CameraPose>> {
    let reference = poses
        .get(ref_index)
        .ok_or_else(|| Error::Usage(format!("ref_index {ref_index} out of range")))?;
    for p in poses {
        p.validate_rigid()?;
    }
    let canon = canonical_front_pose();
    // G = canon · ref⁻¹
    let g_rot = mat_mul(&canon.rotation, &mat_t(&reference.rotation));
    let gc = mat_vec(&g_rot, &reference.translation);
    let g_t = [
        canon.translation[0] - gc[0],
        canon.translation[1] - gc[1],
        canon.translation[2] - gc[2],
    ];
    Ok(poses.iter().map(|p| p.transformed(&g_rot, g_t)).collect())
}

/// One orbit view: pose plus its spherical placement.
#[derive(Clone, Debug)]
pub struct OrbitView {
    pub pose: CameraPose,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

fn orbit_center(radius: f64, azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    [
        radius * el.cos() * az.sin(),
        -radius * el.cos() * az.cos(),
        radius * el.sin(),
    ]
}

/// Equal-interval poses on the two rings, high ring first. Azimuth 0 is the
/// front (-y side); polar views are never generated.
pub fn orbit_cameras(spec: &OrbitSpec) -> Vec<OrbitView> {
    let f = focal_from_fov(spec.fov_deg);
    let mut views = Vec::with_capacity(spec.n_high + spec.n_low);
    for (count, elev) in [
        (spec.n_high, spec.elevation_high_deg),
        (spec.n_low, spec.elevation_low_deg),
    ] {
        for i in 0..count {
            let az = 360.0 * i as f64 / count as f64;
            views.push(OrbitView {
                pose: look_at_origin(orbit_center(spec.radius, az, elev), f, f),
                azimuth_deg: az,
                elevation_deg: elev,
            });
        }
    }
    views
}

/// Index of the exact azimuth+180°, same-elevation partner of view `i`.
pub fn opposite_view_index(views: &[OrbitView], i: usize) -> Result<usize> {
    let v = views
        .get(i)
        .ok_or_else(|| Error::Usage(format!("view index {i} out of range")))?;
    let want_az = (v.azimuth_deg + 180.0).rem_euclid(360.0);
    views
        .iter()
        .position(|o| {
            (o.azimuth_deg - want_az).abs() < 1e-9
                && (o.elevation_deg - v.elevation_deg).abs() < 1e-9
        })
        .ok_or_else(|| {
            Error::Pairing(format!(
                "no exact opposite for azimuth {}° elevation {}°",
                v.azimuth_deg, v.elevation_deg
            ))
        })
}

/// One unit-norm world-space direction per pixel center; all origins equal
/// the camera center. Row-major over (row, col).
pub fn generate_rays(pose: &CameraPose, width: usize, height: usize) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut origins = Vec::with_capacity(width * height);
    let mut dirs = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let u = (col as f64 + 0.5) / width as f64;
            let v = (row as f64 + 0.5) / height as f64;
            let d_cam = [(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, 1.0];
            dirs.push(normalize(mat_vec(&pose.rotation, &d_cam)));
            origins.push(pose.translation);
        }
    }
    (origins, dirs)
}

/// Intersect a ray with the [-1,1]³ cube. Returns (t_near, t_far) with
/// t_near ≥ 0, or None on a miss.
pub fn ray_unit_cube_intersect(origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-12 {
            if origin[k].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[k];
        let mut a = (-1.0 - origin[k]) * inv;
        let mut b = (1.0 - origin[k]) * inv;
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Length of the conditioning vector produced by [`camera_embedding`].
pub const CAMERA_EMBED_DIM: usize = 20;

/// 20-value conditioning vector: the flattened first three extrinsic rows
/// (translation scaled by 1/2), then (fx, fy, cx, cy), then 4 zeros.
pub fn camera_embedding<T: Scalar>(pose: &CameraPose) -> crate::diffmath::Tensor<T> {
    let e = pose.extrinsic_matrix();
    let mut out = Vec::with_capacity(20);
    for (i, v) in e.iter().take(12).enumerate() {
        let scaled = if i % 4 == 3 { v / 2.0 } else { *v };
        out.push(T::from_f64c(scaled));
    }
    out.extend([pose.fx, pose.fy, pose.cx, pose.cy].map(T::from_f64c));
    out.extend([T::zero(); 4]);
    crate::diffmath::Tensor::new(vec![1, 20], out).expect("fixed-size embedding")
}

// ------------------------------------------------------------------ pose manifest

/// JSON wire format for a posed view.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct PoseManifestEntry {
    pub extrinsic: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl PoseManifestEntry {
    pub fn from_view(v: &OrbitView) -> Self {
        PoseManifestEntry {
            extrinsic: v.pose.extrinsic_matrix().to_vec(),
            fx: v.pose.fx,
            fy: v.pose.fy,
            cx: v.pose.cx,
            cy: v.pose.cy,
            azimuth_deg: v.azimuth_deg,
            elevation_deg: v.elevation_deg,
        }
    }

    pub fn to_view(&self) -> Result<OrbitView> {
        if self.extrinsic.len() != 16 {
            return Err(Error::Validation(format!(
                "extrinsic must have 16 entries, got {}",
                self.extrinsic.len()
            )));
        }
        let e = &self.extrinsic;
        let pose = CameraPose {
            rotation: [
                [e[0], e[1], e[2]],
                [e[4], e[5], e[6]],
                [e[8], e[9], e[10]],
            ],
            translation: [e[3], e[7], e[11]],
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        };
        pose.validate_rigid()?;
        Ok(OrbitView {
            pose,
            azimuth_deg: self.azimuth_deg,
            elevation_deg: self.elevation_deg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    fn poses_close(a: &CameraPose, b: &CameraPose, tol: f64) -> bool {
        a.extrinsic_matrix()
            .iter()
            .zip(b.extrinsic_matrix())
            .all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn canonical_front_pose_geometry() {
        let p = canonical_front_pose();
        p.validate_rigid().unwrap();
        assert_eq!(p.translation, [0.0, -2.0, 0.0]);
        let d = p.view_dir();
        assert!(approx(d[0], 0.0, 1e-12) && approx(d[1], 1.0, 1e-12) && approx(d[2], 0.0, 1e-12));
        // origin is at camera-space depth 2
        let c = p.world_to_camera([0.0, 0.0, 0.0]);
        assert!(approx(c[2], 2.0, 1e-12));
    }

    #[test]
    fn orbit_defaults() {
        let views = orbit_cameras(&OrbitSpec::default());
        assert_eq!(views.len(), 36);
        for v in &views {
            let c = v.pose.translation;
            let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            assert!(approx(r, 2.0, 1e-12));
            v.pose.validate_rigid().unwrap();
        }
        // azimuth-0 low-orbit pose at elevation 0 is the canonical front pose
        let front = &views[24];
        assert!(approx(front.azimuth_deg, 0.0, 1e-12));
        assert!(poses_close(&front.pose, &canonical_front_pose(), 1e-12));
    }

    #[test]
    fn opposite_pairing() {
        let views = orbit_cameras(&OrbitSpec::default());
        // azimuth 0 on the 24-view orbit pairs with offset 12
        assert_eq!(opposite_view_index(&views, 0).unwrap(), 12);
        for i in 0..views.len() {
            let j = opposite_view_index(&views, i).unwrap();
            assert!(approx(views[j].elevation_deg, views[i].elevation_deg, 1e-12));
            // involution
            assert_eq!(opposite_view_index(&views, j).unwrap(), i);
        }
    }

    #[test]
    fn pairing_error_without_partner() {
        let spec = OrbitSpec { n_high: 5, n_low: 0, ..Default::default() };
        let views = orbit_cameras(&spec);
        assert!(matches!(opposite_view_index(&views, 0), Err(Error::Pairing(_))));
    }

    #[test]
    fn normalize_reference_properties() {
        let views = orbit_cameras(&OrbitSpec {
            elevation_high_deg: 30.0,
            elevation_low_deg: 10.0,
            ..Default::default()
        });
        let poses: Vec<CameraPose> = views.iter().map(|v| v.pose.clone()).collect();
        let normed = normalize_to_reference(&poses, 5).unwrap();
        assert!(poses_close(&normed[5], &canonical_front_pose(), 1e-9));
        // relative transforms preserved
        let (r0, t0) = poses[2].relative_to(&poses[9]);
        let (r1, t1) = normed[2].relative_to(&normed[9]);
        for i in 0..3 {
            assert!(approx(t0[i], t1[i], 1e-9));
            for j in 0..3 {
                assert!(approx(r0[i][j], r1[i][j], 1e-9));
            }
        }
        // idempotent
        let again = normalize_to_reference(&normed, 5).unwrap();
        for (a, b) in again.iter().zip(&normed) {
            assert!(poses_close(a, b, 1e-9));
        }
    }

    #[test]
    fn opposite_view_normalizes_to_z180_conjugate() {
        // normalize(front), then the back partner equals the front pose
        // conjugated by R_z(180°)
        let views = orbit_cameras(&OrbitSpec::default());
        let poses: Vec<CameraPose> = views.iter().map(|v| v.pose.clone()).collect();
        let front = 24; // azimuth 0, low orbit
        let back = opposite_view_index(&views, front).unwrap();
        let normed = normalize_to_reference(&poses, front).unwrap();
        let expect = normed[front].transformed(&rot_z_180(), [0.0; 3]);
        assert!(poses_close(&normed[back], &expect, 1e-9));
        // and the back camera sits at (0,+2,0) looking along -y
        assert!(approx(normed[back].translation[1], 2.0, 1e-9));
        assert!(approx(normed[back].view_dir()[1], -1.0, 1e-9));
    }

    #[test]
    fn rays_basic() {
        let p = canonical_front_pose();
        let (origins, dirs) = generate_rays(&p, 4, 4);
        assert_eq!(origins.len(), 16);
        for d in &dirs {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!(approx(n, 1.0, 1e-6));
        }
        // a 1×1 image has its single pixel at the exact center
        let (_, dirs) = generate_rays(&p, 1, 1);
        assert!(approx(dirs[0][1], 1.0, 1e-12));
    }

    #[test]
    fn corner_ray_matches_pinhole_formula() {
        let mut p = canonical_front_pose();
        p.fx = 1.0;
        p.fy = 1.0;
        let w = 2;
        let (_, dirs) = generate_rays(&p, w, w);
        // top-left pixel center: u=v=0.25, offset (-0.25,-0.25,1) in camera frame
        let expect_cam: [f64; 3] = [-0.25, -0.25, 1.0];
        let n = (expect_cam[0] * expect_cam[0]
            + expect_cam[1] * expect_cam[1]
            + 1.0)
            .sqrt();
        let world = mat_vec(&p.rotation, &expect_cam);
        for k in 0..3 {
            assert!(approx(dirs[0][k], world[k] / n, 1e-12));
        }
    }

    #[test]
    fn embedding_layout() {
        let p = canonical_front_pose();
        let e: crate::diffmath::Tensor<f64> = camera_embedding(&p);
        assert_eq!(e.numel(), 20);
        let v = e.to_vec();
        // translation entries scaled by 1/2: (0,-1,0)
        assert!(approx(v[3], 0.0, 1e-12));
        assert!(approx(v[7], -1.0, 1e-12));
        assert!(approx(v[11], 0.0, 1e-12));
        // identical poses embed identically
        let e2: crate::diffmath::Tensor<f64> = camera_embedding(&canonical_front_pose());
        assert_eq!(v, e2.to_vec());
    }

    #[test]
    fn manifest_round_trip() {
        let views = orbit_cameras(&OrbitSpec::default());
        let entry = PoseManifestEntry::from_view(&views[7]);
        let json = serde_json::to_string(&entry).unwrap();
        let back: PoseManifestEntry = serde_json::from_str(&json).unwrap();
        let v = back.to_view().unwrap();
        assert!(poses_close(&v.pose, &views[7].pose, 1e-12));
    }
}
