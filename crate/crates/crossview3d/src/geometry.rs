//! Box algebra and camera projection shared by every other module.
//!
//! Conventions used throughout the crate:
//!
//! * 3D boxes live in a gravity-aligned camera frame: x right, y down,
//!   z forward, origin at the camera optical center. The ground plane is the
//!   x–z plane, so BEV IoU is computed directly in x–z.
//! * Camera pitch is applied as a rigid rotation about the x axis at
//!   projection time; a negative pitch looks down.
//! * Yaw is the heading about the (downward) y axis, wrapped to [-π, π);
//!   yaw = 0 points along +z with the box length along z.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("point has non-positive depth after pose transform (z = {0})")]
    NonPositiveDepth(f64),
}

/// Wraps an angle to [-π, π).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if r < 0.0 {
        r += two_pi;
    }
    r - std::f64::consts::PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Car,
}

/// Difficulty bands are cumulative: easy ⊆ moderate ⊆ hard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

/// Oriented 3D cuboid in the gravity-aligned camera frame.
///
/// `dims` is (h, w, l): height along y, width along x at yaw 0, length along
/// z at yaw 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub category: Category,
    pub difficulty: Difficulty,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Self {
        debug_assert!(dims.iter().all(|d| *d > 0.0), "dims must be positive");
        Box3D {
            center,
            dims,
            yaw: wrap_angle(yaw),
            category: Category::Car,
            difficulty: Difficulty::Easy,
        }
    }

    pub fn with_difficulty(mut self, d: Difficulty) -> Self {
        self.difficulty = d;
        self
    }

    /// Footprint corners in the x–z ground plane, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hw, hl) = (self.dims[1] / 2.0, self.dims[2] / 2.0);
        let (s, c) = self.yaw.sin_cos();
        let local = [[hw, hl], [-hw, hl], [-hw, -hl], [hw, -hl]];
        let mut out = [[0.0; 2]; 4];
        for (o, [lx, lz]) in out.iter_mut().zip(local) {
            o[0] = self.center[0] + lx * c + lz * s;
            o[1] = self.center[2] - lx * s + lz * c;
        }
        out
    }
}

/// Axis-aligned 2D box in normalized image coordinates (center + size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2D { cx, cy, w, h }
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Pinhole intrinsics plus the mounting pose (height over ground, pitch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height_above_ground: f64,
    /// Radians; negative pitches the optical axis toward the ground.
    pub pitch: f64,
    /// (width, height) in pixels.
    pub image_size: (u32, u32),
}

impl CameraModel {
    /// Applies the pitch rotation to a point in the gravity-aligned frame.
    pub fn apply_pose(&self, p: [f64; 3]) -> [f64; 3] {
        let a = -self.pitch;
        let (s, c) = a.sin_cos();
        [p[0], p[1] * c - p[2] * s, p[1] * s + p[2] * c]
    }

    /// Projects a camera-frame point to normalized image coordinates.
    pub fn project_point(&self, p: [f64; 3]) -> Result<[f64; 2], GeomError> {
        let q = self.apply_pose(p);
        if q[2] <= 0.0 {
            return Err(GeomError::NonPositiveDepth(q[2]));
        }
        let u = self.fx * q[0] / q[2] + self.cx;
        let v = self.fy * q[1] / q[2] + self.cy;
        Ok([u / self.image_size.0 as f64, v / self.image_size.1 as f64])
    }
}

/// A scored prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub box3d: Box3D,
    pub box2d: Box2D,
    pub score: f64,
}

/// Projects the 3D box center into normalized image coordinates.
///
/// Values may leave [0,1] for out-of-frame centers; only z ≤ 0 after the pose
/// transform is an error.
pub fn project_center(b: &Box3D, cam: &CameraModel) -> Result<[f64; 2], GeomError> {
    cam.project_point(b.center)
}

/// Inverse of [`project_center`]: recovers the camera-frame point whose
/// normalized image position is (u, v) and whose gravity-aligned forward
/// distance (z) equals `depth`.
pub fn unproject_center(uv: [f64; 2], depth: f64, cam: &CameraModel) -> [f64; 3] {
    let px = uv[0] * cam.image_size.0 as f64;
    let py = uv[1] * cam.image_size.1 as f64;
    // ray in the pitched frame, then rotate back to the gravity-aligned frame
    let r = [(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0];
    let a = cam.pitch; // inverse of apply_pose's Rx(-pitch)
    let (s, c) = a.sin_cos();
    let rp = [r[0], r[1] * c - r[2] * s, r[1] * s + r[2] * c];
    let t = depth / rp[2];
    [rp[0] * t, rp[1] * t, rp[2] * t]
}

/// Intersection-over-union of axis-aligned normalized boxes.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Signed area of a polygon (positive when counter-clockwise).
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc / 2.0
}

/// Sutherland–Hodgman clip of `subject` against convex `clip` (CCW).
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        // inside = left of directed edge a→b for a CCW clip polygon
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
            let dx = q[0] - p[0];
            let dy = q[1] - p[1];
            let num = (b[0] - a[0]) * (a[1] - p[1]) - (b[1] - a[1]) * (a[0] - p[0]);
            let den = (b[1] - a[1]) * dx - (b[0] - a[0]) * dy;
            if den.abs() < 1e-30 {
                return p;
            }
            let t = -num / den;
            [p[0] + t * dx, p[1] + t * dy]
        };
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur));
            }
        }
    }
    output
}

/// Ensures counter-clockwise orientation.
fn ccw(mut poly: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    if polygon_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Overlap area of two yaw-rotated BEV footprints via exact polygon clipping.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let pa = ccw(a.bev_corners().to_vec());
    let pb = ccw(b.bev_corners().to_vec());
    polygon_area(&ccw(clip_polygon(&pa, &pb))).abs()
}

/// IoU of the yaw-rotated ground-plane footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let area_a = a.dims[1] * a.dims[2];
    let area_b = b.dims[1] * b.dims[2];
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// 3D IoU: BEV overlap × vertical overlap over the union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter_bev = bev_intersection_area(a, b);
    // y is down; the box spans [cy - h/2, cy + h/2]
    let (a0, a1) = (a.center[1] - a.dims[0] / 2.0, a.center[1] + a.dims[0] / 2.0);
    let (b0, b1) = (b.center[1] - b.dims[0] / 2.0, b.center[1] + b.dims[0] / 2.0);
    let h_overlap = (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = inter_bev * h_overlap;
    let vol_a = a.dims[0] * a.dims[1] * a.dims[2];
    let vol_b = b.dims[0] * b.dims[1] * b.dims[2];
    let union = vol_a + vol_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU of axis-aligned normalized boxes, in [-1, 1].
pub fn giou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam_128() -> CameraModel {
        CameraModel {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            height_above_ground: 0.0,
            pitch: 0.0,
            image_size: (128, 128),
        }
    }

    #[test]
    fn project_principal_axis() {
        let b = Box3D::new([0.0, 0.0, 10.0], [1.5, 1.8, 4.2], 0.0);
        let p = project_center(&b, &cam_128()).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn project_offset_center() {
        let b = Box3D::new([1.0, 0.0, 10.0], [1.5, 1.8, 4.2], 0.0);
        let p = project_center(&b, &cam_128()).unwrap();
        assert!((p[0] - 0.578125).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn project_behind_camera_fails() {
        let b = Box3D::new([0.0, 0.0, -1.0], [1.5, 1.8, 4.2], 0.0);
        assert!(matches!(
            project_center(&b, &cam_128()),
            Err(GeomError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn project_scale_invariance() {
        // scaling fx, fy, cx, cy, W, H together leaves normalized output fixed
        let b = Box3D::new([1.3, -0.4, 17.0], [1.5, 1.8, 4.2], 0.3);
        let c1 = cam_128();
        let c2 = CameraModel {
            fx: 300.0,
            fy: 300.0,
            cx: 192.0,
            cy: 192.0,
            image_size: (384, 384),
            ..c1
        };
        let p1 = project_center(&b, &c1).unwrap();
        let p2 = project_center(&b, &c2).unwrap();
        assert!((p1[0] - p2[0]).abs() < 1e-12 && (p1[1] - p2[1]).abs() < 1e-12);
    }

    #[test]
    fn iou_2d_cases() {
        let a = Box2D::new(0.25, 0.25, 0.5, 0.5);
        assert!((iou_2d(&a, &a) - 1.0).abs() < 1e-12);
        let far = Box2D::new(0.9, 0.9, 0.1, 0.1);
        assert_eq!(iou_2d(&a, &far), 0.0);
        let b = Box2D::new(0.5, 0.5, 0.5, 0.5);
        let expect = 0.0625 / (2.0 * 0.25 - 0.0625);
        assert!((iou_2d(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn iou_bev_identity_and_square_rotation() {
        let a = Box3D::new([0.0, 0.0, 10.0], [1.5, 2.0, 4.0], 0.2);
        assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-9);
        // square footprint is invariant under a π/2 yaw
        let s1 = Box3D::new([0.0, 0.0, 10.0], [1.5, 3.0, 3.0], 0.0);
        let s2 = Box3D::new([0.0, 0.0, 10.0], [1.5, 3.0, 3.0], std::f64::consts::FRAC_PI_2);
        assert!((iou_bev(&s1, &s2) - 1.0).abs() < 1e-9);
    }

    /// Monte-Carlo BEV IoU oracle: samples points in the joint bounding box.
    fn mc_iou_bev(a: &Box3D, b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let inside = |bx: &Box3D, p: [f64; 2]| {
            let (s, c) = bx.yaw.sin_cos();
            let dx = p[0] - bx.center[0];
            let dz = p[1] - bx.center[2];
            // inverse rotation back to the box frame
            let lx = dx * c - dz * s;
            let lz = dx * s + dz * c;
            lx.abs() <= bx.dims[1] / 2.0 && lz.abs() <= bx.dims[2] / 2.0
        };
        let corners: Vec<[f64; 2]> = a
            .bev_corners()
            .iter()
            .chain(b.bev_corners().iter())
            .copied()
            .collect();
        let x0 = corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
        let x1 = corners.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
        let z0 = corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
        let z1 = corners.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max);
        let (mut ni, mut nu) = (0u64, 0u64);
        for _ in 0..n {
            let p = [rng.gen_range(x0..x1), rng.gen_range(z0..z1)];
            let (ia, ib) = (inside(a, p), inside(b, p));
            if ia && ib {
                ni += 1;
            }
            if ia || ib {
                nu += 1;
            }
        }
        if nu == 0 {
            0.0
        } else {
            ni as f64 / nu as f64
        }
    }

    #[test]
    fn iou_bev_axis_aligned_offset_vs_mc_oracle() {
        // 2m x 4m footprints offset 1m along x
        let a = Box3D::new([0.0, 0.0, 10.0], [1.5, 2.0, 4.0], 0.0);
        let b = Box3D::new([1.0, 0.0, 10.0], [1.5, 2.0, 4.0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mc = mc_iou_bev(&a, &b, 1_000_000, &mut rng);
        let exact = iou_bev(&a, &b);
        // closed form: inter = 1*4 = 4, union = 8+8-4 = 12
        assert!((exact - 4.0 / 12.0).abs() < 1e-9);
        assert!((exact - mc).abs() < 0.003, "exact {exact} vs mc {mc}");
    }

    #[test]
    fn iou_bev_random_pairs_vs_mc_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                Box3D::new(
                    [rng.gen_range(-2.0..2.0), 0.0, rng.gen_range(8.0..12.0)],
                    [1.5, rng.gen_range(1.0..3.0), rng.gen_range(2.0..5.0)],
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                )
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let exact = iou_bev(&a, &b);
            let mc = mc_iou_bev(&a, &b, 200_000, &mut rng);
            assert!(
                (exact - mc).abs() < 0.005,
                "exact {exact} vs mc {mc} for {a:?} {b:?}"
            );
        }
    }

    #[test]
    fn iou_3d_cases() {
        let a = Box3D::new([0.0, 0.0, 10.0], [2.0, 2.0, 4.0], 0.1);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-9);
        // vertical offset by the full height: no overlap
        let mut b = a;
        b.center[1] += a.dims[0];
        assert_eq!(iou_3d(&a, &b), 0.0);
        // same footprint, half-height vertical overlap: 1/3
        let mut c = a;
        c.center[1] += a.dims[0] / 2.0;
        assert!((iou_3d(&a, &c) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn iou_symmetry_and_bounds_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                Box3D::new(
                    [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(5.0..20.0),
                    ],
                    [
                        rng.gen_range(1.0..2.5),
                        rng.gen_range(1.0..2.5),
                        rng.gen_range(2.0..5.0),
                    ],
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                )
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            for f in [iou_bev, iou_3d] {
                let ab = f(&a, &b);
                let ba = f(&b, &a);
                assert!((ab - ba).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&ab));
            }
        }
    }

    #[test]
    fn giou_matches_iou_when_overlapping_fully() {
        let a = Box2D::new(0.5, 0.5, 0.2, 0.2);
        assert!((giou_2d(&a, &a) - 1.0).abs() < 1e-12);
        let b = Box2D::new(0.9, 0.9, 0.1, 0.1);
        assert!(giou_2d(&a, &b) < 0.0); // disjoint boxes go negative
    }

    #[test]
    fn unproject_inverts_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let cam = CameraModel {
                fx: 80.0,
                fy: 80.0,
                cx: 32.0,
                cy: 16.0,
                height_above_ground: rng.gen_range(1.0..7.0),
                pitch: rng.gen_range(-0.35..0.0),
                image_size: (64, 32),
            };
            let p = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.0..6.0),
                rng.gen_range(5.0..50.0),
            ];
            let uv = cam.project_point(p).unwrap();
            let q = unproject_center(uv, p[2], &cam);
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-9, "{p:?} vs {q:?}");
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -3.2, 0.0, 3.1415, 9.0, 100.0] {
            let w = wrap_angle(a);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
        }
    }
}
