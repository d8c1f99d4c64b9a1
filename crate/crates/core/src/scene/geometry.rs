//! Pinhole camera rig and 3D→2D box projection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LmadError;

/// Points closer than this to the camera plane are treated as behind it.
pub const NEAR_PLANE: f64 = 0.1;
pub const IMAGE_WIDTH: u32 = 1600;
pub const IMAGE_HEIGHT: u32 = 900;
pub const CAMERA_FOV_DEG: f64 = 70.0;
pub const CAMERA_HEIGHT: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CameraName {
    Front,
    FrontLeft,
    FrontRight,
    Back,
    BackLeft,
    BackRight,
}

impl CameraName {
    pub const ALL: [CameraName; 6] = [
        CameraName::Front,
        CameraName::FrontLeft,
        CameraName::FrontRight,
        CameraName::Back,
        CameraName::BackLeft,
        CameraName::BackRight,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    /// Short view label used in prompts, e.g. `front-left`.
    pub fn label(self) -> &'static str {
        match self {
            CameraName::Front => "front",
            CameraName::FrontLeft => "front-left",
            CameraName::FrontRight => "front-right",
            CameraName::Back => "back",
            CameraName::BackLeft => "back-left",
            CameraName::BackRight => "back-right",
        }
    }

    /// Identifier used inside c-tags, e.g. `CAM_FRONT_LEFT`.
    pub fn token(self) -> &'static str {
        match self {
            CameraName::Front => "CAM_FRONT",
            CameraName::FrontLeft => "CAM_FRONT_LEFT",
            CameraName::FrontRight => "CAM_FRONT_RIGHT",
            CameraName::Back => "CAM_BACK",
            CameraName::BackLeft => "CAM_BACK_LEFT",
            CameraName::BackRight => "CAM_BACK_RIGHT",
        }
    }

    /// Mounting yaw relative to the ego heading, counter-clockwise positive.
    pub fn yaw_offset(self) -> f64 {
        let deg: f64 = match self {
            CameraName::Front => 0.0,
            CameraName::FrontLeft => 60.0,
            CameraName::FrontRight => -60.0,
            CameraName::Back => 180.0,
            CameraName::BackLeft => 120.0,
            CameraName::BackRight => -120.0,
        };
        deg.to_radians()
    }
}

impl fmt::Display for CameraName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for CameraName {
    type Err = LmadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.token() == s || c.label() == s)
            .ok_or_else(|| LmadError::Input(format!("unknown camera {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre.
    pub fn from_fov(horizontal_fov_deg: f64, width: u32, height: u32) -> Self {
        let fx = (width as f64 / 2.0) / (horizontal_fov_deg.to_radians() / 2.0).tan();
        Self { fx, fy: fx, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }
}

/// Rigid world→camera transform, `p_cam = R·p_world + t`.
///
/// Camera axes: x right, y down, z along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsic {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Extrinsic {
    /// Camera at `position` looking horizontally along world yaw `yaw`.
    pub fn looking_along(position: [f64; 3], yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let forward = [c, s, 0.0];
        let rotation = [right, down, forward];
        let translation = [
            -dot(rotation[0], position),
            -dot(rotation[1], position),
            -dot(rotation[2], position),
        ];
        Self { rotation, translation }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            dot(self.rotation[0], p) + self.translation[0],
            dot(self.rotation[1], p) + self.translation[1],
            dot(self.rotation[2], p) + self.translation[2],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub name: CameraName,
    pub extrinsic: Extrinsic,
    pub intrinsic: Intrinsics,
    pub image_size: (u32, u32),
}

impl CameraModel {
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        self.extrinsic.apply(p)
    }

    /// Pixel coordinates of a camera-frame point in front of the near plane.
    pub fn pixel(&self, pc: [f64; 3]) -> Option<(f64, f64)> {
        (pc[2] > NEAR_PLANE).then(|| self.pixel_unchecked(pc))
    }

    fn pixel_unchecked(&self, pc: [f64; 3]) -> (f64, f64) {
        let k = &self.intrinsic;
        (k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy)
    }

    /// Projection of a world point if it lands inside the image.
    pub fn project_point(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        self.pixel(self.to_camera(p)).filter(|&(u, v)| (0.0..=w).contains(&u) && (0.0..=h).contains(&v))
    }
}

/// Standard six-camera rig mounted on an ego vehicle.
pub fn camera_rig(ego_xy: [f64; 2], ego_heading: f64) -> Vec<CameraModel> {
    let intrinsic = Intrinsics::from_fov(CAMERA_FOV_DEG, IMAGE_WIDTH, IMAGE_HEIGHT);
    CameraName::ALL
        .iter()
        .map(|&name| CameraModel {
            name,
            extrinsic: Extrinsic::looking_along(
                [ego_xy[0], ego_xy[1], CAMERA_HEIGHT],
                ego_heading + name.yaw_offset(),
            ),
            intrinsic,
            image_size: (IMAGE_WIDTH, IMAGE_HEIGHT),
        })
        .collect()
}

/// Oriented 3D box: centre, size `(l, w, h)` and yaw about the vertical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    /// Corner `i` has signs `(bit0, bit1, bit2)` on `(l, w, h)`.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let dx = if i & 1 == 0 { -0.5 } else { 0.5 } * self.size[0];
            let dy = if i & 2 == 0 { -0.5 } else { 0.5 } * self.size[1];
            let dz = if i & 4 == 0 { -0.5 } else { 0.5 } * self.size[2];
            *corner = [
                self.center[0] + c * dx - s * dy,
                self.center[1] + s * dx + c * dy,
                self.center[2] + dz,
            ];
        }
        out
    }

    /// Box parameters as `[x, y, z, l, w, h, yaw]`.
    pub fn to_array(&self) -> [f64; 7] {
        [self.center[0], self.center[1], self.center[2], self.size[0], self.size[1], self.size[2], self.yaw]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2DDepth {
    pub cam: CameraName,
    /// Normalized `(u_min, v_min, u_max, v_max)`.
    pub box2d: [f64; 4],
    pub depth: f64,
}

impl Box2DDepth {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let [u0, v0, u1, v1] = self.box2d;
        (u0..=u1).contains(&u) && (v0..=v1).contains(&v)
    }
}

/// Normalized image-plane box and depth of `b` in `cam`, or `None` when the
/// box is entirely behind the camera or its clipped projection is empty.
///
/// Corners behind the near plane are replaced by the near-plane crossings
/// of the box edges, so the result bounds the visible part of the box.
pub fn project_box(b: &Box3D, cam: &CameraModel) -> Option<Box2DDepth> {
    let corners = b.corners().map(|p| cam.to_camera(p));
    if corners.iter().all(|p| p[2] <= NEAR_PLANE) {
        return None;
    }
    let mut pts: Vec<[f64; 3]> = corners.iter().copied().filter(|p| p[2] > NEAR_PLANE).collect();
    for i in 0..8 {
        for bit in [1, 2, 4] {
            let j = i | bit;
            if j == i {
                continue;
            }
            let (a, c) = (corners[i], corners[j]);
            if (a[2] > NEAR_PLANE) != (c[2] > NEAR_PLANE) {
                let t = (NEAR_PLANE - a[2]) / (c[2] - a[2]);
                pts.push([a[0] + t * (c[0] - a[0]), a[1] + t * (c[1] - a[1]), NEAR_PLANE]);
            }
        }
    }
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        let (u, v) = cam.pixel_unchecked(p);
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let (w, h) = (cam.image_size.0 as f64, cam.image_size.1 as f64);
    let (u0, u1) = (u0.clamp(0.0, w), u1.clamp(0.0, w));
    let (v0, v1) = (v0.clamp(0.0, h), v1.clamp(0.0, h));
    if u1 <= u0 || v1 <= v0 {
        return None;
    }
    let c = cam.to_camera(b.center);
    let depth = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt().max(f64::MIN_POSITIVE);
    Some(Box2DDepth { cam: cam.name, box2d: [u0 / w, v0 / h, u1 / w, v1 / h], depth })
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin_camera(yaw: f64) -> CameraModel {
        CameraModel {
            name: CameraName::Front,
            extrinsic: Extrinsic::looking_along([0.0, 0.0, 0.0], yaw),
            intrinsic: Intrinsics::from_fov(CAMERA_FOV_DEG, IMAGE_WIDTH, IMAGE_HEIGHT),
            image_size: (IMAGE_WIDTH, IMAGE_HEIGHT),
        }
    }

    #[test]
    fn on_axis_box_projects_to_centre() {
        let cam = origin_camera(0.0);
        let b = Box3D { center: [10.0, 0.0, 0.0], size: [2.0, 2.0, 2.0], yaw: 0.0 };
        let p = project_box(&b, &cam).unwrap();
        let [u0, v0, u1, v1] = p.box2d;
        assert!(((u0 + u1) / 2.0 - 0.5).abs() < 1e-12);
        assert!(((v0 + v1) / 2.0 - 0.5).abs() < 1e-12);
        assert!((p.depth - 10.0).abs() < 1e-12);
    }

    #[test]
    fn box_behind_camera_is_rejected() {
        let cam = origin_camera(0.0);
        let b = Box3D { center: [-10.0, 0.0, 0.0], size: [2.0, 2.0, 2.0], yaw: 0.3 };
        assert!(project_box(&b, &cam).is_none());
    }

    #[test]
    fn box_outside_the_image_is_rejected() {
        let cam = origin_camera(0.0);
        // 80° off-axis, beyond the 35° half field of view.
        let b = Box3D { center: [2.0, 11.3, 0.0], size: [1.0, 1.0, 1.0], yaw: 0.0 };
        assert!(project_box(&b, &cam).is_none());
    }

    #[test]
    fn straddling_box_keeps_center_inside() {
        let cam = origin_camera(0.0);
        let b = Box3D { center: [1.0, 0.0, 0.0], size: [4.0, 1.0, 1.0], yaw: 0.0 };
        let p = project_box(&b, &cam).unwrap();
        assert!(p.contains(0.5, 0.5));
    }

    #[test]
    fn rig_has_six_distinct_cameras_60_degrees_apart() {
        let rig = camera_rig([3.0, -2.0], 0.4);
        assert_eq!(rig.len(), 6);
        let mut names: Vec<_> = rig.iter().map(|c| c.name).collect();
        names.dedup();
        assert_eq!(names.len(), 6);
        assert!(rig.iter().all(|c| c.intrinsic.fx > 0.0 && c.intrinsic.fy > 0.0));
        let front = rig[0].extrinsic.rotation[2];
        let left = rig[1].extrinsic.rotation[2];
        let cos = front[0] * left[0] + front[1] * left[1];
        assert!((cos - 0.5).abs() < 1e-12);
    }
}
