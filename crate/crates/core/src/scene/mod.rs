//! Synthetic driving world: scenes, multi-view features, QA records.

pub mod ctag;
pub mod dataset;
pub mod generator;
pub mod geometry;
pub mod motion;
pub mod qa;
pub mod render;

pub use ctag::CTag;
pub use dataset::{read_records, split_records, write_records, Split};
pub use generator::{gen_scene, EgoPose, GenConfig, ObjectClass, ObjectState, SceneGraph};
pub use geometry::{project_box, Box2DDepth, Box3D, CameraModel, CameraName};
pub use motion::{classify_motion, derive_motion_text, MotionText};
pub use qa::{gen_qa, resolve_tag, QARecord};
pub use render::{render_views, MultiViewFeatures};

use crate::error::Result;

/// Ground distance beyond which objects are never called important.
pub const IMPORTANT_RADIUS: f64 = 35.0;
pub const MAX_IMPORTANT: usize = 3;

/// An object whose centre lies inside at least one camera frustum, assigned
/// to the camera whose optical axis is closest to it.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleObject {
    pub id: usize,
    pub cam: CameraName,
    pub projection: Box2DDepth,
    pub center_px: (f64, f64),
    pub tag: CTag,
    /// Ground-plane distance from the ego vehicle.
    pub distance: f64,
}

pub fn visible_object(scene: &SceneGraph, obj: &ObjectState) -> Option<VisibleObject> {
    let mut best: Option<(f64, VisibleObject)> = None;
    for cam in &scene.cameras {
        let Some(px) = cam.project_point(obj.box3d.center) else { continue };
        let Some(projection) = project_box(&obj.box3d, cam) else { continue };
        let pc = cam.to_camera(obj.box3d.center);
        let off_axis = pc[0].hypot(pc[1]).atan2(pc[2]);
        if best.as_ref().is_some_and(|(a, _)| *a <= off_axis) {
            continue;
        }
        let e = scene.to_ego([obj.box3d.center[0], obj.box3d.center[1]]);
        let tag = CTag::for_object(obj.id, cam.name, px.0.round() as i64, px.1.round() as i64);
        best = Some((
            off_axis,
            VisibleObject { id: obj.id, cam: cam.name, projection, center_px: px, tag, distance: e[0].hypot(e[1]) },
        ));
    }
    best.map(|(_, v)| v)
}

/// Visible objects in id order.
pub fn visible_objects(scene: &SceneGraph) -> Vec<VisibleObject> {
    scene.objects.iter().filter_map(|o| visible_object(scene, o)).collect()
}

/// Up to three visible objects within the importance radius, nearest first.
pub fn important_objects(scene: &SceneGraph) -> Vec<VisibleObject> {
    let mut v: Vec<_> = visible_objects(scene).into_iter().filter(|o| o.distance <= IMPORTANT_RADIUS).collect();
    v.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    v.truncate(MAX_IMPORTANT);
    v
}

/// Motion of an object over its future trajectory, starting from its current centre.
pub fn object_motion(obj: &ObjectState) -> Result<MotionText> {
    let mut path = vec![[obj.box3d.center[0], obj.box3d.center[1]]];
    path.extend_from_slice(&obj.traj);
    classify_motion(&path, obj.box3d.yaw)
}

/// Motion of the ego vehicle along its plan.
pub fn ego_motion(scene: &SceneGraph) -> Result<MotionText> {
    let mut path = vec![scene.ego_pose.position];
    path.extend_from_slice(&scene.ego_plan);
    classify_motion(&path, scene.ego_pose.heading)
}
