//! Seeded synthetic driving scenes.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{camera_rig, Box3D, CameraModel};
use crate::error::{LmadError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
    TrafficSign,
    Barrier,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] =
        [ObjectClass::Car, ObjectClass::Truck, ObjectClass::Pedestrian, ObjectClass::TrafficSign, ObjectClass::Barrier];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    /// Words used in generated text.
    pub fn noun(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::TrafficSign => "traffic sign",
            ObjectClass::Barrier => "barrier",
        }
    }

    pub fn is_static(self) -> bool {
        matches!(self, ObjectClass::TrafficSign | ObjectClass::Barrier)
    }

    fn nominal_size(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [4.5, 1.9, 1.6],
            ObjectClass::Truck => [8.0, 2.5, 3.2],
            ObjectClass::Pedestrian => [0.7, 0.7, 1.75],
            ObjectClass::TrafficSign => [0.3, 0.8, 2.4],
            ObjectClass::Barrier => [0.5, 2.0, 1.0],
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.noun())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: usize,
    pub class_label: ObjectClass,
    pub box3d: Box3D,
    pub velocity: [f64; 2],
    /// Future ground-plane waypoints, one per time step.
    pub traj: Vec<[f64; 2]>,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub position: [f64; 2],
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub seed: u64,
    pub ego_pose: EgoPose,
    pub ego_plan: Vec<[f64; 2]>,
    pub objects: Vec<ObjectState>,
    pub cameras: Vec<CameraModel>,
}

impl SceneGraph {
    /// World ground-plane point expressed in the ego frame (x forward, y left).
    pub fn to_ego(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.ego_pose.heading.sin_cos();
        let d = [p[0] - self.ego_pose.position[0], p[1] - self.ego_pose.position[1]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }

    pub fn object(&self, id: usize) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn horizon(&self) -> usize {
        self.ego_plan.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub objects_min: usize,
    pub objects_max: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Number of future waypoints.
    pub horizon: usize,
    /// Seconds between waypoints.
    pub dt: f64,
    pub num_cameras: usize,
    /// Objects spawn within this ground distance of the ego vehicle.
    pub spawn_radius: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            objects_min: 1,
            objects_max: 5,
            speed_min: 2.0,
            speed_max: 12.0,
            horizon: 6,
            dt: 0.5,
            num_cameras: 6,
            spawn_radius: 40.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects_min > self.objects_max {
            return Err(LmadError::Config(format!(
                "object range min {} > max {}",
                self.objects_min, self.objects_max
            )));
        }
        if !(self.speed_min <= self.speed_max) || self.speed_min < 0.0 {
            return Err(LmadError::Config(format!("speed range [{}, {}] is invalid", self.speed_min, self.speed_max)));
        }
        if self.horizon < 2 {
            return Err(LmadError::Config(format!("horizon must be at least 2, got {}", self.horizon)));
        }
        if self.num_cameras != 6 {
            return Err(LmadError::Config(format!("the rig has 6 cameras, got {}", self.num_cameras)));
        }
        if !(self.dt > 0.0) || !(self.spawn_radius > 5.0) {
            return Err(LmadError::Config("dt must be positive and spawn_radius above 5 m".into()));
        }
        Ok(())
    }
}

/// Unicycle rollout: `k` waypoints after the start, using a per-step
/// yaw rate and acceleration.
fn rollout(start: [f64; 2], heading: f64, speed: f64, yaw_rate: f64, accel: f64, dt: f64, k: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(k);
    let (mut p, mut h, mut v) = (start, heading, speed);
    for _ in 0..k {
        h += yaw_rate * dt;
        v = (v + accel * dt).max(0.0);
        p = [p[0] + v * dt * h.cos(), p[1] + v * dt * h.sin()];
        out.push(p);
    }
    out
}

fn pick_maneuver<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let yaw_rate = match rng.random_range(0..4) {
        0 => 0.35,
        1 => -0.35,
        _ => rng.random_range(-0.02..0.02),
    };
    let accel = match rng.random_range(0..3) {
        0 => 2.0,
        1 => -2.0,
        _ => 0.0,
    };
    (yaw_rate, accel)
}

pub fn gen_scene(seed: u64, cfg: &GenConfig) -> Result<SceneGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego_pose = EgoPose {
        position: [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)],
        heading: rng.random_range(-PI..PI),
    };
    let ego_speed = rng.random_range(4.0..10.0);
    let (yaw_rate, accel) = pick_maneuver(&mut rng);
    let ego_plan = rollout(ego_pose.position, ego_pose.heading, ego_speed, yaw_rate, accel, cfg.dt, cfg.horizon);

    let (s, c) = ego_pose.heading.sin_cos();
    let to_world = |p: [f64; 2]| {
        [ego_pose.position[0] + c * p[0] - s * p[1], ego_pose.position[1] + s * p[0] + c * p[1]]
    };

    let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut objects: Vec<ObjectState> = Vec::with_capacity(count);
    let mut placed_ego: Vec<[f64; 2]> = Vec::new();
    for _ in 0..count {
        let class = ObjectClass::ALL[rng.random_range(0..ObjectClass::ALL.len())];
        // Rejection-sample a free spot; give up on this object after 20 tries.
        let mut spot = None;
        for _ in 0..20 {
            let r = rng.random_range(5.0..cfg.spawn_radius);
            let bearing = rng.random_range(-PI..PI);
            let p = [r * bearing.cos(), r * bearing.sin()];
            if placed_ego.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) > 4.0) {
                spot = Some((p, r));
                break;
            }
        }
        let Some((p_ego, dist)) = spot else { continue };
        placed_ego.push(p_ego);

        let nominal = class.nominal_size();
        let size = nominal.map(|x| x * rng.random_range(0.9..1.1));
        let yaw = ego_pose.heading + rng.random_range(-PI..PI);
        let center_xy = to_world(p_ego);
        let speed = if class.is_static() {
            0.0
        } else if class == ObjectClass::Pedestrian {
            rng.random_range(0.5..1.8)
        } else if rng.random_bool(0.7) {
            rng.random_range(cfg.speed_min..=cfg.speed_max)
        } else {
            0.0
        };
        let (obj_yaw_rate, obj_accel) = if speed > 0.0 { pick_maneuver(&mut rng) } else { (0.0, 0.0) };
        let traj = if speed > 0.0 {
            rollout(center_xy, yaw, speed, obj_yaw_rate, obj_accel, cfg.dt, cfg.horizon)
        } else {
            vec![center_xy; cfg.horizon]
        };
        let confidence = (1.0 - dist / (2.0 * cfg.spawn_radius) + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        objects.push(ObjectState {
            id: objects.len(),
            class_label: class,
            box3d: Box3D { center: [center_xy[0], center_xy[1], size[2] / 2.0], size, yaw },
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            traj,
            confidence,
        });
    }

    Ok(SceneGraph { seed, cameras: camera_rig(ego_pose.position, ego_pose.heading), ego_pose, ego_plan, objects })
}
