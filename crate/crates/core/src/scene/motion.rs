//! Steering/speed summaries of waypoint trajectories.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LmadError, Result};

pub const TURN_THRESHOLD_DEG: f64 = 15.0;
pub const SPEED_CHANGE_THRESHOLD: f64 = 0.10;
/// Steps shorter than this count as standing still.
const MIN_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Steer {
    Straight,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speed {
    Accelerate,
    Decelerate,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionText {
    pub steer: Steer,
    pub speed: Speed,
}

impl MotionText {
    pub fn all() -> Vec<MotionText> {
        let mut out = Vec::with_capacity(9);
        for steer in [Steer::Straight, Steer::Left, Steer::Right] {
            for speed in [Speed::Accelerate, Speed::Decelerate, Speed::Constant] {
                out.push(MotionText { steer, speed });
            }
        }
        out
    }
}

impl Steer {
    pub fn phrase(self) -> &'static str {
        match self {
            Steer::Straight => "Go straight",
            Steer::Left => "Turn Left",
            Steer::Right => "Turn Right",
        }
    }
}

impl Speed {
    pub fn phrase(self) -> &'static str {
        match self {
            Speed::Accelerate => "acceleration",
            Speed::Decelerate => "deceleration",
            Speed::Constant => "constant speed",
        }
    }
}

impl fmt::Display for MotionText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {}", self.steer.phrase(), self.speed.phrase())
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a <= -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Classifies a trajectory by the heading change between `heading0` and the
/// final step and by the relative change between the first and final step
/// lengths.
pub fn classify_motion(traj: &[[f64; 2]], heading0: f64) -> Result<MotionText> {
    if traj.len() < 2 {
        return Err(LmadError::Input(format!("trajectory needs at least 2 waypoints, got {}", traj.len())));
    }
    let step = |i: usize| [traj[i + 1][0] - traj[i][0], traj[i + 1][1] - traj[i][1]];
    let len = |d: [f64; 2]| d[0].hypot(d[1]);
    let first = step(0);
    let last = step(traj.len() - 2);
    let (v0, v1) = (len(first), len(last));

    let steer = if v1 < MIN_STEP {
        Steer::Straight
    } else {
        let dh = wrap_angle(last[1].atan2(last[0]) - heading0).to_degrees();
        if dh > TURN_THRESHOLD_DEG {
            Steer::Left
        } else if dh < -TURN_THRESHOLD_DEG {
            Steer::Right
        } else {
            Steer::Straight
        }
    };

    let speed = if v0 < MIN_STEP {
        if v1 < MIN_STEP {
            Speed::Constant
        } else {
            Speed::Accelerate
        }
    } else {
        let rel = (v1 - v0) / v0;
        if rel > SPEED_CHANGE_THRESHOLD {
            Speed::Accelerate
        } else if rel < -SPEED_CHANGE_THRESHOLD {
            Speed::Decelerate
        } else {
            Speed::Constant
        }
    };
    Ok(MotionText { steer, speed })
}

/// `"<Steer>, <Speed>"`, e.g. `"Turn Right, constant speed"`.
pub fn derive_motion_text(traj: &[[f64; 2]], heading0: f64) -> Result<String> {
    classify_motion(traj, heading0).map(|m| m.to_string())
}
