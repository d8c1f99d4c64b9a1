//! Multi-view feature grids standing in for image patch embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::generator::{ObjectClass, SceneGraph};
use super::geometry::{project_box, Box2DDepth};
use crate::tensor::Tensor;

pub const GRID_SIDE: usize = 8;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;
pub const FEATURE_DIM: usize = 64;
/// Depth used to normalise distances into `[0, 1]`.
pub const MAX_DEPTH: f64 = 51.2;

const SIGNATURE_SEED: u64 = 0x5eed_0f_c1a55;
const POSE_FEATURES: usize = 6;

/// One `GRID_CELLS × dim` grid per camera, cells in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewFeatures {
    pub grids: Vec<Tensor>,
}

impl MultiViewFeatures {
    pub fn num_cameras(&self) -> usize {
        self.grids.len()
    }

    pub fn dim(&self) -> usize {
        self.grids.first().map_or(0, Tensor::cols)
    }

    pub fn cells(&self) -> usize {
        self.grids.first().map_or(0, Tensor::rows)
    }
}

/// Fixed class and pose encoders, identical for every scene.
struct Signatures {
    class: Vec<Vec<f64>>,
    pose: Tensor,
}

impl Signatures {
    fn new(dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
        let class = ObjectClass::ALL
            .iter()
            .map(|_| {
                let v = Tensor::randn(1, dim, 1.0, &mut rng).into_vec();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n * 2.0).collect()
            })
            .collect();
        let pose = Tensor::randn(POSE_FEATURES, dim, 0.5, &mut rng);
        Self { class, pose }
    }

    fn signature(&self, class: ObjectClass, b: &Box2DDepth, yaw: f64) -> Vec<f64> {
        let [u0, v0, u1, v1] = b.box2d;
        let feats =
            [(u0 + u1) / 2.0, (v0 + v1) / 2.0, (b.depth / MAX_DEPTH).min(1.0), yaw.sin(), yaw.cos(), 1.0];
        let pose = Tensor::row_vector(&feats).matmul(&self.pose);
        self.class[class.index()].iter().zip(pose.data()).map(|(c, p)| c + p).collect()
    }
}

fn background(cam: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(GRID_CELLS, dim);
    for cell in 0..GRID_CELLS {
        for k in 0..dim {
            let phase = 0.37 * ((k + 1) * (cell + 1)) as f64 + 1.3 * cam as f64;
            t.set(cell, k, 0.1 * phase.sin());
        }
    }
    t
}

/// Cells of an `GRID_SIDE²` grid overlapped by a normalized box.
pub fn covered_cells(box2d: [f64; 4]) -> Vec<usize> {
    let [u0, v0, u1, v1] = box2d;
    let side = GRID_SIDE as f64;
    let mut out = Vec::new();
    for row in 0..GRID_SIDE {
        let (top, bottom) = (row as f64 / side, (row + 1) as f64 / side);
        if v1 <= top || v0 >= bottom {
            continue;
        }
        for col in 0..GRID_SIDE {
            let (left, right) = (col as f64 / side, (col + 1) as f64 / side);
            if u1 > left && u0 < right {
                out.push(row * GRID_SIDE + col);
            }
        }
    }
    out
}

pub fn render_views(scene: &SceneGraph) -> MultiViewFeatures {
    render_views_with_dim(scene, FEATURE_DIM)
}

pub fn render_views_with_dim(scene: &SceneGraph, dim: usize) -> MultiViewFeatures {
    let sig = Signatures::new(dim);
    let grids = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(ci, cam)| {
            let mut grid = background(ci, dim);
            for obj in &scene.objects {
                let Some(b) = project_box(&obj.box3d, cam) else { continue };
                let s = sig.signature(obj.class_label, &b, obj.box3d.yaw - scene.ego_pose.heading);
                for cell in covered_cells(b.box2d) {
                    for (g, v) in grid.row_mut(cell).iter_mut().zip(&s) {
                        *g += v;
                    }
                }
            }
            grid
        })
        .collect();
    MultiViewFeatures { grids }
}
