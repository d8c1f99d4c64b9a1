//! Synthetic stand-in for an end-to-end driving stack: ground truth plus
//! Gaussian noise, with fixed encodings lifted by trainable heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::scene::geometry::{project_box, Box2DDepth, Box3D};
use crate::scene::render::MAX_DEPTH;
use crate::scene::{visible_object, ObjectClass, SceneGraph};
use crate::tensor::Tensor;

pub const NOISE_SALT: u64 = 0xbac4_b0e5_0015_e000;
const ENCODING_SEED: u64 = 0xe2e0_f1bed;
/// Distance scale of the confidence decay `exp(-d / CONFIDENCE_SCALE)`.
pub const CONFIDENCE_SCALE: f64 = 50.0;
/// Metres per unit in trajectory encodings and numerical prompts.
pub const TRAJ_SCALE: f64 = 10.0;
pub const BOX_PARAMS: usize = 7;
pub const DET_STATE: usize = 9 + ObjectClass::ALL.len();

/// One detected object: perturbed ego-frame box and trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub class_label: ObjectClass,
    /// Ego-frame box (x forward, y left), yaw relative to the ego heading.
    pub box3d: Box3D,
    /// Ego-frame future waypoints.
    pub traj: Vec<[f64; 2]>,
    pub confidence: f64,
    pub view: Box2DDepth,
    pub det_encoding: Tensor,
    pub mot_encoding: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgoEntry {
    /// Ego-frame planned waypoints.
    pub plan: Vec<[f64; 2]>,
    pub encoding: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2EBackboneOutput {
    pub instances: Vec<Instance>,
    pub ego: EgoEntry,
}

/// Fixed random projections shared by every scene.
struct Encoders {
    det: Tensor,
    mot: Tensor,
    ego: Tensor,
}

impl Encoders {
    fn new(horizon: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODING_SEED ^ (horizon as u64) << 32 ^ dim as u64);
        Self {
            det: Tensor::randn(DET_STATE, dim, 1.0 / (DET_STATE as f64).sqrt(), &mut rng),
            mot: Tensor::randn(2 * horizon + 2, dim, 1.0 / ((2 * horizon + 2) as f64).sqrt(), &mut rng),
            ego: Tensor::randn(2 * horizon, dim, 1.0 / ((2 * horizon) as f64).sqrt(), &mut rng),
        }
    }

    fn encode(state: &[f64], proj: &Tensor) -> Tensor {
        Tensor::row_vector(state).matmul(proj).map(f64::tanh)
    }
}

pub fn flatten_traj(traj: &[[f64; 2]], origin: [f64; 2]) -> Vec<f64> {
    traj.iter().flat_map(|p| [(p[0] - origin[0]) / TRAJ_SCALE, (p[1] - origin[1]) / TRAJ_SCALE]).collect()
}

fn det_state(b: &Box3D, class: ObjectClass, confidence: f64) -> Vec<f64> {
    let mut s = vec![
        b.center[0] / MAX_DEPTH,
        b.center[1] / MAX_DEPTH,
        b.center[2] / 5.0,
        b.size[0] / 10.0,
        b.size[1] / 10.0,
        b.size[2] / 10.0,
        b.yaw.sin(),
        b.yaw.cos(),
        confidence,
    ];
    s.extend(ObjectClass::ALL.iter().map(|&c| if c == class { 1.0 } else { 0.0 }));
    s
}

/// Box in the ego frame, yaw relative to the ego heading.
pub fn box_to_ego(scene: &SceneGraph, b: &Box3D) -> Box3D {
    let c = scene.to_ego([b.center[0], b.center[1]]);
    Box3D { center: [c[0], c[1], b.center[2]], size: b.size, yaw: b.yaw - scene.ego_pose.heading }
}

fn box_to_world(scene: &SceneGraph, b: &Box3D) -> Box3D {
    let (s, c) = scene.ego_pose.heading.sin_cos();
    let p = scene.ego_pose.position;
    let x = [p[0] + c * b.center[0] - s * b.center[1], p[1] + s * b.center[0] + c * b.center[1]];
    Box3D { center: [x[0], x[1], b.center[2]], size: b.size, yaw: b.yaw + scene.ego_pose.heading }
}

/// Detects every object visible in some camera; perturbations are
/// deterministic in `(scene.seed, rng_seed)`.
pub fn synthetic_backbone(scene: &SceneGraph, noise: f64, rng_seed: u64, enc_dim: usize) -> E2EBackboneOutput {
    let k = scene.horizon();
    let enc = Encoders::new(k, enc_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ NOISE_SALT ^ rng_seed.rotate_left(17));
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut jitter = move || if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };

    let mut instances = Vec::new();
    for obj in &scene.objects {
        let Some(vis) = visible_object(scene, obj) else { continue };
        let gt = box_to_ego(scene, &obj.box3d);
        let box3d = Box3D {
            center: [gt.center[0] + jitter(), gt.center[1] + jitter(), gt.center[2] + 0.2 * jitter()],
            size: gt.size.map(|s| (s * (1.0 + 0.1 * jitter())).max(0.05)),
            yaw: gt.yaw + 0.1 * jitter(),
        };
        let traj: Vec<[f64; 2]> = obj
            .traj
            .iter()
            .map(|p| {
                let e = scene.to_ego(*p);
                [e[0] + (box3d.center[0] - gt.center[0]) + 0.5 * jitter(), e[1] + (box3d.center[1] - gt.center[1]) + 0.5 * jitter()]
            })
            .collect();
        let distance = box3d.center[0].hypot(box3d.center[1]);
        let confidence = (-distance / CONFIDENCE_SCALE).exp();
        let cam = &scene.cameras[vis.cam.index()];
        let view = project_box(&box_to_world(scene, &box3d), cam).unwrap_or(vis.projection);
        let mut mot_state = flatten_traj(&traj, [box3d.center[0], box3d.center[1]]);
        mot_state.extend([box3d.center[0] / MAX_DEPTH, box3d.center[1] / MAX_DEPTH]);
        instances.push(Instance {
            id: obj.id,
            class_label: obj.class_label,
            det_encoding: Encoders::encode(&det_state(&box3d, obj.class_label, confidence), &enc.det),
            mot_encoding: Encoders::encode(&mot_state, &enc.mot),
            box3d,
            traj,
            confidence,
            view,
        });
    }
    let plan: Vec<[f64; 2]> = scene
        .ego_plan
        .iter()
        .map(|p| {
            let e = scene.to_ego(*p);
            [e[0] + 0.5 * jitter(), e[1] + 0.5 * jitter()]
        })
        .collect();
    let encoding = Encoders::encode(&flatten_traj(&plan, [0.0, 0.0]), &enc.ego);
    E2EBackboneOutput { instances, ego: EgoEntry { plan, encoding } }
}

/// Instance slots after selection: `Some(i)` indexes `instances`, `None` is a pad.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub slots: Vec<Option<usize>>,
}

impl Selection {
    pub fn real(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().flatten().copied()
    }

    pub fn pads(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }
}

/// Highest confidence first, ties by ascending object id, padded to `n_ins`.
pub fn select_top_instances(out: &E2EBackboneOutput, n_ins: usize) -> Selection {
    let mut order: Vec<usize> = (0..out.instances.len()).collect();
    order.sort_by(|&a, &b| {
        let (ia, ib) = (&out.instances[a], &out.instances[b]);
        ib.confidence.total_cmp(&ia.confidence).then(ia.id.cmp(&ib.id))
    });
    order.truncate(n_ins);
    let mut slots: Vec<Option<usize>> = order.into_iter().map(Some).collect();
    slots.resize(n_ins, None);
    Selection { slots }
}

/// Trainable part of the backbone: lifts fixed encodings to feature tokens
/// and regresses boxes, classes and trajectories from them.
#[derive(Clone, Debug)]
pub struct BackboneHeads {
    pub lift_det: Linear,
    pub lift_mot: Linear,
    pub lift_ego: Linear,
    pub det_box: Linear,
    pub det_class: Linear,
    pub mot_traj: Linear,
    pub ego_plan: Linear,
}

/// Graph nodes for the selected real instances (pads excluded) and the ego entry.
#[derive(Clone, Debug)]
pub struct BackboneFeatures {
    pub f_det: Option<Var>,
    pub f_mot: Option<Var>,
    pub f_ego: Var,
    pub det_inputs: Option<Var>,
    pub mot_inputs: Option<Var>,
    pub ego_input: Var,
}

impl BackboneHeads {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, enc_dim: usize, d: usize, horizon: usize) -> Self {
        let small = |store: &mut ParamStore, rng: &mut R, name: &str, d_out: usize| {
            let w = store.randn(format!("{prefix}.{name}.w"), d, d_out, 0.01, rng);
            let b = store.zeros(format!("{prefix}.{name}.b"), 1, d_out);
            Linear { w, b: Some(b) }
        };
        let det_box = small(store, rng, "det_box", BOX_PARAMS);
        let det_class = small(store, rng, "det_class", ObjectClass::ALL.len());
        let mot_traj = small(store, rng, "mot_traj", 2 * horizon);
        let ego_plan = small(store, rng, "ego_plan", 2 * horizon);
        Self {
            lift_det: Linear::new(store, rng, &format!("{prefix}.lift_det"), enc_dim, d, true),
            lift_mot: Linear::new(store, rng, &format!("{prefix}.lift_mot"), enc_dim, d, true),
            lift_ego: Linear::new(store, rng, &format!("{prefix}.lift_ego"), enc_dim, d, true),
            det_box,
            det_class,
            mot_traj,
            ego_plan,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.lift_det, &self.lift_mot, &self.lift_ego, &self.det_box, &self.det_class, &self.mot_traj, &self.ego_plan]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }

    /// Feature tokens for `rows` (indices into `out.instances`).
    pub fn features(&self, g: &mut Graph, store: &ParamStore, out: &E2EBackboneOutput, rows: &[usize]) -> BackboneFeatures {
        let stack = |g: &mut Graph, f: &dyn Fn(&Instance) -> &Tensor| {
            if rows.is_empty() {
                None
            } else {
                let parts: Vec<&Tensor> = rows.iter().map(|&i| f(&out.instances[i])).collect();
                Some(g.constant(Tensor::concat_rows(&parts)))
            }
        };
        let det_inputs = stack(g, &|i| &i.det_encoding);
        let mot_inputs = stack(g, &|i| &i.mot_encoding);
        let ego_input = g.constant(out.ego.encoding.clone());
        let f_det = det_inputs.map(|x| self.lift_det.forward(g, store, x));
        let f_mot = mot_inputs.map(|x| self.lift_mot.forward(g, store, x));
        let f_ego = self.lift_ego.forward(g, store, ego_input);
        BackboneFeatures { f_det, f_mot, f_ego, det_inputs, mot_inputs, ego_input }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, GenConfig};

    fn scene(seed: u64) -> SceneGraph {
        gen_scene(seed, &GenConfig { objects_min: 3, objects_max: 5, ..GenConfig::default() }).unwrap()
    }

    #[test]
    fn zero_noise_is_ground_truth() {
        let s = scene(2);
        let out = synthetic_backbone(&s, 0.0, 0, 16);
        assert!(!out.instances.is_empty());
        for inst in &out.instances {
            let obj = s.object(inst.id).unwrap();
            let gt = box_to_ego(&s, &obj.box3d);
            assert!(gt.center.iter().zip(inst.box3d.center).all(|(a, b)| (a - b).abs() < 1e-12));
            assert_eq!(gt.size, inst.box3d.size);
            for (p, q) in obj.traj.iter().zip(&inst.traj) {
                let e = s.to_ego(*p);
                assert!((e[0] - q[0]).abs() < 1e-12 && (e[1] - q[1]).abs() < 1e-12);
            }
        }
        let plan: Vec<[f64; 2]> = s.ego_plan.iter().map(|p| s.to_ego(*p)).collect();
        assert_eq!(plan, out.ego.plan);
    }

    #[test]
    fn empty_scene_has_ego_only() {
        let s = gen_scene(1, &GenConfig { objects_min: 0, objects_max: 0, ..GenConfig::default() }).unwrap();
        let out = synthetic_backbone(&s, 0.5, 0, 16);
        assert!(out.instances.is_empty());
        assert_eq!(out.ego.plan.len(), s.horizon());
    }

    #[test]
    fn noise_seeds_differ_but_counts_match() {
        let s = scene(4);
        let a = synthetic_backbone(&s, 0.5, 1, 16);
        let b = synthetic_backbone(&s, 0.5, 2, 16);
        assert_eq!(a.instances.len(), b.instances.len());
        assert_ne!(a.instances[0].box3d, b.instances[0].box3d);
        assert_eq!(a, synthetic_backbone(&s, 0.5, 1, 16));
    }

    #[test]
    fn confidence_decreases_with_distance() {
        let out = synthetic_backbone(&scene(9), 0.3, 0, 16);
        let mut v: Vec<(f64, f64)> =
            out.instances.iter().map(|i| (i.box3d.center[0].hypot(i.box3d.center[1]), i.confidence)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(v.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    fn with_confidences(c: &[f64]) -> E2EBackboneOutput {
        let mut out = synthetic_backbone(&scene(2), 0.0, 0, 4);
        let proto = out.instances[0].clone();
        out.instances = c.iter().enumerate().map(|(i, &conf)| Instance { id: i, confidence: conf, ..proto.clone() }).collect();
        out
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_top_instances(&with_confidences(&[0.9, 0.3, 0.7]), 2).slots, vec![Some(0), Some(2)]);
        let s = select_top_instances(&with_confidences(&[0.4]), 10);
        assert_eq!(s.real().count(), 1);
        assert_eq!(s.pads(), 9);
    }

    proptest::proptest! {
        #[test]
        fn selection_matches_stable_sort(conf in proptest::collection::vec(0u8..4, 0..20), n in 1usize..12) {
            let c: Vec<f64> = conf.iter().map(|&x| x as f64 / 4.0).collect();
            let out = with_confidences(&c);
            let mut oracle: Vec<usize> = (0..c.len()).collect();
            // Stable sort keeps ascending ids among equal confidences.
            oracle.sort_by(|&a, &b| c[b].partial_cmp(&c[a]).unwrap());
            oracle.truncate(n);
            let sel = select_top_instances(&out, n);
            proptest::prop_assert_eq!(sel.real().collect::<Vec<_>>(), oracle);
            proptest::prop_assert_eq!(sel.slots.len(), n);
        }
    }
}
