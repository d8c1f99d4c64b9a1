//! Text loss and the end-to-end driving losses.

use crate::autograd::{Graph, Var};
use crate::e2e::backbone::{box_to_ego, BackboneFeatures, BackboneHeads, E2EBackboneOutput, BOX_PARAMS};
use crate::params::ParamStore;
use crate::scene::SceneGraph;
use crate::tensor::Tensor;

/// Matching gate on ground-plane centre distance, metres.
pub const MATCH_GATE: f64 = 2.0;

/// Mean cross-entropy over `rows` of `logits`; `None` when there is nothing to score.
pub fn text_loss(g: &mut Graph, logits: Var, rows: &[usize], targets: &[usize]) -> Option<Var> {
    assert_eq!(rows.len(), targets.len(), "one target per scored row");
    if rows.is_empty() {
        return None;
    }
    let picked = g.gather_rows(logits, rows);
    let w = vec![1.0 / rows.len() as f64; rows.len()];
    Some(g.cross_entropy(picked, targets, &w))
}

/// [`text_loss`] on plain values; an empty mask yields `(0, true)` where the
/// flag warns that nothing was scored.
pub fn text_loss_value(logits: &Tensor, targets: &[usize], mask: &[bool]) -> (f64, bool) {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let t: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    match text_loss(&mut g, l, &rows, &t) {
        Some(v) => (g.value(v).item(), false),
        None => (0.0, true),
    }
}

/// Ground-truth driving targets in the ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct E2ETruth {
    pub boxes: Vec<[f64; BOX_PARAMS]>,
    pub classes: Vec<usize>,
    pub trajs: Vec<Vec<[f64; 2]>>,
    pub plan: Vec<[f64; 2]>,
}

pub fn e2e_truth(scene: &SceneGraph) -> E2ETruth {
    let mut t = E2ETruth { boxes: vec![], classes: vec![], trajs: vec![], plan: vec![] };
    for o in &scene.objects {
        t.boxes.push(box_to_ego(scene, &o.box3d).to_array());
        t.classes.push(o.class_label.index());
        t.trajs.push(o.traj.iter().map(|p| scene.to_ego(*p)).collect());
    }
    t.plan = scene.ego_plan.iter().map(|p| scene.to_ego(*p)).collect();
    t
}

/// Head outputs: boxes `n×7`, class logits `n×C`, trajectories `n×2K`
/// (absolute ego-frame waypoints), plan `1×2K`.
#[derive(Clone, Copy, Debug)]
pub struct E2EPrediction {
    pub boxes: Option<Var>,
    pub class_logits: Option<Var>,
    pub trajs: Option<Var>,
    pub plan: Var,
}

/// Regressions on top of the backbone's own estimates: each head predicts a
/// residual added to the perturbed box, trajectory or plan.
pub fn predict(
    g: &mut Graph,
    store: &ParamStore,
    heads: &BackboneHeads,
    out: &E2EBackboneOutput,
    rows: &[usize],
    feats: &BackboneFeatures,
) -> E2EPrediction {
    let base_boxes = (!rows.is_empty()).then(|| {
        let r: Vec<Vec<f64>> = rows.iter().map(|&i| out.instances[i].box3d.to_array().to_vec()).collect();
        Tensor::from_rows(&r)
    });
    let base_trajs = (!rows.is_empty()).then(|| {
        let r: Vec<Vec<f64>> =
            rows.iter().map(|&i| out.instances[i].traj.iter().flat_map(|p| [p[0], p[1]]).collect()).collect();
        Tensor::from_rows(&r)
    });
    let boxes = feats.f_det.zip(base_boxes).map(|(f, b)| {
        let d = heads.det_box.forward(g, store, f);
        let b = g.constant(b);
        g.add(b, d)
    });
    let class_logits = feats.f_det.map(|f| heads.det_class.forward(g, store, f));
    let trajs = feats.f_mot.zip(base_trajs).map(|(f, b)| {
        let d = heads.mot_traj.forward(g, store, f);
        let b = g.constant(b);
        g.add(b, d)
    });
    let d = heads.ego_plan.forward(g, store, feats.f_ego);
    let base_plan = g.constant(Tensor::row_vector(&out.ego.plan.iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<_>>()));
    let plan = g.add(base_plan, d);
    E2EPrediction { boxes, class_logits, trajs, plan }
}

/// Greedy nearest-centre assignment: repeatedly takes the closest unused
/// `(pred, gt)` pair within `gate`. Ties resolve by lower pred then gt index.
pub fn greedy_match(pred: &[[f64; 2]], gt: &[[f64; 2]], gate: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, q) in gt.iter().enumerate() {
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d <= gate {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug)]
pub struct E2ELossVars {
    pub det: Option<Var>,
    pub mot: Option<Var>,
    pub plan: Var,
}

fn mean_displacement(g: &mut Graph, pred: Var, target: Tensor) -> Var {
    let t = g.constant(target);
    let diff = g.sub(pred, t);
    let n = g.value(diff).len() / 2;
    let pts = g.reshape(diff, n, 2);
    let norms = g.row_norm(pts);
    g.mean(norms)
}

/// Detection (box MAE + class cross-entropy), motion and planning
/// (mean waypoint displacement) losses over greedily matched instances.
pub fn e2e_loss(g: &mut Graph, pred: &E2EPrediction, truth: &E2ETruth) -> E2ELossVars {
    let boxes_v = pred.boxes.map(|b| g.value(b).clone());
    let centers: Vec<[f64; 2]> =
        boxes_v.as_ref().map_or(vec![], |b| (0..b.rows()).map(|r| [b.get(r, 0), b.get(r, 1)]).collect());
    let gt_centers: Vec<[f64; 2]> = truth.boxes.iter().map(|b| [b[0], b[1]]).collect();
    let matches = greedy_match(&centers, &gt_centers, MATCH_GATE);
    let plan_target: Vec<f64> = truth.plan.iter().flat_map(|p| [p[0], p[1]]).collect();
    let plan = mean_displacement(g, pred.plan, Tensor::row_vector(&plan_target));
    if matches.is_empty() {
        return E2ELossVars { det: None, mot: None, plan };
    }
    let pi: Vec<usize> = matches.iter().map(|m| m.0).collect();
    let gi: Vec<usize> = matches.iter().map(|m| m.1).collect();

    let (boxes, logits) = (pred.boxes.expect("matched boxes"), pred.class_logits.expect("matched logits"));
    let pb = g.gather_rows(boxes, &pi);
    let tb = g.constant(Tensor::from_rows(&gi.iter().map(|&j| truth.boxes[j].to_vec()).collect::<Vec<_>>()));
    let diff = g.sub(pb, tb);
    let abs = g.abs(diff);
    let mae = g.mean(abs);
    let pl = g.gather_rows(logits, &pi);
    let w = vec![1.0 / pi.len() as f64; pi.len()];
    let targets: Vec<usize> = gi.iter().map(|&j| truth.classes[j]).collect();
    let ce = g.cross_entropy(pl, &targets, &w);
    let det = g.add(mae, ce);

    let mot = pred.trajs.map(|tr| {
        let pt = g.gather_rows(tr, &pi);
        let tt: Vec<Vec<f64>> = gi.iter().map(|&j| truth.trajs[j].iter().flat_map(|p| [p[0], p[1]]).collect()).collect();
        mean_displacement(g, pt, Tensor::from_rows(&tt))
    });
    E2ELossVars { det: Some(det), mot, plan }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_loss_examples() {
        let (l, warn) = text_loss_value(&Tensor::zeros(1, 4), &[2], &[true]);
        assert!((l - 4f64.ln()).abs() < 1e-12 && !warn);
        let mut big = Tensor::zeros(1, 4);
        big.set(0, 1, 100.0);
        assert!(text_loss_value(&big, &[1], &[true]).0 < 1e-40);
        // Two positions by hand: logits [1,0] target 0, logits [0,2] target 0.
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let want = ((1.0 + (-1f64).exp()).ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((text_loss_value(&x, &[0, 0], &[true, true]).0 - want).abs() < 1e-12);
        assert_eq!(text_loss_value(&x, &[0, 0], &[false, false]), (0.0, true));
    }

    fn truth_of(boxes: &[[f64; 2]], plan: &[[f64; 2]]) -> E2ETruth {
        E2ETruth {
            boxes: boxes.iter().map(|c| [c[0], c[1], 0.5, 4.0, 2.0, 1.5, 0.1]).collect(),
            classes: vec![0; boxes.len()],
            trajs: boxes.iter().map(|c| vec![*c, [c[0] + 1.0, c[1]]]).collect(),
            plan: plan.to_vec(),
        }
    }

    fn exact_pred(g: &mut Graph, t: &E2ETruth, plan_offset: f64) -> E2EPrediction {
        let mut logits = Tensor::zeros(t.boxes.len(), 5);
        for r in 0..t.boxes.len() {
            logits.set(r, t.classes[r], 80.0);
        }
        let rows = |v: Vec<Vec<f64>>| Tensor::from_rows(&v);
        E2EPrediction {
            boxes: Some(g.constant(rows(t.boxes.iter().map(|b| b.to_vec()).collect()))),
            class_logits: Some(g.constant(logits)),
            trajs: Some(g.constant(rows(t.trajs.iter().map(|tr| tr.iter().flat_map(|p| [p[0], p[1]]).collect()).collect()))),
            plan: g.constant(Tensor::row_vector(&t.plan.iter().flat_map(|p| [p[0] + plan_offset, p[1]]).collect::<Vec<_>>())),
        }
    }

    #[test]
    fn exact_predictions_have_zero_loss_and_offset_plan_costs_one() {
        let t = truth_of(&[[5.0, 1.0], [10.0, -3.0]], &[[1.0, 0.0], [2.0, 0.0], [3.0, 0.1]]);
        let mut g = Graph::new();
        let p = exact_pred(&mut g, &t, 0.0);
        let l = e2e_loss(&mut g, &p, &t);
        assert!(g.value(l.det.unwrap()).item() < 1e-30);
        assert_eq!(g.value(l.mot.unwrap()).item(), 0.0);
        assert_eq!(g.value(l.plan).item(), 0.0);
        let mut g = Graph::new();
        let p = exact_pred(&mut g, &t, 1.0);
        let l = e2e_loss(&mut g, &p, &t);
        assert!((g.value(l.plan).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_scores_plan_only() {
        let t = truth_of(&[], &[[1.0, 0.0], [2.0, 0.0]]);
        let mut g = Graph::new();
        let plan = g.constant(Tensor::row_vector(&[1.0, 0.0, 2.0, 0.0]));
        let p = E2EPrediction { boxes: None, class_logits: None, trajs: None, plan };
        let l = e2e_loss(&mut g, &p, &t);
        assert!(l.det.is_none() && l.mot.is_none());
        assert_eq!(g.value(l.plan).item(), 0.0);
    }

    fn total_distance(pred: &[[f64; 2]], gt: &[[f64; 2]], m: &[(usize, usize)]) -> f64 {
        m.iter().map(|&(i, j)| (pred[i][0] - gt[j][0]).hypot(pred[i][1] - gt[j][1])).sum()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn brute_force_assignment_is_no_worse_than_greedy(
            pts in proptest::collection::vec((0.0f64..4.0, 0.0f64..4.0), 1..5),
            jit in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 5),
        ) {
            let gt: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let pred: Vec<[f64; 2]> = gt.iter().zip(&jit).map(|(g, j)| [g[0] + j.0, g[1] + j.1]).collect();
            let greedy = greedy_match(&pred, &gt, MATCH_GATE);
            let gd = total_distance(&pred, &gt, &greedy);
            // Independent recomputation of every greedy pair distance.
            for &(i, j) in &greedy {
                prop_assert!((pred[i][0] - gt[j][0]).hypot(pred[i][1] - gt[j][1]) <= MATCH_GATE);
            }
            let mut best = f64::INFINITY;
            for perm in permutations(gt.len()) {
                let m: Vec<(usize, usize)> = perm.iter().enumerate()
                    .filter(|&(i, &j)| (pred[i][0] - gt[j][0]).hypot(pred[i][1] - gt[j][1]) <= MATCH_GATE)
                    .map(|(i, &j)| (i, j)).collect();
                if m.len() >= greedy.len() {
                    let mut sub = m.clone();
                    sub.sort_by(|a, b| {
                        let da = (pred[a.0][0] - gt[a.1][0]).hypot(pred[a.0][1] - gt[a.1][1]);
                        let db = (pred[b.0][0] - gt[b.1][0]).hypot(pred[b.0][1] - gt[b.1][1]);
                        da.total_cmp(&db)
                    });
                    sub.truncate(greedy.len());
                    best = best.min(total_distance(&pred, &gt, &sub));
                }
            }
            prop_assert!(best <= gd + 1e-12, "brute {} > greedy {}", best, gd);
        }
    }
}
