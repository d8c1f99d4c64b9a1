use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lmad_core::autograd::{Graph, Var};
use lmad_core::e2e::bridge::{det_prompt_inputs, det_prompt_text, distance_band};
use lmad_core::e2e::{
    select_top_instances, synthetic_backbone, text_prompt_string_for, AdapterKind, BackboneHeads, BridgeConfig, E2EBackboneOutput,
    E2EBridge, EgoEntry, Selection,
};
use lmad_core::lm::Vocabulary;
use lmad_core::params::ParamStore;
use lmad_core::scene::geometry::{Box2DDepth, CameraName};
use lmad_core::scene::{dataset::generate_records, gen_scene, GenConfig, ObjectClass};
use lmad_core::training::{check_gradients, GradCheckConfig};
use lmad_core::{Group, LmadError, Tensor};

const D: usize = 8;
const ENC: usize = 4;

struct Rig {
    store: ParamStore,
    heads: BackboneHeads,
    bridge: E2EBridge,
    embedding: lmad_core::ParamId,
    vocab: Vocabulary,
    out: E2EBackboneOutput,
    selection: Selection,
}

fn rig(cfg: BridgeConfig) -> Rig {
    let gen = GenConfig { objects_min: 4, objects_max: 6, ..GenConfig::default() };
    let scene = gen_scene(11, &gen).unwrap();
    let vocab = Vocabulary::build(&generate_records(11, 1, &gen).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let embedding = store.randn("emb", vocab.len(), D, 1.0, &mut rng);
    let heads = BackboneHeads::new(&mut store, &mut rng, "bb", ENC, D, gen.horizon);
    let n_ins = cfg.n_ins;
    let bridge = E2EBridge::new(&mut store, &mut rng, "br", BridgeConfig { enc_dim: ENC, heads: 2, ..cfg }, D, gen.horizon).unwrap();
    let out = synthetic_backbone(&scene, 0.3, 0, ENC);
    assert!(!out.instances.is_empty() && out.instances.len() < n_ins);
    let selection = select_top_instances(&out, n_ins);
    Rig { store, heads, bridge, embedding, vocab, out, selection }
}

impl Rig {
    fn tokens(&self, g: &mut Graph, store: &ParamStore) -> (Var, lmad_core::e2e::BackboneFeatures) {
        let rows: Vec<usize> = self.selection.real().collect();
        let feats = self.heads.features(g, store, &self.out, &rows);
        let block = self.bridge.assemble(g, store, self.embedding, &self.vocab, &self.out, &self.selection, &feats).unwrap();
        assert_eq!(block.len(), 2 * self.bridge.cfg.n_ins + 1);
        (block.tokens, feats)
    }
}

#[test]
fn token_count_and_group_pattern() {
    let r = rig(BridgeConfig { n_ins: 10, ..BridgeConfig::default() });
    let mut g = Graph::new();
    let rows: Vec<usize> = r.selection.real().collect();
    let feats = r.heads.features(&mut g, &r.store, &r.out, &rows);
    let block = r.bridge.assemble(&mut g, &r.store, r.embedding, &r.vocab, &r.out, &r.selection, &feats).unwrap();
    assert_eq!(g.shape(block.tokens), (21, D));
    let mut want = vec![Group::Det; 10];
    want.extend(vec![Group::Mot; 10]);
    want.push(Group::Ego);
    assert_eq!(block.groups, want);
    let sub = block.restrict(&mut g, &[Group::Mot, Group::Ego]).unwrap();
    assert_eq!(g.shape(sub.tokens), (11, D));
    assert!(block.restrict(&mut g, &[]).is_none());
}

#[test]
fn identity_adapters_without_prompts_pass_features_through() {
    let cfg = BridgeConfig { n_ins: 8, adapter: AdapterKind::Identity, numeric_prompts: false, text_prompts: false, ..BridgeConfig::default() };
    let r = rig(cfg);
    let mut g = Graph::new();
    let (tokens, feats) = r.tokens(&mut g, &r.store);
    let t = g.value(tokens).clone();
    let n_real = r.selection.real().count();
    let f_det = g.value(feats.f_det.unwrap());
    let f_mot = g.value(feats.f_mot.unwrap());
    for i in 0..n_real {
        assert_eq!(t.row(i), f_det.row(i));
        assert_eq!(t.row(8 + i), f_mot.row(i));
    }
    for i in n_real..8 {
        assert_eq!(t.row(i), r.store.get(r.bridge.null_det).row(0));
        assert_eq!(t.row(8 + i), r.store.get(r.bridge.null_mot).row(0));
    }
    assert_eq!(t.row(16), g.value(feats.f_ego).row(0));
}

#[test]
fn linear_adapters_propagate_prompts_additively() {
    let with = rig(BridgeConfig { n_ins: 8, adapter: AdapterKind::Linear, ..BridgeConfig::default() });
    let without = rig(BridgeConfig { n_ins: 8, adapter: AdapterKind::Linear, numeric_prompts: false, text_prompts: false, ..BridgeConfig::default() });
    let mut g = Graph::new();
    let (tw, _) = with.tokens(&mut g, &with.store);
    let (t0, _) = without.tokens(&mut g, &without.store);
    // Prompts P for det instances, built independently and pushed through W.
    let real: Vec<usize> = with.selection.real().collect();
    let rows: Vec<Vec<f64>> = real.iter().map(|&i| det_prompt_inputs(&with.out.instances[i].view).to_vec()).collect();
    let num = with.bridge.numerical_prompt(&mut g, &with.store, Group::Det, &rows).unwrap();
    let mut texts = Vec::new();
    for &i in &real {
        let s = text_prompt_string_for(Group::Det, &with.out, Some(&with.out.instances[i])).unwrap();
        texts.push(with.bridge.text_prompt(&mut g, &with.store, with.embedding, &with.vocab.encode(&s)).unwrap());
    }
    let txt = g.concat_rows(&texts);
    let p = g.add(num, txt);
    let w = with.bridge.a_det.linear_weight().unwrap();
    let wv = g.param(&with.store, w);
    let pw = g.matmul(p, wv);
    let (a, b, c) = (g.value(tw).clone(), g.value(t0).clone(), g.value(pw).clone());
    for (k, _) in real.iter().enumerate() {
        for j in 0..D {
            assert!((a.get(k, j) - b.get(k, j) - c.get(k, j)).abs() < 1e-12);
        }
    }
    // Pads carry no prompts.
    assert_eq!(a.row(7), b.row(7));
}

fn detach_case(detach: bool) -> f64 {
    let r = rig(BridgeConfig { n_ins: 8, detach, ..BridgeConfig::default() });
    let lifts: Vec<_> = [&r.heads.lift_det, &r.heads.lift_mot, &r.heads.lift_ego].iter().flat_map(|l| l.params()).collect();
    let loss = |g: &mut Graph, s: &ParamStore| {
        let (t, _) = r.tokens(g, s);
        let sq = g.mul(t, t);
        Ok(g.sum(sq))
    };
    let rep = check_gradients(&r.store, &lifts, &GradCheckConfig::default(), &loss).unwrap();
    assert!(rep.passed(), "{rep:?}");
    rep.params.iter().map(|p| p.analytic_norm + p.numeric_norm).sum()
}

#[test]
fn detach_severs_backbone_gradients_exactly() {
    assert_eq!(detach_case(true), 0.0);
    assert!(detach_case(false) > 0.0);
}

#[test]
fn one_token_text_prompt_is_projected_embedding() {
    let r = rig(BridgeConfig { n_ins: 8, ..BridgeConfig::default() });
    let mut g = Graph::new();
    let id = r.vocab.id("car");
    let out = r.bridge.text_prompt(&mut g, &r.store, r.embedding, &[id]).unwrap();
    let e = Tensor::row_vector(r.store.get(r.embedding).row(id));
    let a = &r.bridge.text_attn;
    let want = e.matmul(r.store.get(a.wv)).matmul(r.store.get(a.wo));
    assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    assert_eq!(g.shape(out), (1, D));
    assert!(matches!(r.bridge.text_prompt(&mut g, &r.store, r.embedding, &[]), Err(LmadError::Input(_))));
}

#[test]
fn distinct_motion_prompts_give_distinct_vectors() {
    let r = rig(BridgeConfig { n_ins: 8, ..BridgeConfig::default() });
    let mut g = Graph::new();
    let a = r.bridge.text_prompt(&mut g, &r.store, r.embedding, &r.vocab.encode("Go straight, acceleration")).unwrap();
    let b = r.bridge.text_prompt(&mut g, &r.store, r.embedding, &r.vocab.encode("Turn Right, constant speed")).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);
}

#[test]
fn numerical_prompt_shapes_bias_and_gradients() {
    let mut r = rig(BridgeConfig { n_ins: 8, ..BridgeConfig::default() });
    let k = r.bridge.horizon;
    let mut g = Graph::new();
    let v = r.bridge.numerical_prompt(&mut g, &r.store, Group::Mot, &[vec![0.3; 2 * k]]).unwrap();
    assert_eq!(g.shape(v), (1, D));
    assert!(matches!(r.bridge.numerical_prompt(&mut g, &r.store, Group::Mot, &[vec![0.3; 3]]), Err(LmadError::Shape(_))));

    let map = r.bridge.ego_prompt.clone();
    let loss = |g: &mut Graph, s: &ParamStore| {
        let v = r.bridge.numerical_prompt(g, s, Group::Ego, &[(0..2 * k).map(|i| i as f64 * 0.1).collect()])?;
        let sq = g.mul(v, v);
        Ok(g.sum(sq))
    };
    let rep = check_gradients(&r.store, &map.params(), &GradCheckConfig { coords_per_param: 20, ..GradCheckConfig::default() }, &loss).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");

    for w in [map.fc1.w, map.fc2.w] {
        let (rows, cols) = r.store.get(w).shape();
        r.store.set(w, Tensor::zeros(rows, cols));
    }
    let b2 = r.store.get(map.fc2.b.unwrap()).clone();
    let b2 = Tensor::from_vec(1, D, (0..D).map(|i| i as f64 + b2.data()[i] + 1.0).collect());
    r.store.set(map.fc2.b.unwrap(), b2.clone());
    let mut g = Graph::new();
    let v = r.bridge.numerical_prompt(&mut g, &r.store, Group::Ego, &[vec![2.0; 2 * k]]).unwrap();
    assert_eq!(g.value(v), &b2);
}

#[test]
fn detection_prompt_inputs_and_text() {
    let full = Box2DDepth { cam: CameraName::Front, box2d: [0.0, 0.0, 1.0, 1.0], depth: 51.2 };
    assert_eq!(det_prompt_inputs(&full), [0.0, 0.0, 1.0, 1.0, 1.0]);
    assert_eq!(det_prompt_inputs(&Box2DDepth { depth: 80.0, ..full })[4], 1.0);
    assert_eq!(det_prompt_text(ObjectClass::Car, CameraName::Front, 8.0), "a car at front, near");
    assert_eq!((distance_band(14.99), distance_band(15.0), distance_band(35.0)), ("near", "mid", "far"));
}

#[test]
fn motion_prompt_strings() {
    let r = rig(BridgeConfig { n_ins: 8, ..BridgeConfig::default() });
    let k = r.bridge.horizon;
    let straight: Vec<[f64; 2]> = (1..=k).map(|i| [i as f64 + 0.2 * (i * i) as f64, 0.0]).collect();
    let out = E2EBackboneOutput { instances: vec![], ego: EgoEntry { plan: straight, encoding: Tensor::zeros(1, ENC) } };
    assert_eq!(text_prompt_string_for(Group::Ego, &out, None).unwrap(), "Go straight, acceleration");

    let mut inst = r.out.instances[0].clone();
    inst.box3d.center = [0.0, 0.0, 0.0];
    inst.box3d.yaw = 0.0;
    // Curving left while slowing down.
    let mut p = [0.0f64, 0.0];
    let mut heading = 0.0f64;
    let mut step = 3.0;
    inst.traj = (0..k)
        .map(|_| {
            heading += 0.25;
            step *= 0.8;
            p = [p[0] + step * heading.cos(), p[1] + step * heading.sin()];
            p
        })
        .collect();
    assert_eq!(text_prompt_string_for(Group::Mot, &r.out, Some(&inst)).unwrap(), "Turn Left, deceleration");
    assert!(text_prompt_string_for(Group::Det, &r.out, None).is_err());
}
