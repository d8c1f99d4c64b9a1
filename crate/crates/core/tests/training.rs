use lmad_core::autograd::Graph;
use lmad_core::lm::Vocabulary;
use lmad_core::model::{LmadModel, ModelConfig, Sample};
use lmad_core::scene::{dataset::generate_records, GenConfig};
use lmad_core::training::gradcheck::perturb_zero_inits;
use lmad_core::training::{
    batch_gradients, fit, grad_check, sample_objective, trainable_params, GradCheckConfig, Silent, Strategy, TrainConfig, Trainer,
};

fn setup(scenes: usize) -> (LmadModel, Vec<Sample>) {
    let gen = GenConfig { objects_min: 2, objects_max: 4, ..GenConfig::default() };
    let recs = generate_records(3, scenes, &gen).unwrap();
    let vocab = Vocabulary::build(&recs);
    let model = LmadModel::new(ModelConfig::tiny(), vocab, gen.horizon).unwrap();
    let samples = model.samples(&recs, &gen).unwrap();
    (model, samples)
}

#[test]
fn frozen_strategy_leaves_backbone_gradient_exactly_zero() {
    let (mut model, samples) = setup(1);
    perturb_zero_inits(&mut model, 0.1, 5);
    model.bridge.cfg.detach = true;
    let batch: Vec<&Sample> = samples.iter().take(4).collect();
    let all: Vec<_> = model.store.ids().collect();
    let (_, grads) = batch_gradients(&model, &batch, Strategy::FrozenE2e, 0.0, &all).unwrap();
    for id in model.backbone_params() {
        assert!(grads.get(&id).is_none_or(|g| g.max_abs() == 0.0), "{}", model.store.name(id));
    }
    let report = grad_check(&model, &batch[..2], Strategy::FrozenE2e, 0.0, &GradCheckConfig::default()).unwrap();
    for id in model.backbone_params() {
        let p = report.params.iter().find(|p| p.name == model.store.name(id)).unwrap();
        assert_eq!((p.analytic_norm, p.numeric_norm), (0.0, 0.0), "{}", p.name);
    }
    let trainable = trainable_params(&model, Strategy::FrozenE2e);
    assert!(model.backbone_params().iter().all(|id| !trainable.contains(id)));
}

#[test]
fn joint_total_is_text_plus_weighted_e2e() {
    let (model, samples) = setup(1);
    for lambda in [1.0, 0.37] {
        for s in samples.iter().take(5) {
            let mut g = Graph::new();
            let o = sample_objective(&mut g, &model, s, Strategy::Joint, lambda).unwrap();
            let v = |x: Option<lmad_core::autograd::Var>| x.map_or(0.0, |x| g.value(x).item());
            let want = v(o.l_txt) + lambda * (v(o.l_plan) + v(o.l_det) + v(o.l_mot));
            assert!((g.value(o.total).item() - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        let batch: Vec<&Sample> = samples.iter().take(4).collect();
        let (r, _) = batch_gradients(&model, &batch, Strategy::Joint, lambda, &[]).unwrap();
        assert_eq!(r.total, r.l_txt + lambda * r.l_e2e);
        assert_eq!(r.l_e2e, r.l_det + r.l_mot + r.l_plan);
        assert!(r.l_plan > 0.0);
    }
}

#[test]
fn joint_with_zero_lambda_matches_frozen_language_updates() {
    let (base, samples) = setup(2);
    let batch: Vec<&Sample> = samples.iter().take(4).collect();
    let one_step = |strategy: Strategy, lambda: Option<f64>| {
        let mut m = base.clone();
        let cfg = TrainConfig { strategy, lambda, warmup_ratio: 0.0, ..TrainConfig::default() };
        let mut t = Trainer::new(&mut m, cfg, 10).unwrap();
        t.train_step(&mut m, &batch).unwrap();
        m
    };
    let (frozen, joint) = (one_step(Strategy::FrozenE2e, None), one_step(Strategy::Joint, Some(0.0)));
    for id in base.language_trainable() {
        assert_eq!(frozen.store.get(id), joint.store.get(id), "{}", base.store.name(id));
    }
    assert!(base.backbone_params().iter().all(|&id| frozen.store.get(id) == base.store.get(id)));

    // Without weight decay the zero-gradient heads never move, so whole runs agree.
    let run = |strategy: Strategy, lambda: Option<f64>| {
        let mut m = base.clone();
        let cfg = TrainConfig { strategy, lambda, steps: Some(4), weight_decay: 0.0, seed: 9, ..TrainConfig::default() };
        fit(&mut m, &samples, &cfg, &mut Silent).unwrap();
        m
    };
    let (frozen, joint) = (run(Strategy::FrozenE2e, None), run(Strategy::Joint, Some(0.0)));
    for id in base.language_trainable() {
        assert_eq!(frozen.store.get(id), joint.store.get(id), "{}", base.store.name(id));
    }
}

#[test]
fn full_stack_gradients_match_finite_differences() {
    let (mut model, samples) = setup(1);
    perturb_zero_inits(&mut model, 0.1, 5);
    model.bridge.cfg.detach = false;
    let batch: Vec<&Sample> = vec![&samples[0], &samples[3], &samples[5]];
    let report = grad_check(&model, &batch, Strategy::Joint, 1.0, &GradCheckConfig::default()).unwrap();
    let worst = report.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    assert!(report.max_rel_error < 1e-4, "worst {worst:?}");
    assert!(report.params.iter().filter(|p| p.analytic_norm > 0.0).count() > report.params.len() / 2);
}

#[test]
fn corrupted_gradient_fails_on_that_parameter_only() {
    let (mut model, samples) = setup(1);
    perturb_zero_inits(&mut model, 0.1, 5);
    let target = model.vision_proj.w;
    let cfg = GradCheckConfig { corrupt: Some((target, 2.0)), ..GradCheckConfig::default() };
    let report = grad_check(&model, &[&samples[0]], Strategy::Joint, 1.0, &cfg).unwrap();
    assert_eq!(report.failed(), vec![model.store.name(target)]);
}

#[test]
fn equal_seeds_give_identical_runs() {
    let (base, samples) = setup(2);
    let run = || {
        let mut m = base.clone();
        let cfg = TrainConfig { strategy: Strategy::Joint, steps: Some(5), seed: 4, ..TrainConfig::default() };
        fit(&mut m, &samples, &cfg, &mut Silent).unwrap().log
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
}

#[test]
fn frozen_trainer_rejects_undetached_bridge() {
    let (mut model, samples) = setup(1);
    let mut t = Trainer::new(&mut model, TrainConfig::default(), 2).unwrap();
    assert!(model.bridge.cfg.detach);
    model.bridge.cfg.detach = false;
    assert!(t.train_step(&mut model, &[&samples[0]]).is_err());
}

#[test]
fn non_finite_loss_aborts_after_last_checkpoint() {
    use lmad_core::training::FitObserver;
    struct Ckpt(Vec<usize>);
    impl FitObserver for Ckpt {
        fn on_checkpoint(&mut self, _m: &LmadModel, step: usize) -> lmad_core::Result<()> {
            self.0.push(step);
            Ok(())
        }
    }
    let (mut model, samples) = setup(1);
    let w = model.vision_proj.w;
    model.store.get_mut(w).data_mut()[0] = f64::NAN;
    let mut obs = Ckpt(vec![]);
    let cfg = TrainConfig { steps: Some(3), checkpoint_every: 1, ..TrainConfig::default() };
    let err = fit(&mut model, &samples, &cfg, &mut obs).unwrap_err();
    assert!(matches!(err, lmad_core::LmadError::NonFinite { step: 0 }));
    assert!(obs.0.is_empty());
}

