use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_synthetic, SyntheticConfig};
use crate::model::{ModelConfig, Vocab};
use crate::preprocess::{build_gold, corpus_windows, WindowOptions};
use crate::schema::{DatasetProfile, Relation};
use crate::tensor::{ParamId, ParamStore, Tensor};

fn full_mask(n: usize) -> Square<bool> {
    let mut m = Square::filled(n, true);
    for i in 0..n {
        m.set(i, i, false);
    }
    m
}

fn pair_profile() -> DatasetProfile {
    DatasetProfile::new(
        "pair",
        vec![Relation::None, Relation::Simultaneous, Relation::Vague],
    )
    .unwrap()
}

fn scalar_store(values: &[f64]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.add("x", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
    p
}

fn grads_of(values: &[f64]) -> Gradients<f64> {
    let store = scalar_store(values);
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.param(ParamId(0));
    let c = g.constant(Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
    // d/dx sum(x * c) = c
    let xc = g.mul(x, c).unwrap();
    let s = g.sum(xc).unwrap();
    g.backward(s).unwrap()
}

#[test]
fn arc_loss_uniform_and_perfect() {
    let store = ParamStore::<f64>::new();
    let n = 5;
    let mut gold = Square::filled(n, false);
    gold.set(0, 3, true);
    gold.set(2, 1, true);
    let mut g = Graph::new(&store, Mode::Eval);
    let s = g.constant(Tensor::zeros(&[n, n]));
    let l = arc_loss(&mut g, s, &gold, &full_mask(n)).unwrap();
    assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);

    let perfect: Vec<f64> = gold
        .as_slice()
        .iter()
        .map(|&b| if b { 20.0 } else { -20.0 })
        .collect();
    let s = g.constant(Tensor::from_vec(&[n, n], perfect).unwrap());
    let l = arc_loss(&mut g, s, &gold, &full_mask(n)).unwrap();
    assert!(g.scalar_value(l) < 1e-6);
}

#[test]
fn arc_loss_two_by_two_hand_value() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let s = g.constant(Tensor::from_vec(&[2, 2], vec![0.0, 1.0, -1.0, 0.0]).unwrap());
    let gold = Square::from_vec(2, vec![false, true, false, false]).unwrap();
    let l = arc_loss(&mut g, s, &gold, &full_mask(2)).unwrap();
    assert!((g.scalar_value(l) - 0.313_261_687_518_222_86).abs() < 1e-12);
}

#[test]
fn arc_loss_rejects_empty_mask_and_bad_shapes() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let s = g.constant(Tensor::zeros(&[3, 3]));
    let gold = Square::filled(3, false);
    assert!(arc_loss(&mut g, s, &gold, &Square::filled(3, false)).is_err());
    assert!(arc_loss(&mut g, s, &Square::filled(2, false), &full_mask(2)).is_err());
}

#[test]
fn rel_loss_uniform_is_ln_l() {
    let profile = DatasetProfile::tbdense();
    let store = ParamStore::<f64>::new();
    let n = 4;
    let (_, rel) = build_gold(
        n,
        &[(0, 2, Relation::Before), (3, 1, Relation::Includes)],
        &profile,
    )
    .unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let s = g.constant(Tensor::zeros(&[n, n, 6]));
    let l = rel_loss(&mut g, s, &rel, &full_mask(n), false).unwrap().unwrap();
    assert!((g.scalar_value(l) - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn rel_loss_perfect_margin() {
    let profile = DatasetProfile::tbdense();
    let store = ParamStore::<f64>::new();
    let (_, rel) = build_gold(3, &[(0, 1, Relation::After)], &profile).unwrap();
    let mut logits = vec![0.0; 3 * 3 * 6];
    // (0,1) holds AFTER = id 2 = slot 1
    logits[6 + 1] = 20.0;
    let mut g = Graph::new(&store, Mode::Eval);
    let s = g.constant(Tensor::from_vec(&[3, 3, 6], logits).unwrap());
    let l = rel_loss(&mut g, s, &rel, &full_mask(3), false).unwrap().unwrap();
    assert!(g.scalar_value(l) < 1e-6);
}

#[test]
fn rel_loss_three_token_hand_value() {
    let profile = pair_profile();
    let store = ParamStore::<f64>::new();
    let (_, rel) = build_gold(
        3,
        &[(0, 1, Relation::Simultaneous), (2, 1, Relation::Vague)],
        &profile,
    )
    .unwrap();
    let mut logits = vec![0.0; 3 * 3 * 2];
    logits[2..4].copy_from_slice(&[2.0, 0.0]); // (0,1), gold slot 0
    logits[10..12].copy_from_slice(&[1.0, 0.5]); // (1,2), gold slot 1
    logits[14..16].copy_from_slice(&[-9.0, 9.0]); // (2,1) lower triangle: ignored
    let mut g = Graph::new(&store, Mode::Eval);
    let s = g.constant(Tensor::from_vec(&[3, 3, 2], logits).unwrap());
    let l = rel_loss(&mut g, s, &rel, &full_mask(3), false).unwrap().unwrap();
    assert!((g.scalar_value(l) - 0.550_502_497_611_539_6).abs() < 1e-12);
}

#[test]
fn rel_targets_modes() {
    let profile = DatasetProfile::tbdense();
    let (_, rel) = build_gold(3, &[(2, 0, Relation::Before)], &profile).unwrap();
    // Stored upper cell (0,2) is AFTER (id 2).
    assert_eq!(
        rel_targets(&rel, &full_mask(3), 6, false).unwrap(),
        vec![(2, 1)]
    );
    assert_eq!(
        rel_targets(&rel, &full_mask(3), 7, true).unwrap(),
        vec![(1, 0), (2, 2), (5, 0)]
    );
    let mut mask = Square::filled(3, false);
    mask.set(2, 1, true);
    assert_eq!(
        rel_targets(&rel, &mask, 7, true).unwrap(),
        vec![(2, 2), (5, 0)]
    );
    assert!(matches!(
        rel_targets(&rel, &full_mask(3), 1, false),
        Err(ObjectiveError::Label { label: 2, labels: 1 })
    ));
}

#[test]
fn rel_loss_without_pairs_is_none() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let s = g.constant(Tensor::zeros(&[2, 2, 6]));
    let rel = Square::filled(2, LabelId::NONE);
    assert!(rel_loss(&mut g, s, &rel, &full_mask(2), false)
        .unwrap()
        .is_none());
}

proptest! {
    #[test]
    fn rel_loss_invariant_to_swapped_annotation(
        picks in proptest::collection::vec((0usize..6, 0usize..6, 1u8..7, any::<bool>()), 1..6),
        logits in proptest::collection::vec(-3.0f64..3.0, 6 * 6 * 6),
    ) {
        let profile = DatasetProfile::tbdense();
        let mut plain = Vec::new();
        let mut swapped = Vec::new();
        let mut used = std::collections::BTreeSet::new();
        for (i, j, id, swap) in picks {
            if i == j || !used.insert((i.min(j), i.max(j))) {
                continue;
            }
            let r = profile.relation(LabelId(id)).unwrap();
            plain.push((i, j, r));
            swapped.push(if swap { (j, i, r.inverse()) } else { (i, j, r) });
        }
        prop_assume!(!plain.is_empty());
        let (_, a) = build_gold(6, &plain, &profile).unwrap();
        let (_, b) = build_gold(6, &swapped, &profile).unwrap();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let s = g.constant(Tensor::from_vec(&[6, 6, 6], logits).unwrap());
        let la = rel_loss(&mut g, s, &a, &full_mask(6), false).unwrap().unwrap();
        let lb = rel_loss(&mut g, s, &b, &full_mask(6), false).unwrap().unwrap();
        prop_assert_eq!(g.scalar_value(la), g.scalar_value(lb));
    }

    #[test]
    fn clipped_norm_never_exceeds_ceiling(values in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
        let store = scalar_store(&values);
        let opt = Optimizer::new(OptimizerConfig::default(), &store).unwrap();
        let mut grads = grads_of(&values);
        opt.clip(&mut grads);
        prop_assert!(grads.global_norm() <= 5.0 + 1e-6);
    }
}

#[test]
fn joint_loss_sums() {
    assert_eq!(joint_loss(0.0, 0.0).unwrap(), 0.0);
    assert_eq!(joint_loss(0.5, 1.5).unwrap(), 2.0);
    assert!(joint_loss(f64::NAN, 1.0).is_err());
    assert!(joint_loss(1.0, f64::INFINITY).is_err());
}

#[test]
fn optimizer_zero_gradient_leaves_params() {
    let mut store = scalar_store(&[1.0, -2.0]);
    let mut opt = Optimizer::new(OptimizerConfig::default(), &store).unwrap();
    let info = opt.step(&mut store, grads_of(&[0.0, 0.0])).unwrap();
    assert_eq!(info.step, 1);
    assert_eq!(opt.step_count(), 1);
    assert_eq!(store.get(ParamId(0)).data(), &[1.0, -2.0]);
    // No gradient at all: also untouched.
    opt.step(&mut store, Gradients::new(1)).unwrap();
    assert_eq!(opt.step_count(), 2);
    assert_eq!(store.get(ParamId(0)).data(), &[1.0, -2.0]);
}

#[test]
fn optimizer_hand_steps() {
    let config = OptimizerConfig {
        lr: 0.1,
        ..OptimizerConfig::default()
    };
    let mut store = scalar_store(&[1.0]);
    let mut opt = Optimizer::new(config, &store).unwrap();
    // g = 1: m = 0.1, v = 0.1, both bias-correct to 1, step = lr / (1 + eps).
    opt.step(&mut store, grads_of(&[1.0])).unwrap();
    let p1 = store.get(ParamId(0)).data()[0];
    assert!((p1 - (1.0 - 0.1 / (1.0 + 1e-12))).abs() < 1e-15);

    let mut store = scalar_store(&[0.0]);
    let mut opt = Optimizer::new(config_lr(0.1), &store).unwrap();
    opt.step(&mut store, grads_of(&[2.0])).unwrap();
    opt.step(&mut store, grads_of(&[-1.0])).unwrap();
    // m2 = 0.08, v2 = 0.46, corrected by 1 - 0.9^2
    let want = -0.1 - 0.1 * 0.270_604_036_596_521_5;
    assert!((store.get(ParamId(0)).data()[0] - want).abs() < 1e-12);
}

fn config_lr(lr: f64) -> OptimizerConfig {
    OptimizerConfig {
        lr,
        ..OptimizerConfig::default()
    }
}

#[test]
fn optimizer_clips_norm_fifty() {
    let store = scalar_store(&[0.0, 0.0]);
    let opt = Optimizer::new(OptimizerConfig::default(), &store).unwrap();
    let mut grads = grads_of(&[30.0, 40.0]);
    assert_eq!(opt.clip(&mut grads), 50.0);
    let g = grads.get(ParamId(0)).unwrap();
    assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);

    let mut store = store;
    let mut opt = Optimizer::new(OptimizerConfig::default(), &store).unwrap();
    let info = opt.step(&mut store, grads_of(&[30.0, 40.0])).unwrap();
    assert_eq!(info.grad_norm, 50.0);
    assert!((info.clipped_norm - 5.0).abs() < 1e-12);
}

#[test]
fn optimizer_decays_learning_rate() {
    let config = OptimizerConfig {
        lr: 1.0,
        decay_interval: 2,
        ..OptimizerConfig::default()
    };
    let mut store = scalar_store(&[0.0]);
    let mut opt = Optimizer::new(config, &store).unwrap();
    let lrs: Vec<f64> = (0..5)
        .map(|_| opt.step(&mut store, grads_of(&[1.0])).unwrap().lr)
        .collect();
    assert_eq!(lrs, vec![1.0, 1.0, 0.75, 0.75, 0.5625]);
}

#[test]
fn optimizer_rejects_non_finite_gradient() {
    let mut store = scalar_store(&[0.0]);
    let mut opt = Optimizer::new(OptimizerConfig::default(), &store).unwrap();
    let mut grads = grads_of(&[1.0]);
    grads.iter_mut().for_each(|(_, g)| g[0] = f64::NAN);
    assert!(matches!(
        opt.step(&mut store, grads),
        Err(ObjectiveError::NonFiniteGradient { step: 1 })
    ));
    assert_eq!(opt.step_count(), 0);
}

#[test]
fn optimizer_config_validation() {
    assert!(OptimizerConfig::default().validate().is_ok());
    for bad in [
        OptimizerConfig { lr: 0.0, ..Default::default() },
        OptimizerConfig { mu: 1.0, ..Default::default() },
        OptimizerConfig { decay: 0.0, ..Default::default() },
        OptimizerConfig { decay_interval: 0, ..Default::default() },
        OptimizerConfig { clip_norm: -1.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        lstm_hidden: 8,
        lstm_layers: 1,
        mlp_dim: 8,
        ..ModelConfig::default()
    }
}

fn synthetic_windows(seed: u64, docs: usize) -> (Vec<WindowInstance>, Vocab) {
    let profile = DatasetProfile::tbdense();
    let docs = generate_synthetic(&SyntheticConfig::new(seed, docs, profile.clone()));
    let cw = corpus_windows(&docs, &profile, &WindowOptions { seed, ..Default::default() }).unwrap();
    let vocab = Vocab::build(cw.windows.iter().flat_map(|w| w.tokens.iter().map(String::as_str)));
    (cw.windows, vocab)
}

fn trainer(config: ModelConfig, vocab: Vocab, seed: u64) -> Trainer<f32> {
    let model = Model::new(config, DatasetProfile::tbdense(), vocab, None, seed).unwrap();
    Trainer::new(
        model,
        config_lr(1e-3),
        TrainConfig {
            epochs: Some(5),
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap()
}

#[test]
fn training_reduces_loss() {
    let (windows, vocab) = synthetic_windows(1, 20);
    let mut t = trainer(small_config(), vocab, 1);
    let epochs = t.train(&windows).unwrap();
    assert_eq!(epochs.len(), 5);
    assert!(epochs[4].mean_joint < epochs[0].mean_joint, "{epochs:?}");
    assert_eq!(t.curve().len(), epochs.iter().map(|e| e.steps).sum::<usize>());
    assert_eq!(t.epochs_done(), 5);
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let (windows, vocab) = synthetic_windows(2, 6);
    let run = |exec: crate::exec::Execution, batch: usize| {
        let model =
            Model::<f32>::new(small_config(), DatasetProfile::tbdense(), vocab.clone(), None, 4)
                .unwrap();
        let mut t = Trainer::new(
            model,
            config_lr(1e-3),
            TrainConfig {
                epochs: Some(2),
                seed: 9,
                batch_size: batch,
                ..TrainConfig::default()
            },
        )
        .unwrap()
        .with_execution(exec);
        t.train(&windows).unwrap();
        t.into_model().params().clone()
    };
    use crate::exec::Execution::{Parallel, Sequential};
    assert_eq!(run(Sequential, 1), run(Sequential, 1));
    assert_eq!(run(Parallel, 3), run(Sequential, 3));
    assert_ne!(run(Sequential, 1), run(Sequential, 3));
}

#[test]
fn no_arc_training_runs() {
    let (windows, vocab) = synthetic_windows(3, 5);
    let config = ModelConfig {
        use_arc_module: false,
        ..small_config()
    };
    let mut t = trainer(config, vocab, 3);
    let e = t.run_epoch(&windows).unwrap();
    assert_eq!(e.mean_arc, 0.0);
    assert!(e.mean_rel > 0.0);
}

#[test]
fn empty_corpus_is_rejected() {
    let (windows, vocab) = synthetic_windows(4, 2);
    let mut t = trainer(small_config(), vocab, 4);
    assert!(matches!(t.run_epoch(&[]), Err(ObjectiveError::NoTrainingData)));
    let unlabeled: Vec<_> = windows
        .into_iter()
        .map(|mut w| {
            w.arc_gold = Square::filled(w.len(), false);
            w
        })
        .collect();
    assert!(matches!(
        t.run_epoch(&unlabeled),
        Err(ObjectiveError::NoTrainingData)
    ));
}

#[test]
fn divergence_is_reported() {
    let (windows, vocab) = synthetic_windows(5, 2);
    let mut model =
        Model::<f32>::new(small_config(), DatasetProfile::tbdense(), vocab, None, 5).unwrap();
    let id = model.params().id("mlp.arc_dep.b").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(model, OptimizerConfig::default(), TrainConfig::default()).unwrap();
    let err = t.run_epoch(&windows).unwrap_err();
    assert!(matches!(err, ObjectiveError::Diverged { step: 1, .. }), "{err}");
}

#[test]
fn default_epochs_follow_profile() {
    let c = TrainConfig::default();
    assert_eq!(c.epochs_for(&DatasetProfile::tbdense()), 40);
    assert_eq!(c.epochs_for(&DatasetProfile::matres()), 19);
    assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
}

#[test]
fn loss_curve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.tsv");
    let records = vec![
        LossRecord { step: 1, arc: 0.7, rel: 1.8, joint: 2.5 },
        LossRecord { step: 2, arc: 0.25, rel: 1.0, joint: 1.25 },
    ];
    write_loss_curve(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("step\tarc_loss"));
    assert_eq!(read_loss_curve(&path).unwrap(), records);
}

/// Central finite differences on a sample of entries of every parameter.
fn gradcheck(seed: u64, use_arc_module: bool) {
    let profile = DatasetProfile::tbdense();
    let tokens: Vec<String> = ["he", "had", "left", "before", "she", "arrived"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (arc_gold, rel_gold) = build_gold(
        6,
        &[(1, 5, Relation::Before), (2, 5, Relation::Before), (0, 4, Relation::Simultaneous)],
        &profile,
    )
    .unwrap();
    let window = WindowInstance {
        doc_id: "g".into(),
        index: 0,
        token_origin: (0..6).map(|k| (0, k)).collect(),
        loss_mask: crate::preprocess::sample_mask(&arc_gold, seed),
        tokens,
        arc_gold,
        rel_gold,
        event_first_tokens: Default::default(),
    };
    let config = ModelConfig {
        embed_dim: 3,
        lstm_hidden: 2,
        lstm_layers: 2,
        mlp_dim: 3,
        use_arc_module,
        ..ModelConfig::default()
    };
    let vocab = Vocab::build(window.tokens.iter().map(String::as_str));
    let mut model = Model::<f64>::new(config, profile, vocab, None, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let analytic = window_loss(&model, &window, &window.loss_mask, &mut rng).unwrap();
    let ids: Vec<ParamId> = model.params().ids().collect();
    let h = 1e-5;
    for id in ids {
        let len = model.params().get(id).numel();
        let grad = analytic.grads.get(id).map(|g| g.to_vec()).unwrap_or(vec![0.0; len]);
        for k in (0..len).step_by(len.div_ceil(4).max(1)) {
            let orig = model.params().get(id).data()[k];
            let mut eval = |x: f64| {
                model.params_mut().get_mut(id).data_mut()[k] = x;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                window_loss_value(&model, &window, &window.loss_mask, Mode::Train, &mut rng)
                    .unwrap()
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            eval(orig);
            let a = grad[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                err < 1e-4,
                "{} [{k}]: analytic {a} numeric {numeric}",
                model.params().name(id)
            );
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in 0..2 {
        gradcheck(seed, true);
    }
    gradcheck(7, false);
}
