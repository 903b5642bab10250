use super::*;
use crate::dataset::{
    generate_toy, FeatureKind, FeatureSchema, FeatureSpec, Marginal, Provenance, ToyConfig,
};
use crate::losses::HistogramDefaults;
use crate::models::TrainedModel;

fn schema(d: usize) -> FeatureSchema {
    FeatureSchema::new(
        (0..d)
            .map(|j| FeatureSpec::new(format!("x{j}"), FeatureKind::Other))
            .collect(),
    )
    .unwrap()
}

fn toy(d: usize, shift: f64, seed: u64, n: usize) -> EventTable {
    let correlation = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.3 }).collect())
        .collect();
    let marginals = (0..d)
        .map(|j| Marginal::Normal {
            mean: shift * (j + 1) as f64,
            sigma: 1.0,
        })
        .collect();
    let cfg = ToyConfig {
        correlation,
        marginals,
        padding: vec![],
        seed,
    };
    generate_toy(&schema(d), &cfg, n, Provenance::Source).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 128,
        allow_small_batch: true,
        learning_rate: 5e-3,
        max_epochs: 6,
        patience: 3,
        hidden: vec![8],
        stage1_hidden: vec![4],
        ..TrainConfig::default()
    }
}

fn setup() -> TrainSetup {
    TrainSetup {
        histogram_defaults: HistogramDefaults {
            bins: 12,
            ..HistogramDefaults::default()
        },
        ..TrainSetup::default()
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let small = TrainConfig {
        batch_size: 5000,
        ..TrainConfig::default()
    };
    assert!(matches!(small.validate(), Err(Error::Config(_))));
    assert!(TrainConfig {
        allow_small_batch: true,
        ..small
    }
    .validate()
    .is_ok());
    assert!(TrainConfig {
        split_fraction: 1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn split_is_deterministic_disjoint_and_exhaustive() {
    let (a, b) = split_indices(100, 0.8, 5).unwrap();
    assert_eq!((a.len(), b.len()), (80, 20));
    assert_eq!(split_indices(100, 0.8, 5).unwrap(), (a.clone(), b.clone()));
    let mut all: Vec<usize> = a.into_iter().chain(b).collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert!(matches!(split_indices(9, 0.8, 0), Err(Error::Contract(_))));
    let t = toy(2, 0.0, 1, 50);
    let (tr, va) = split_train_val(&t, 0.8, 3).unwrap();
    assert_eq!((tr.n_events(), va.n_events()), (40, 10));
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = Tensor::row(vec![1.0, -2.0]);
    let mut st = AdamState::new(&[&p]);
    st.m[0] = vec![0.5, 0.5];
    st.v[0] = vec![1e-20, 1e-20];
    let before = p.clone();
    adam_step(
        &mut [&mut p],
        &[vec![0.0, 0.0]],
        &mut st,
        0.1,
        &AdamConfig::default(),
    )
    .unwrap();
    assert_eq!(st.m[0], vec![0.45, 0.45]);
    // m̂/(√v̂+ε) with decayed moments still moves; only the exact zero state is a fixed point.
    let mut q = before.clone();
    let mut fresh = AdamState::new(&[&q]);
    adam_step(
        &mut [&mut q],
        &[vec![0.0, 0.0]],
        &mut fresh,
        0.1,
        &AdamConfig::default(),
    )
    .unwrap();
    assert_eq!(q, before);
    assert_eq!(fresh.t, 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut a = Tensor::row(vec![1.0, 1.0]);
    let mut b = Tensor::scalar(0.0);
    let mut st = AdamState::new(&[&a, &b]);
    let cfg = AdamConfig::default();
    adam_step(
        &mut [&mut a, &mut b],
        &[vec![3.0, -0.5], vec![0.0]],
        &mut st,
        1e-3,
        &cfg,
    )
    .unwrap();
    let expect = |g: f64| -1e-3 * g / (g.abs() + cfg.eps);
    assert!((a.data()[0] - (1.0 + expect(3.0))).abs() < 1e-15);
    assert!((a.data()[1] - (1.0 + expect(-0.5))).abs() < 1e-15);
    assert_eq!(b.data()[0], 0.0);
    assert!(adam_step(&mut [&mut a], &[vec![0.0]], &mut st, 1e-3, &cfg).is_err());
}

#[test]
fn early_stopping_follows_patience() {
    let mut s = EarlyStopping::new(5);
    let losses = [5.0, 4.0, 4.1, 4.2, 4.3, 4.4, 4.5];
    let decisions: Vec<StopDecision> = losses
        .iter()
        .enumerate()
        .map(|(e, &l)| s.observe(e + 1, l))
        .collect();
    assert_eq!(decisions[6], StopDecision::Stop);
    assert!(decisions[..6].iter().all(|d| *d != StopDecision::Stop));
    assert_eq!(s.best_epoch, 2);
    assert_eq!(s.best, Some(4.0));
}

#[test]
fn batches_merge_small_remainder() {
    let b = make_batches(1000, 300, 1);
    assert_eq!(
        b.iter().map(Vec::len).collect::<Vec<_>>(),
        vec![300, 300, 400]
    );
    let b = make_batches(1000, 400, 1);
    assert_eq!(
        b.iter().map(Vec::len).collect::<Vec<_>>(),
        vec![400, 400, 200]
    );
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    assert_eq!(make_batches(50, 300, 2).len(), 1);
}

#[test]
fn global_training_is_deterministic_and_restores_best() {
    let src = toy(3, 0.0, 1, 600);
    let tgt = toy(3, 0.3, 2, 600);
    let cfg = small_cfg();
    let (b1, l1) = train_global(&src, &tgt, &setup(), &cfg, None)
        .unwrap()
        .finished()
        .unwrap();
    let (b2, l2) = train_global(&src, &tgt, &setup(), &cfg, None)
        .unwrap()
        .finished()
        .unwrap();
    assert_eq!(b1, b2);
    assert_eq!(l1.without_timing(), l2.without_timing());
    assert!(l1.stop_reason.is_some());
    assert!(l1
        .epochs
        .iter()
        .all(|e| e.val.total >= l1.best_val.unwrap()));

    let prep = prepare(&src, &tgt, &setup(), &cfg).unwrap();
    let TrainedModel::Global(m) = &b1.model else {
        panic!()
    };
    let mut tape = Tape::new();
    let vars = m.mlp.vars(&mut tape);
    let x = tape.constant(prep.val.clone());
    let y = m.forward_tape(&mut tape, &vars, x).unwrap();
    let ctx = crate::losses::LossContext {
        feature_templates: prep.feature_templates.iter().cloned().map(Some).collect(),
        observables: vec![],
        standardizer: prep.standardizer.clone(),
        weights: cfg.weights,
        move_weights: vec![1.0; 3],
        move_alpha: vec![0.5; 3],
        protect: vec![false; 3],
        target_correlation: None,
    };
    let (_, br) =
        crate::losses::composite_loss(&mut tape, &ctx, crate::losses::LossMode::Global, x, y)
            .unwrap();
    assert!((br.total - l1.best_val.unwrap()).abs() <= 1e-12);
    assert!(src.values().all_finite());
}

#[test]
fn training_moves_toward_the_target() {
    let src = toy(2, 0.0, 1, 800);
    let tgt = toy(2, 0.4, 2, 800);
    let cfg = TrainConfig {
        max_epochs: 15,
        patience: 15,
        ..small_cfg()
    };
    let (_, log) = train_global(&src, &tgt, &setup(), &cfg, None)
        .unwrap()
        .finished()
        .unwrap();
    let first = log.epochs.first().unwrap().val.hist;
    let best = log
        .epochs
        .iter()
        .map(|e| e.val.hist)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.5 * first, "{first} → {best}");
}

struct Rows(Tensor);

impl BatchSource for Rows {
    fn rows(&self, _: Part) -> usize {
        self.0.rows()
    }

    fn describe(&self, _: Part, idx: &[usize]) -> Option<Tensor> {
        Some(self.0.select_rows(idx))
    }
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let data = Rows(Tensor::column((0..20).map(|i| i as f64).collect()));
    let model = crate::models::init_mlp(&[1, 1], 0).unwrap();
    let mut state = LoopState::new(model, 3, "probe");
    let settings = LoopSettings {
        batch_size: 10,
        learning_rate: 1e-3,
        adam: AdamConfig::default(),
        max_epochs: 5,
        seed: 0,
    };
    let loss =
        |tape: &mut Tape, m: &crate::models::MlpParams, vars: &[Var], _: Part, idx: &[usize]| {
            let x = tape.constant(data.0.select_rows(idx));
            let y = m.forward(tape, vars, x)?;
            let s = tape.sum(y);
            let l = tape.scale(s, f64::NAN);
            let v = tape.value(l).item();
            Ok((
                l,
                LossBreakdown {
                    total: v,
                    ..Default::default()
                },
            ))
        };
    match run_loop(&mut state, &data, &settings, loss, |_| Ok(false)) {
        Err(Error::NonFinite {
            epoch,
            batch,
            diagnostics,
        }) => {
            assert_eq!((epoch, batch), (1, 1));
            assert!(diagnostics.contains("col 0: mean"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy(2, 0.0, 1, 400);
    let tgt = toy(2, 0.3, 2, 400);
    let cfg = small_cfg();
    let full = train_global(&src, &tgt, &setup(), &cfg, None)
        .unwrap()
        .finished()
        .unwrap();
    let path = dir.path().join("ck.json");
    let pause = CheckpointPolicy {
        path: path.clone(),
        resume: false,
        stop_after_epochs: Some(2),
    };
    assert!(matches!(
        train_global(&src, &tgt, &setup(), &cfg, Some(&pause)).unwrap(),
        Outcome::Interrupted { epoch: 2 }
    ));
    let cont = CheckpointPolicy {
        path,
        resume: true,
        stop_after_epochs: None,
    };
    let resumed = train_global(&src, &tgt, &setup(), &cfg, Some(&cont))
        .unwrap()
        .finished()
        .unwrap();
    assert_eq!(resumed.0, full.0);
    assert_eq!(resumed.1.without_timing(), full.1.without_timing());

    let other = TrainConfig { seed: 9, ..cfg };
    assert!(matches!(
        train_global(&src, &tgt, &setup(), &other, Some(&cont)),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn twostep_resume_and_skip() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy(3, 0.0, 1, 400);
    let tgt = toy(3, 0.3, 2, 400);
    let st = TrainSetup {
        object_groups: vec![vec![0, 1]],
        ..setup()
    };
    let cfg = TrainConfig {
        mode: TrainMode::Twostep,
        max_epochs: 4,
        ..small_cfg()
    };
    let full = train_twostep(&src, &tgt, &st, &cfg, None)
        .unwrap()
        .finished()
        .unwrap();
    let path = dir.path().join("ck.json");
    let pause = CheckpointPolicy {
        path: path.clone(),
        resume: false,
        stop_after_epochs: Some(1),
    };
    assert!(matches!(
        train_twostep(&src, &tgt, &st, &cfg, Some(&pause)).unwrap(),
        Outcome::Interrupted { epoch: 1 }
    ));
    let cont = CheckpointPolicy {
        path,
        resume: true,
        stop_after_epochs: None,
    };
    let resumed = train_twostep(&src, &tgt, &st, &cfg, Some(&cont))
        .unwrap()
        .finished()
        .unwrap();
    assert_eq!(resumed.0, full.0);
    assert_eq!(resumed.1.without_timing(), full.1.without_timing());
    assert!(matches!(
        train_global(&src, &tgt, &st, &cfg, Some(&cont)),
        Err(Error::Kind { .. })
    ));

    let TrainedModel::TwoStep(m) = &full.0.model else {
        panic!()
    };
    assert_eq!(m.stage1[0].as_ref().unwrap().context, vec![0, 1]);
    assert_eq!(m.stage1[2].as_ref().unwrap().context, vec![2]);
    let skip = TrainConfig {
        skip_stage2: true,
        ..cfg
    };
    let (b, log) = train_twostep(&src, &tgt, &st, &skip, None)
        .unwrap()
        .finished()
        .unwrap();
    assert!(log.stage2.is_none());
    let TrainedModel::TwoStep(s) = &b.model else {
        panic!()
    };
    assert_eq!(s.stage1, m.stage1);
    let x = b.standardizer.apply(src.values()).unwrap();
    let (x1, x2) = s.forward(&x).unwrap();
    assert_eq!(x1, x2);
}

#[test]
fn heavy_movement_penalty_freezes_stage1() {
    let src = toy(2, 0.0, 1, 400);
    let tgt = toy(2, 0.5, 2, 400);
    let cfg = TrainConfig {
        stage1_movement: Some(1e6),
        ..small_cfg()
    };
    let prep = prepare(&src, &tgt, &setup(), &cfg).unwrap();
    let (m, _) = train_feature(&prep, &setup(), 1, &cfg).unwrap();
    let out = m.forward(&prep.val).unwrap();
    let max = out
        .iter()
        .zip(prep.val.column_values(1))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max < 1e-2, "{max}");
    let (again, _) = train_feature(&prep, &setup(), 1, &cfg).unwrap();
    assert_eq!(again, m);
}

#[test]
fn json_lines_carry_breakdown() {
    let mut log = TrainLog::new("global");
    log.batches.push(BatchRecord {
        epoch: 1,
        batch: 2,
        loss: LossBreakdown {
            total: 0.5,
            ..Default::default()
        },
    });
    let line = log.json_lines();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    for k in [
        "epoch", "batch", "L_hist", "L_der", "L_move", "L_corr", "total", "stage",
    ] {
        assert!(v.get(k).is_some(), "{k}");
    }
}
