use echoqa::dataset::{load_dataset, save_dataset};
use echoqa::model::*;
use echoqa::nn::gradcheck::TOLERANCE;
use echoqa::nn::optim::{Adam, AdamConfig};
use echoqa::nn::rng::Rng;
use echoqa::nn::Tape;
use echoqa::phantom::{generate_dataset, CineClip, DegradationMix};
use echoqa::rubric::{Attribute, QualityBand, Rubric};
use echoqa::Error;

fn phantoms(n: usize, seed: u64) -> Vec<CineClip> {
    generate_dataset(n, seed, &DegradationMix::uniform(), &Rubric::default()).unwrap()
}

fn tiny_clips(n: usize, seed: u64) -> Vec<CineClip> {
    random_clips(&ModelConfig::tiny(), n, &mut Rng::new(seed)).unwrap()
}

#[test]
fn seeded_initialization() {
    let cfg = ModelConfig::default();
    let a = build_model(&cfg, 3).unwrap();
    let b = build_model(&cfg, 3).unwrap();
    let c = build_model(&cfg, 4).unwrap();
    for ((_, pa), ((_, pb), (_, pc))) in a.params().iter().zip(b.params().iter().zip(c.params().iter())) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
        if pa.name.ends_with("kernel") {
            assert_ne!(pa.value, pc.value);
        }
    }
    for at in Attribute::ALL {
        assert!(!a.stream_params(at).is_empty());
    }
}

#[test]
fn one_output_per_stream() {
    let cfg = ModelConfig::tiny();
    let model = Model::<f64>::new(&cfg, 1).unwrap();
    let clips = tiny_clips(3, 1);
    let refs: Vec<&CineClip> = clips.iter().collect();
    let mut tape = Tape::new();
    let x = tape.input(model.input_tensor(&refs).unwrap());
    let (outs, updates) = model.forward(&mut tape, x, 3, &mut Pass::Infer).unwrap();
    assert!(updates.is_empty());
    for o in outs {
        assert_eq!(tape.value(o).shape(), &[3, 1]);
    }
}

#[test]
fn untrained_scores_are_valid_and_repeatable() {
    let model = build_model(&ModelConfig::default(), 1).unwrap();
    let clips = phantoms(5, 1);
    let rubric = Rubric::default();
    let a = forward_score(&model, &clips[0], &rubric).unwrap();
    let b = forward_score(&model, &clips[0], &rubric).unwrap();
    assert_eq!(a, b);
    for v in a.normalized() {
        assert!(v > 0.0 && v < 1.0, "{v}");
    }

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&clips, dir.path(), None).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    let c = forward_score(&model, &back.clips[0], &rubric).unwrap();
    for (x, y) in a.normalized().iter().zip(c.normalized()) {
        assert!((x - y).abs() <= 1e-3, "{x} vs {y}");
    }
}

#[test]
fn wrong_frame_count_is_rejected() {
    let model = build_model(&ModelConfig::default(), 1).unwrap();
    let mut clip = phantoms(5, 2).remove(0);
    clip.frames.pop();
    assert!(matches!(model.predict(&[&clip]), Err(Error::Clip { .. })));
}

#[test]
fn batch_order_does_not_matter() {
    let model = Model::<f64>::new(&ModelConfig::tiny(), 5).unwrap();
    let clips = tiny_clips(4, 2);
    let fwd: Vec<&CineClip> = clips.iter().collect();
    let rev: Vec<&CineClip> = clips.iter().rev().collect();
    let a = model.predict(&fwd).unwrap();
    let mut b = model.predict(&rev).unwrap();
    b.reverse();
    for (x, y) in a.iter().zip(&b) {
        for i in 0..4 {
            assert!((x[i] - y[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn four_stream_gradients_match_finite_differences() {
    let report = check_model_gradients(&ModelConfig::tiny(), 3, 11).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.max_relative_error <= TOLERANCE);
}

#[test]
fn adam_step_descends() {
    let model = Model::<f64>::new(&ModelConfig::tiny(), 2).unwrap();
    let clips = tiny_clips(1, 9);
    let refs: Vec<&CineClip> = clips.iter().collect();
    let w = [1.0; 4];
    let (before, _, grads, _) = model.loss_and_grads(&refs, w, &mut Pass::Train(&mut Rng::new(1))).unwrap();
    let mut after_model = model.clone();
    let mut adam = Adam::new(model.params(), AdamConfig::default(), TrainConfig::default().schedule());
    adam.step(after_model.params_mut(), &grads, 1e-4);
    let after = after_model.loss(&refs, w, &mut Pass::Train(&mut Rng::new(1))).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn learning_rate_drops_tenfold_at_epoch_15() {
    let s = TrainConfig::paper().schedule();
    for e in 0..15 {
        assert_eq!(s.at(e), 2e-4);
    }
    assert_eq!(s.at(15), 0.1 * s.at(14));
    assert_eq!(s.at(30), 0.1 * 0.1 * 2e-4);
}

#[test]
fn early_stopping_contract() {
    let mut e = EarlyStopping::new(2);
    assert_eq!(e.observe(0, 0.5), Verdict::Improved);
    assert_eq!(e.observe(1, 0.4), Verdict::Improved);
    assert_eq!(e.observe(2, 0.4), Verdict::Wait);
    assert_eq!(e.observe(3, 0.3), Verdict::Improved);
    assert_eq!(e.observe(4, 0.31), Verdict::Wait);
    assert_eq!(e.observe(5, 0.35), Verdict::Stop);
    assert_eq!((e.best, e.best_epoch), (0.3, 3));
}

#[test]
fn tiny_training_runs_and_restores_best() {
    let mut cfg = ModelConfig::tiny();
    cfg.dropout = 0.0;
    let clips = tiny_clips(10, 4);
    let (train_set, val) = clips.split_at(8);
    let train_set: Vec<&CineClip> = train_set.iter().collect();
    let val: Vec<&CineClip> = val.iter().collect();
    let mut model = Model::<f32>::new(&cfg, 1).unwrap();
    let tc = TrainConfig {
        max_epochs: 12,
        patience: 3,
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    let out = train_with(&mut model, &train_set, &val, &tc, |e| {
        lines.push(serde_json::to_string(e).unwrap());
        Ok(())
    })
    .unwrap();
    assert_eq!(lines.len(), out.log.len());
    assert!(lines[0].contains("\"OnAxis\""));
    let best = out.log[out.best_epoch].val_mae.mean();
    assert_eq!(best, out.best_val_mae);
    let now = evaluate(&model, &val).unwrap().mae().mean();
    assert!((now - best).abs() < 1e-9, "{now} vs {best}");
    assert!(model.norms().iter().all(|n| n.initialized));
}

#[test]
fn target_mae_stops_at_first_qualifying_best() {
    let clips = tiny_clips(10, 4);
    let (train_set, val) = clips.split_at(8);
    let train_set: Vec<&CineClip> = train_set.iter().collect();
    let val: Vec<&CineClip> = val.iter().collect();
    let base = TrainConfig {
        max_epochs: 4,
        patience: 4,
        ..TrainConfig::default()
    };
    let run = |target: Option<f64>| {
        let mut model = Model::<f32>::new(&ModelConfig::tiny(), 1).unwrap();
        let tc = TrainConfig {
            target_mae: target,
            ..base.clone()
        };
        train(&mut model, &train_set, &val, &tc).unwrap()
    };
    let full = run(None);
    assert_eq!(full.log.len(), 4);
    let first = full.log[0].val_mae.0.iter().cloned().fold(0.0, f64::max);

    let stopped = run(Some(first + 1e-9));
    assert_eq!((stopped.log.len(), stopped.best_epoch), (1, 0));
    assert!(stopped.stopped_early);
    assert_eq!(stopped.log[0], full.log[0]);

    assert_eq!(run(Some(1e-12)).log.len(), 4);
    let bad = TrainConfig {
        target_mae: Some(0.0),
        ..base
    };
    assert!(bad.validate().is_err());
}

#[test]
fn divergence_names_epoch_and_stream() {
    let clips = tiny_clips(10, 4);
    let refs: Vec<&CineClip> = clips.iter().collect();
    let mut model = Model::<f32>::new(&ModelConfig::tiny(), 1).unwrap();
    let tc = TrainConfig {
        base_lr: 1e30,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    match train(&mut model, &refs, &refs, &tc) {
        Err(Error::Diverged { epoch, stream }) => {
            assert!(epoch < 5);
            assert!(Attribute::parse(&stream).is_some(), "{stream}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn perfect_predictions_score_100() {
    let labels = vec![[0.1, 0.5, 0.9, 0.3], [0.7, 0.2, 0.4, 1.0]];
    let r = EvalReport::from_predictions(&labels, &labels).unwrap();
    assert!(r.attributes.iter().all(|a| a.accuracy == 100.0 && a.mae == 0.0));
    assert_eq!(r.average_accuracy, 100.0);
    let cols: Vec<&str> = r.attributes.iter().map(|a| a.column.as_str()).collect();
    assert_eq!(cols, ["On-Axis", "LV Clarity", "Depth Gain", "Fore-Shortening"]);
    assert!(r.table().lines().next().unwrap().ends_with("Fore-Shortening | Average |"));
}

#[test]
fn accuracy_column_follows_mae() {
    let mut rng = Rng::new(8);
    let labels: Vec<[f64; 4]> = (0..30).map(|_| [0; 4].map(|_| rng.uniform())).collect();
    let preds: Vec<[f64; 4]> = (0..30).map(|_| [0; 4].map(|_| rng.uniform())).collect();
    let r = EvalReport::from_predictions(&labels, &preds).unwrap();
    for a in &r.attributes {
        assert!((a.accuracy - (1.0 - a.mae) * 100.0).abs() < 1e-12);
        let i = a.attribute.index();
        let mae: f64 = labels.iter().zip(&preds).map(|(l, p)| (p[i] - l[i]).abs()).sum::<f64>() / 30.0;
        assert!((a.mae - mae).abs() < 1e-12);
        assert!(a.errors.q1 <= a.errors.median && a.errors.median <= a.errors.q3);
    }
    let mean = r.attributes.iter().map(|a| a.accuracy).sum::<f64>() / 4.0;
    assert!((r.average_accuracy - mean).abs() < 1e-12);
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let clips = tiny_clips(8, 3);
    let refs: Vec<&CineClip> = clips.iter().collect();
    let mut model = Model::<f32>::new(&ModelConfig::tiny(), 1).unwrap();
    let tc = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    train(&mut model, &refs, &refs, &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.norms(), model.norms());
    assert_eq!(back.predict(&refs).unwrap(), model.predict(&refs).unwrap());
    assert_eq!(back.to_checkpoint().unwrap(), model.to_checkpoint().unwrap());
}

#[test]
fn cross_validation_needs_five_per_fold() {
    let clips = tiny_clips(24, 1);
    let err = cross_validate(&clips, &ModelConfig::tiny(), &TrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains("at least 25"), "{err}");
}

#[test]
fn cross_validation_partitions_clips() {
    let clips = tiny_clips(25, 6);
    let tc = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let cv = cross_validate(&clips, &ModelConfig::tiny(), &tc).unwrap();
    assert_eq!(cv.folds.len(), 5);
    let mut seen: Vec<&str> = cv.folds.iter().flat_map(|f| f.validation.iter().map(String::as_str)).collect();
    seen.sort();
    let mut ids: Vec<&str> = clips.iter().map(|c| c.id.as_str()).collect();
    ids.sort();
    assert_eq!(seen, ids);
    for a in Attribute::ALL {
        let mean = cv.folds.iter().map(|f| f.report.mae().get(a)).sum::<f64>() / 5.0;
        assert!((cv.mean_mae.get(a) - mean).abs() < 1e-12);
    }
    let again = cross_validate(&clips, &ModelConfig::tiny(), &tc).unwrap();
    assert_eq!(again, cv);
}

#[test]
fn benchmark_contract() {
    let model = Model::<f32>::new(&ModelConfig::tiny(), 1).unwrap();
    let clips = tiny_clips(2, 1);
    let refs: Vec<&CineClip> = clips.iter().collect();
    assert!(benchmark_inference(&model, &refs, 0, 1).is_err());
    let s = benchmark_inference(&model, &refs, 9, 2).unwrap();
    assert!(s.median_ms_per_frame <= s.p95_ms_per_frame);
    assert_eq!(s.frames_per_run, 4);
    assert!(s.frames_per_sec > 0.0);
}

#[test]
fn scores_map_to_bands() {
    let rubric = Rubric::default();
    let s = rubric.scores_from_normalized([1.0, 0.7, 0.5, 0.2]).unwrap();
    assert_eq!(s.get(Attribute::OnAxis).band, QualityBand::Optimum);
    assert_eq!(s.get(Attribute::Foreshorten).band, QualityBand::Unsuitable);
}
