use evfilter::encoder::EncoderConfig;
use evfilter::evidence_filter::Permutation;
use evfilter::fusion_head::{instance_loss, loss_and_accumulate, model_forward};
use evfilter::harness::{
    evaluate, gradcheck, inspect_filter, metrics_csv, predict, run_ablation_suite, shuffle_audit, shuffle_audit_with,
    train, Checkpoint, GradcheckConfig, LrSchedule, TrainConfig, METRICS_HEADER,
};
use evfilter::model::{AblationMode, ModelParams};
use evfilter::numerics::{argmax, finite_diff_gradient, Precision};
use evfilter::synth_data::{generate_dataset, GenSpec, McqaInstance};
use evfilter::Error;

fn tiny(mode: AblationMode) -> TrainConfig {
    let mut cfg = TrainConfig {
        mode,
        batch_size: 8,
        total_steps: 6,
        eval_every: 3,
        encoder: EncoderConfig {
            blocks: 2,
            hidden: 8,
            heads: 2,
            ffn_hidden: 16,
            max_len: 40,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.data.gen = GenSpec {
        n_sentences: 3,
        n_evidence: 1,
        min_sentence_len: 2,
        max_sentence_len: 4,
        ..GenSpec::default()
    };
    cfg.data.train_size = 48;
    cfg.data.test_size = 24;
    cfg
}

fn splits(cfg: &TrainConfig) -> (Vec<McqaInstance>, Vec<McqaInstance>) {
    evfilter::harness::load_or_generate(&cfg.data).unwrap()
}

#[test]
fn same_seed_gives_identical_checkpoints_and_metrics() {
    let cfg = tiny(AblationMode::FusionPerBlockFilter);
    let (tr, te) = splits(&cfg);
    let a = train::<f32>(&cfg, &tr, Some(&te), |_| {}).unwrap();
    let b = train::<f32>(&cfg, &tr, Some(&te), |_| {}).unwrap();
    assert_eq!(a.blob(), b.blob());
    assert_eq!(a.manifest_json(), b.manifest_json());
    assert_eq!(metrics_csv(&a.manifest.metrics), metrics_csv(&b.manifest.metrics));

    let dir = tempfile::tempdir().unwrap();
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    a.save(&da).unwrap();
    b.save(&db).unwrap();
    for entry in std::fs::read_dir(&da).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(da.join(&name)).unwrap(), std::fs::read(db.join(&name)).unwrap());
    }

    let other = train::<f32>(&TrainConfig { seed: 1, ..cfg }, &tr, Some(&te), |_| {}).unwrap();
    assert_ne!(other.blob(), a.blob());
}

#[test]
fn metrics_follow_the_schedule_and_start_near_ln4() {
    let cfg = tiny(AblationMode::FusionPerBlockFilter);
    let (tr, te) = splits(&cfg);
    let mut seen = Vec::new();
    let ck = train::<f64>(&cfg, &tr, Some(&te), |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, ck.manifest.metrics);
    assert_eq!(seen.len(), cfg.total_steps);
    assert!((seen[0].loss - 4f64.ln()).abs() < 0.1);
    let sched = LrSchedule {
        peak: cfg.learning_rate,
        warmup_fraction: cfg.warmup_fraction,
        total_steps: cfg.total_steps,
    };
    for r in &seen {
        assert_eq!(r.lr, sched.at(r.step));
        assert_eq!(r.eval_accuracy.is_some(), (r.step + 1) % 3 == 0);
    }
    let csv = metrics_csv(&seen);
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), cfg.total_steps + 1);
}

#[test]
fn schedule_is_piecewise_linear_pointwise() {
    let s = LrSchedule {
        peak: 2e-3,
        warmup_fraction: 0.1,
        total_steps: 2000,
    };
    assert_eq!(s.at(0), 0.0);
    assert!((s.at(100) - 1e-3).abs() < 1e-15);
    assert!((s.at(200) - 2e-3).abs() < 1e-15);
    assert!((s.at(1100) - 1e-3).abs() < 1e-15);
    assert_eq!(s.at(2000), 0.0);
    for step in 1..2000 {
        let (a, b, c) = (s.at(step - 1), s.at(step), s.at(step + 1));
        if step != 200 {
            assert!(((b - a) - (c - b)).abs() < 1e-15, "kink at {step}");
        }
    }
}

#[test]
fn checkpoint_round_trip_keeps_accuracy_and_logits() {
    let cfg = tiny(AblationMode::FusionSharedFilter);
    let (tr, te) = splits(&cfg);
    let ck = train::<f32>(&cfg, &tr, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.manifest, ck.manifest);
    assert_eq!(back.manifest.precision, Precision::F32);
    assert_eq!(evaluate(&back.params, &te).unwrap(), evaluate(&ck.params, &te).unwrap());
    for inst in &te[..4] {
        assert_eq!(model_forward(inst, &back.params).unwrap(), model_forward(inst, &ck.params).unwrap());
    }
    assert!(Checkpoint::<f64>::load(dir.path()).is_err());
}

#[test]
fn evaluate_equals_manual_recount() {
    let cfg = tiny(AblationMode::NoFilter);
    let (tr, te) = splits(&cfg);
    let ck = train::<f64>(&cfg, &tr, None, |_| {}).unwrap();
    let correct = te
        .iter()
        .filter(|i| argmax(&model_forward(i, &ck.params).unwrap()) == i.label)
        .count();
    assert_eq!(evaluate(&ck.params, &te).unwrap(), correct as f64 / te.len() as f64);
    for inst in &te {
        assert_eq!(predict(&ck.params, inst).unwrap(), argmax(&model_forward(inst, &ck.params).unwrap()));
    }
    let one = &te[..1];
    let acc = evaluate(&ck.params, one).unwrap();
    assert!(acc == 0.0 || acc == 1.0);
    let mut flipped = one[0].clone();
    flipped.label = (predict(&ck.params, &flipped).unwrap() + 1) % 4;
    assert_eq!(evaluate(&ck.params, &[flipped.clone()]).unwrap(), 0.0);
    flipped.label = predict(&ck.params, &flipped).unwrap();
    assert_eq!(evaluate(&ck.params, &[flipped]).unwrap(), 1.0);
}

#[test]
fn identity_shuffles_have_zero_spread_for_any_model() {
    let cfg = tiny(AblationMode::UnconstrainedNoFusion);
    let (_, te) = splits(&cfg);
    let params = ModelParams::<f32>::init(cfg.model_config(), 3).unwrap();
    let sets = vec![vec![Permutation::identity(); te.len()]; 3];
    let report = shuffle_audit_with(&params, &te, &sets).unwrap();
    assert_eq!(report.accuracy_spread, 0.0);
    assert_eq!(report.max_logit_residual, 0.0);
    assert_eq!(report.argmax_change_fraction, 0.0);
    assert!(shuffle_audit_with(&params, &te, &[vec![Permutation::identity()]]).is_err());
    assert!(shuffle_audit(&params, &te, &[]).is_err());
}

#[test]
fn constrained_model_survives_shuffling() {
    let cfg = tiny(AblationMode::FusionPerBlockFilter);
    let (tr, te) = splits(&cfg);
    let ck = train::<f32>(&TrainConfig { total_steps: 12, ..cfg }, &tr, None, |_| {}).unwrap();
    let report = shuffle_audit(&ck.params, &te, &[0, 1, 2]).unwrap();
    assert_eq!(report.runs.len(), 3);
    assert_eq!(report.accuracy_spread, 0.0);
    assert!(report.max_logit_residual <= 1e-4);
    assert_eq!(report.argmax_change_fraction, 0.0);
    assert!(report.to_string().contains("spread"));
}

#[test]
fn inspect_filter_reports_fresh_zeros_and_refuses_other_modes() {
    let cfg = tiny(AblationMode::FusionPerBlockFilter);
    let params = ModelParams::<f64>::init(cfg.model_config(), 0).unwrap();
    let report = inspect_filter(&params).unwrap();
    assert_eq!(report.rows.len(), cfg.encoder.blocks);
    for r in &report.rows {
        assert_eq!((r.alpha, r.beta, r.product), (0.0, 0.0, 0.0));
        assert!(r.residual <= 1e-12);
    }
    assert!(!report.opposite_sign);
    let text = report.to_string();
    assert!(text.contains("alpha") && text.contains("beta") && text.contains("alpha*beta"));

    for mode in [AblationMode::UnconstrainedNoFusion, AblationMode::NoFilter] {
        let p = ModelParams::<f64>::init(tiny(mode).model_config(), 0).unwrap();
        assert!(matches!(inspect_filter(&p), Err(Error::UnsupportedMode(_))));
    }
}

#[test]
fn ablation_suite_has_five_labelled_rows() {
    let cfg = TrainConfig {
        total_steps: 2,
        ..tiny(AblationMode::FusionPerBlockFilter)
    };
    let (tr, te) = splits(&cfg);
    let mut streamed = 0;
    let table = run_ablation_suite::<f32>(&cfg, &tr, &te, |_| streamed += 1).unwrap();
    assert_eq!(streamed, 5);
    assert_eq!(table.rows.len(), 5);
    let refs: Vec<f64> = table.rows.iter().map(|r| r.reference).collect();
    assert_eq!(refs, [60.0, 63.8, 65.0, 64.0, 65.6]);
    let text = table.to_string();
    for mode in AblationMode::ALL {
        assert!(text.contains(mode.table_label()), "{}", mode.table_label());
        assert!(table.accuracy(mode).is_some());
    }
}

#[test]
fn exploding_learning_rate_aborts_with_non_finite_loss() {
    let cfg = TrainConfig {
        learning_rate: 1e30,
        warmup_fraction: 0.0,
        total_steps: 6,
        ..tiny(AblationMode::FusionPerBlockFilter)
    };
    let (tr, _) = splits(&cfg);
    match train::<f32>(&cfg, &tr, None, |_| {}) {
        Err(Error::NonFiniteLoss { step, .. }) => assert!(step >= 1),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|c| c.manifest.step)),
    }
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let (tr, _) = splits(&tiny(AblationMode::NoFilter));
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..tiny(AblationMode::NoFilter)
        },
        TrainConfig {
            warmup_fraction: 1.5,
            ..tiny(AblationMode::NoFilter)
        },
    ] {
        assert!(matches!(train::<f32>(&cfg, &tr, None, |_| {}), Err(Error::ConfigMismatch(_))));
    }
    let mut small = tiny(AblationMode::NoFilter);
    small.encoder.vocab_size = 40;
    assert!(matches!(train::<f32>(&small, &tr, None, |_| {}), Err(Error::ConfigMismatch(_))));
}

#[test]
fn gradcheck_passes_on_a_few_seeds_in_both_precisions() {
    for precision in [Precision::F64, Precision::F32] {
        let report = gradcheck(&GradcheckConfig {
            precision,
            seeds: vec![0, 1],
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(report.passed(), "{report}");
        for name in ["filter.block0.alpha", "filter.block1.beta", "fusion.w_bf", "fusion.b_bf"] {
            assert!(report.entries.iter().any(|e| e.name == name), "{name} not checked");
        }
    }
}

#[test]
fn saturated_correct_logits_give_vanishing_gradients_both_ways() {
    let cfg = GradcheckConfig::default();
    let mut params = ModelParams::<f64>::init(
        evfilter::model::ModelConfig {
            encoder: cfg.encoder.clone(),
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let mut inst = generate_dataset(&cfg.gen, 1).unwrap().remove(0);
    let (w, _) = params.layout.head;
    let (wa, _) = params.layout.aux.unwrap();
    for id in [w, wa] {
        params.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 5e3);
    }
    let logits = model_forward(&inst, &params).unwrap();
    inst.label = argmax(&logits);
    let loss = instance_loss(&inst, &params).unwrap();
    assert!(loss < 1e-12, "loss {loss}");

    params.store.zero_grad();
    loss_and_accumulate(&inst, &mut params).unwrap();
    let analytic = params.store.flatten_grads();
    let theta = params.store.flatten();
    let mut probe = params.clone();
    let numeric = finite_diff_gradient(
        |x: &[f64]| {
            probe.store.assign_flat(x).unwrap();
            instance_loss(&inst, &probe).unwrap()
        },
        &theta,
        1e-6,
    );
    assert!(analytic.iter().all(|g| g.abs() < 1e-8));
    assert!(numeric.iter().all(|g| g.abs() < 1e-8));
}
