mod common;

use std::collections::BTreeMap;

use common::unit_rings;
use deepbayes_core::attacks::{AdversarialBatch, AttackConfig, AttackKind, CraftedSetting, DetectorOutcomes};
use deepbayes_core::detection::{calibrate, CalibrationMode, DetectorKind};
use deepbayes_core::harness::{
    cell_rng, evaluate_crafted, min_perturbation, read_report, report_csv, run_pipeline,
    summarize_setting, transfer_eval, write_report, ExperimentConfig, ModelSpec, ReportRow,
};
use deepbayes_core::lvm::{predict, TwoRingsClassifier, TwoRingsSpec};
use deepbayes_core::Error;
use deepbayes_tensor::{RngStream, Tensor};
use proptest::prelude::*;

fn outcomes(accepted: &[bool]) -> DetectorOutcomes {
    DetectorOutcomes {
        statistics: vec![0.0; accepted.len()],
        accepted: accepted.to_vec(),
    }
}

fn setting(success: &[bool], detections: &[(DetectorKind, &[bool])]) -> CraftedSetting {
    let n = success.len();
    CraftedSetting {
        setting: 0.3,
        crafted: Tensor::zeros(vec![n, 2]),
        predicted: success.iter().map(|&s| usize::from(s)).collect(),
        success: success.to_vec(),
        detections: detections.iter().map(|(k, a)| (*k, outcomes(a))).collect(),
    }
}

#[test]
fn hand_counted_six_input_batch() {
    let s = setting(
        &[true, true, false, true, false, true],
        &[
            (DetectorKind::Marginal, &[false, true, false, false, true, true]),
            (DetectorKind::Kl, &[false; 6]),
            (DetectorKind::Tv, &[true; 6]),
        ],
    );
    let m = summarize_setting(&s);
    assert_eq!((m.count, m.successes), (6, 4));
    assert_eq!(m.victim_accuracy, Some(2.0 / 6.0));
    assert_eq!(m.success_rate, Some(4.0 / 6.0));
    // Successful inputs 0, 1, 3, 5; marginal rejects 0 and 3 of them.
    assert_eq!(m.tp_rate[&DetectorKind::Marginal], Some(0.5));
    assert_eq!(m.tp_rate[&DetectorKind::Kl], Some(1.0));
    assert_eq!(m.tp_rate[&DetectorKind::Tv], Some(0.0));
    assert!(!m.tp_rate.contains_key(&DetectorKind::Logit));
}

#[test]
fn no_successes_gives_na_rates() {
    let m = summarize_setting(&setting(&[false; 4], &[(DetectorKind::Logit, &[false; 4])]));
    assert_eq!(m.victim_accuracy, Some(1.0));
    assert_eq!(m.success_rate, Some(0.0));
    assert_eq!(m.tp_rate[&DetectorKind::Logit], None);
}

#[test]
fn all_rejected_successes_give_full_tp() {
    let m = summarize_setting(&setting(&[true; 3], &[(DetectorKind::Marginal, &[false; 3])]));
    assert_eq!(m.victim_accuracy, Some(0.0));
    assert_eq!(m.tp_rate[&DetectorKind::Marginal], Some(1.0));
}

#[test]
fn min_perturbation_examples() {
    let grid = [0.1, 0.2, 0.3, 0.4, 0.5];
    // Inputs: first success at 0.2, never, first success at 0.5.
    let flags = vec![
        vec![false, false, false],
        vec![true, false, false],
        vec![false, false, false],
        vec![true, false, false],
        vec![true, false, true],
    ];
    let mp = min_perturbation(&flags, &grid).unwrap();
    assert_eq!(mp.per_input, vec![0.2, 0.6, 0.5]);
    assert!((mp.mean - (0.2 + 0.6 + 0.5) / 3.0).abs() < 1e-15);

    let always = vec![vec![true]; 5];
    assert_eq!(min_perturbation(&always, &grid).unwrap().per_input, vec![0.1]);
    assert!(matches!(min_perturbation(&[], &[]), Err(Error::InvalidArgument(_))));
    assert!(min_perturbation(&flags[..2], &grid).is_err());
}

fn rings_batch(clf: &TwoRingsClassifier, n: usize, seed: u64) -> AdversarialBatch {
    let mut rng = RngStream::new(seed, 0);
    let clean = rng.uniform_tensor(vec![n, 2], 0.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let crafted = rng.uniform_tensor(vec![n, 2], 0.0, 1.0);
    let s = evaluate_crafted(clf, None, &labels, crafted, 0.5, 1, &mut rng).unwrap();
    AdversarialBatch {
        source_model: "A".into(),
        attack: AttackConfig::new(AttackKind::Fgsm).with_epsilon(1.0),
        seed,
        clean,
        labels,
        settings: vec![s],
    }
}

#[test]
fn self_transfer_identity() {
    let (data, clf) = unit_rings(200, 1);
    let calib = calibrate(&clf, &data, CalibrationMode::TargetFpr { rate: 0.05 }, 1, &mut RngStream::new(2, 0)).unwrap();
    let mut batch = rings_batch(&clf, 60, 3);
    let mut rng = RngStream::new(4, 0);
    let direct = evaluate_crafted(
        &clf,
        Some(&calib),
        &batch.labels,
        batch.settings[0].crafted.clone(),
        0.5,
        1,
        &mut rng,
    )
    .unwrap();
    batch.settings[0] = direct.clone();
    let t = transfer_eval(&batch, &clf, Some(&calib), 1, &mut rng).unwrap();
    let direct = summarize_setting(&direct);
    assert_eq!(t[0].transferred, direct.successes);
    assert!(direct.successes > 0);
    assert_eq!(t[0].metrics.victim_accuracy, Some(0.0));
    assert_eq!(t[0].metrics.tp_rate, direct.tp_rate);
}

#[test]
fn empty_transfer_is_na() {
    let (_, clf) = unit_rings(10, 1);
    let mut batch = rings_batch(&clf, 6, 5);
    batch.settings[0].success = vec![false; 6];
    let t = transfer_eval(&batch, &clf, None, 1, &mut RngStream::new(0, 0)).unwrap();
    assert_eq!(t[0].transferred, 0);
    assert_eq!(t[0].metrics.victim_accuracy, None);
    assert_eq!(t[0].metrics.success_rate, None);
}

#[test]
fn transfer_matches_cross_evaluation() {
    // Same rings with different noise share a decision boundary.
    let a = TwoRingsClassifier::new(TwoRingsSpec::default()).unwrap();
    let b = TwoRingsClassifier::new(TwoRingsSpec {
        noise_variance: 0.09,
        ..Default::default()
    })
    .unwrap();
    let mut rng = RngStream::new(6, 0);
    let clean = rng.uniform_tensor(vec![80, 2], -3.0, 3.0);
    let labels: Vec<usize> = (0..80).map(|i| (i / 3) % 2).collect();
    let crafted = rng.uniform_tensor(vec![80, 2], -3.0, 3.0);
    let s = evaluate_crafted(&a, None, &labels, crafted.clone(), 1.0, 1, &mut rng).unwrap();
    let batch = AdversarialBatch {
        source_model: "A".into(),
        attack: AttackConfig::new(AttackKind::Fgsm),
        seed: 6,
        clean,
        labels: labels.clone(),
        settings: vec![s.clone()],
    };
    let t = transfer_eval(&batch, &b, None, 1, &mut rng).unwrap();
    let on_b = predict(&b, &crafted, 1, &mut rng).unwrap().labels;
    let transferred: Vec<usize> = (0..80).filter(|&i| s.success[i]).collect();
    let fooled = transferred.iter().filter(|&&i| on_b[i] != labels[i]).count();
    assert_eq!(t[0].transferred, transferred.len());
    assert_eq!(t[0].metrics.successes, fooled);
    assert_eq!(fooled, transferred.len());
}

#[test]
fn transfer_rejects_dimension_mismatch() {
    let (_, clf) = unit_rings(10, 1);
    let mut batch = rings_batch(&clf, 4, 7);
    batch.clean = Tensor::zeros(vec![4, 3]);
    assert!(matches!(
        transfer_eval(&batch, &clf, None, 1, &mut RngStream::new(0, 0)),
        Err(Error::InvalidArgument(_))
    ));
}

fn config_json(extra: &str) -> String {
    format!(
        r#"{{
  "schema_version": 1,
  "dataset": {{"source": "two_rings", "n_per_class": 60, "test_per_class": 20}},
  "models": [
    {{"model": {{"kind": "deep_bayes", "factorization": "GBZ", "latent_dim": 2, "hidden": [8]}}}},
    {{"model": {{"kind": "deep_bayes", "factorization": "DFX", "latent_dim": 2, "hidden": [8]}}}},
    {{"model": {{"kind": "two_rings"}}}}
  ],
  "training": {{"epochs": 3, "batch_size": 20, "learning_rate": 0.01}},
  "attacks": [
    {{"attack": {{"kind": "fgsm"}}, "grid": [0.1, 0.3]}},
    {{"name": "pgd-short", "attack": {{"kind": "pgd", "iterations": 3}}, "grid": [0.2]}}
  ],
  "samples": 3,
  "attack_inputs": 12,
  "seed": 11{extra}
}}"#
    )
}

#[test]
fn config_validation() {
    let cfg = ExperimentConfig::from_json(&config_json("")).unwrap();
    assert_eq!(cfg.models.len(), 3);
    assert_eq!(cfg.detection, CalibrationMode::TargetFpr { rate: 0.05 });
    let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);

    let bad = |text: String| matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_)));
    assert!(bad(config_json("").replace("[0.1, 0.3]", "[0.3, 0.1]")));
    assert!(bad(config_json("").replace("[0.1, 0.3]", "[0.1, 0.1]")));
    assert!(bad(config_json("").replace("\"schema_version\": 1", "\"schema_version\": 2")));
    assert!(bad(config_json(", \"surprise\": true")));
    assert!(bad(config_json("").replace("\"seed\": 11", "\"samples_x\": 1")));
    assert!(bad(config_json("").replace("\"samples\": 3", "\"samples\": 0")));
    assert!(bad("{".into()));
}

#[test]
fn bottleneck_sweep_is_pure_config() {
    let models: Vec<String> = [16, 32, 64, 128]
        .iter()
        .map(|z| {
            format!(
                r#"{{"name": "GBZ-z{z}", "model": {{"kind": "deep_bayes", "factorization": "GBZ", "latent_dim": {z}}}}}"#
            )
        })
        .collect();
    let text = format!(
        r#"{{"schema_version": 1, "dataset": {{"source": "two_rings"}}, "models": [{}],
            "training": {{"epochs": 1}}, "seed": 0}}"#,
        models.join(",")
    );
    let cfg = ExperimentConfig::from_json(&text).unwrap();
    let dims: Vec<usize> = cfg
        .models
        .iter()
        .map(|m| match m.model {
            ModelSpec::DeepBayes { latent_dim, .. } => latent_dim,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(dims, vec![16, 32, 64, 128]);
}

#[test]
fn report_round_trip() {
    let rows = vec![
        ReportRow::new("GBZ", "fgsm", Some(0.1), "victim_accuracy", Some(0.25)),
        ReportRow::new("GBZ", "fgsm", Some(0.1), "tp_kl", None),
        ReportRow::new("GBZ->DFX", "none", None, "clean_accuracy", Some(1.0 / 3.0)),
    ];
    let text = report_csv(&rows).unwrap();
    assert!(text.starts_with("model,attack,setting,metric,value\n"));
    assert!(text.contains("GBZ,fgsm,0.1,tp_kl,NA"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_report(&path, &rows).unwrap();
    assert_eq!(read_report(&path).unwrap(), rows);
}

#[test]
fn cell_streams_are_stable_and_distinct() {
    let a = cell_rng(5, "attack/GBZ/fgsm").next_u64();
    assert_eq!(a, cell_rng(5, "attack/GBZ/fgsm").next_u64());
    assert_ne!(a, cell_rng(5, "attack/GBZ/pgd").next_u64());
    assert_ne!(a, cell_rng(6, "attack/GBZ/fgsm").next_u64());
}

#[test]
fn pipeline_is_deterministic_across_runs_and_threads() {
    let cfg = ExperimentConfig::from_json(&config_json(", \"transfer\": true")).unwrap();
    let base = tempfile::tempdir().unwrap();
    let run = |jobs: usize| {
        let out = tempfile::tempdir().unwrap();
        let outcome = run_pipeline(&cfg, base.path(), out.path(), jobs).unwrap();
        let report = std::fs::read(out.path().join("report.csv")).unwrap();
        let transfer = std::fs::read(out.path().join("transfer.csv")).unwrap();
        assert!(out.path().join("run.json").exists());
        assert!(out.path().join("models/GBZ.json").exists());
        assert!(out.path().join("batches/DFX__pgd-short.json").exists());
        (outcome, report, transfer)
    };
    let (outcome, r1, t1) = run(1);
    let (_, r2, t2) = run(4);
    assert_eq!(r1, r2);
    assert_eq!(t1, t2);

    let rows = &outcome.report;
    for r in rows {
        if let Some(v) = r.value {
            if r.metric.contains("rate") || r.metric.contains("accuracy") || r.metric.starts_with("tp_") {
                assert!((0.0..=1.0).contains(&v), "{r:?}");
            }
        }
    }
    // DFX has no density, so no marginal rows.
    assert!(rows.iter().any(|r| r.model == "GBZ" && r.metric == "tp_marginal"));
    assert!(!rows.iter().any(|r| r.model == "DFX" && r.metric == "tp_marginal"));
    assert!(rows.iter().any(|r| r.metric == "mean_min_perturbation"));
    // Victim accuracy and success rate sum to one in every cell.
    let mut pairs: BTreeMap<(String, String, String), (f64, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.setting.is_some()) {
        let key = (r.model.clone(), r.attack.clone(), format!("{:?}", r.setting));
        let e = pairs.entry(key).or_insert((f64::NAN, f64::NAN));
        match r.metric.as_str() {
            "victim_accuracy" => e.0 = r.value.unwrap(),
            "success_rate" => e.1 = r.value.unwrap(),
            _ => {}
        }
    }
    assert_eq!(pairs.len(), 3 * 3);
    for (k, (va, sr)) in pairs {
        assert_eq!(va + sr, 1.0, "{k:?}");
    }
}

#[test]
fn clean_only_pipeline_reports_clean_rows() {
    let cfg = ExperimentConfig::from_json(&config_json("").replace(
        r#""attacks": [
    {"attack": {"kind": "fgsm"}, "grid": [0.1, 0.3]},
    {"name": "pgd-short", "attack": {"kind": "pgd", "iterations": 3}, "grid": [0.2]}
  ],"#,
        "",
    ))
    .unwrap();
    assert!(cfg.attacks.is_empty());
    let out = tempfile::tempdir().unwrap();
    let outcome = run_pipeline(&cfg, out.path(), out.path(), 2).unwrap();
    assert!(outcome.report.iter().all(|r| r.attack == "none"));
    assert_eq!(outcome.report.iter().filter(|r| r.metric == "clean_accuracy").count(), 3);
}

proptest! {
    #[test]
    fn victim_accuracy_complements_success_rate(
        flags in prop::collection::vec(any::<(bool, bool)>(), 1..40)
    ) {
        let success: Vec<bool> = flags.iter().map(|f| f.0).collect();
        let accepted: Vec<bool> = flags.iter().map(|f| f.1).collect();
        let m = summarize_setting(&setting(&success, &[(DetectorKind::Kl, &accepted)]));
        prop_assert_eq!(m.victim_accuracy.unwrap() + m.success_rate.unwrap(), 1.0);
        let tp = m.tp_rate[&DetectorKind::Kl];
        prop_assert_eq!(tp.is_none(), m.successes == 0);
        if let Some(tp) = tp {
            prop_assert!((0.0..=1.0).contains(&tp));
        }
    }
}

#[test]
fn sampling_aware_cells_need_a_latent_density() {
    use deepbayes_core::attacks::{SubstituteConfig, ThreatMode};
    use deepbayes_core::harness::{cell_applies, AttackEntry};
    use deepbayes_core::lvm::{DeepBayesModel, Factorization, ModelConfig, StoredModel};

    let build = |f| {
        let m = DeepBayesModel::build(ModelConfig::new(f, 2, 2), &mut RngStream::new(0, 0)).unwrap();
        StoredModel::DeepBayes(m)
    };
    let gbz = build(Factorization::GBZ);
    let dfx = build(Factorization::DFX);
    let rings = StoredModel::TwoRings(TwoRingsClassifier::new(TwoRingsSpec::default()).unwrap());
    let entry = |lambda: f64, detector: Option<DetectorKind>| {
        let mut attack = AttackConfig::new(AttackKind::Wbs);
        attack.lambda_detect = lambda;
        attack.detector = detector;
        AttackEntry { name: None, attack, grid: vec![], substitute: None }
    };
    let logit = entry(1.0, Some(DetectorKind::Logit));
    let kl = entry(1.0, Some(DetectorKind::Kl));
    let plain = entry(0.0, None);
    assert!(cell_applies(&gbz, &logit) && cell_applies(&gbz, &kl));
    assert!(!cell_applies(&dfx, &logit) && cell_applies(&dfx, &kl) && cell_applies(&dfx, &plain));
    assert!(!cell_applies(&rings, &plain));

    let mut sub = AttackEntry {
        name: None,
        attack: AttackConfig::new(AttackKind::Pgd),
        grid: vec![],
        substitute: Some(SubstituteConfig::new(ThreatMode::Grey)),
    };
    assert!(cell_applies(&rings, &sub));
    sub.attack.kind = AttackKind::Wbs;
    assert!(!cell_applies(&gbz, &sub));
}

#[test]
fn pipeline_skips_inapplicable_cells() {
    use deepbayes_core::harness::{load_data, run_experiment, AttackEntry};

    let mut cfg = ExperimentConfig::from_json(&config_json("")).unwrap();
    let mut attack = AttackConfig::new(AttackKind::Wbs);
    attack.iterations = Some(2);
    attack.lambda_detect = 1.0;
    attack.detector = Some(DetectorKind::Logit);
    cfg.attacks = vec![AttackEntry { name: None, attack, grid: vec![0.1], substitute: None }];
    let data = load_data(&cfg, std::path::Path::new(".")).unwrap();
    let out = run_experiment(&cfg, &data).unwrap();
    let sources: Vec<&str> = out.batches.iter().map(|(m, _, _)| m.as_str()).collect();
    assert_eq!(sources, vec!["GBZ"]);
}
