mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regerr_net::data::MemorySource;
use regerr_net::eval::*;
use regerr_net::{ErrorNet, ModelConfig, NetError};

fn env() -> Environment {
    Environment::detect(1, true)
}

fn score(record: &str, patient: &str, mae: f64) -> PatchScore {
    PatchScore { record: record.into(), patient_id: patient.into(), mae }
}

#[test]
fn patch_mae_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f: Vec<f32> = (0..1000).map(|_| rng.random_range(0.0..8.0)).collect();
    let g: Vec<f32> = (0..1000).map(|_| rng.random_range(0.0..8.0)).collect();
    let phi: Vec<f32> = (0..1000).map(|_| rng.random_range(0.0..8.0)).collect();
    assert_eq!(patch_mae(&f, &f).unwrap(), 0.0);
    let offset: Vec<f32> = f.iter().map(|v| v + 0.5).collect();
    assert!((patch_mae(&offset, &f).unwrap() - 0.5).abs() < 1e-5);
    let mut naive = 0.0f64;
    for i in 0..phi.len() {
        naive += (phi[i] as f64 - f[i] as f64).abs();
    }
    naive /= phi.len() as f64;
    assert!((patch_mae(&phi, &f).unwrap() - naive).abs() < 1e-9);
    assert_eq!(patch_mae(&phi, &f).unwrap(), patch_mae(&f, &phi).unwrap());
    assert!(patch_mae(&phi, &f).unwrap() <= patch_mae(&phi, &g).unwrap() + patch_mae(&g, &f).unwrap());
    assert!(matches!(patch_mae(&phi[..3], &f), Err(NetError::Shape(_))));
}

#[test]
fn single_subject_population_std() {
    let r = EvalReport::from_scores("x".into(), vec![score("a", "p1", 0.2), score("b", "p1", 0.4)], 0.0, env()).unwrap();
    let s = &r.per_subject[0];
    assert!((s.mean - 0.3).abs() < 1e-12 && (s.std - 0.1).abs() < 1e-12);
    assert!((r.cohort_patch.mean - 0.3).abs() < 1e-12);
}

#[test]
fn table_two_rows_aggregate_to_its_mean_row() {
    // Case-by-case rows of the published table; the bold mean row reads 0.56 ± 0.10.
    let rows = [
        (0.27, 0.03), (0.45, 0.07), (0.62, 0.09), (0.62, 0.12), (0.59, 0.23), (0.71, 0.05), (0.65, 0.10), (0.64, 0.08),
        (0.76, 0.09), (0.27, 0.04), (0.78, 0.03), (0.76, 0.07), (0.34, 0.14), (0.63, 0.18), (0.33, 0.11), (0.50, 0.06),
        (0.76, 0.11), (0.39, 0.21), (0.91, 0.11), (0.43, 0.05), (0.19, 0.06), (0.81, 0.21),
    ];
    // Two patches at mean ± std reproduce each row exactly under the population convention.
    let mut scores = Vec::new();
    for (i, (m, s)) in rows.iter().enumerate() {
        let p = format!("{:02}", i + 1);
        scores.push(score(&format!("{p}a"), &p, m - s));
        scores.push(score(&format!("{p}b"), &p, m + s));
    }
    let r = EvalReport::from_scores("table".into(), scores, 0.0, env()).unwrap();
    assert_eq!(r.per_subject.len(), 22);
    assert_eq!(format!("{:.2} ± {:.2}", r.cohort_subject.mean, r.cohort_subject.std), "0.56 ± 0.10");
    let md = render_markdown(&r).unwrap();
    let table_rows = md.lines().filter(|l| l.starts_with("| ") && l.contains('±')).count();
    assert_eq!(table_rows, 22 + 1 + 1, "22 subjects, the mean row, the summary row");
    assert!(md.contains("| **Mean** |"));
}

#[test]
fn cohort_aggregates_recompute_from_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<PatchScore> = (0..40).map(|i| score(&i.to_string(), &format!("s{}", i % 7), rng.random_range(0.0..2.0))).collect();
    let r = EvalReport::from_scores("x".into(), scores, 0.0, env()).unwrap();
    let v: Vec<f64> = r.per_patch.iter().map(|p| p.mae).collect();
    let mean = v.iter().sum::<f64>() / 40.0;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 40.0).sqrt();
    assert!((r.cohort_patch.mean - mean).abs() < 1e-9 && (r.cohort_patch.std - std).abs() < 1e-9);
    assert_eq!(r.per_subject.len(), 7);
    assert_eq!(r.per_subject.iter().map(|s| s.patches).sum::<usize>(), 40);
}

#[test]
fn report_files() {
    let dir = tempfile::tempdir().unwrap();
    let r = EvalReport::from_scores("x".into(), vec![score("a", "p1", 0.2), score("b", "p2", 0.4)], 0.5, env()).unwrap();
    let p = dir.path().join("r.json");
    emit_report(&r, &p, ReportFormat::Json).unwrap();
    assert_eq!(read_report(&p).unwrap(), r);
    emit_report(&r, &dir.path().join("r.csv"), ReportFormat::Csv).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 2 + 3);
    let mut empty = r.clone();
    empty.per_subject.clear();
    assert!(emit_report(&empty, &dir.path().join("e.md"), ReportFormat::Markdown).is_err());
    assert!(!dir.path().join("e.md").exists());
}

#[test]
fn ground_truth_predictor_scores_zero_and_constant_baseline_does_not() {
    let recs = common::synthetic_patches(2, 2, 16, 3);
    let src = MemorySource(recs);
    let r = evaluate(&GroundTruth, &src, 1, true).unwrap();
    assert!(r.per_patch.iter().all(|p| p.mae == 0.0));
    assert_eq!((r.cohort_patch.mean, r.cohort_patch.std, r.cohort_subject.mean), (0.0, 0.0, 0.0));
    let c = ConstantPredictor::mean_of(&src).unwrap();
    assert!(evaluate(&c, &src, 2, true).unwrap().cohort_patch.mean > 0.0);
    assert!(matches!(evaluate(&GroundTruth, &MemorySource(vec![]), 1, true), Err(NetError::EmptySplit(_))));
}

#[test]
fn parallel_evaluation_matches_serial() {
    let src = MemorySource(common::synthetic_patches(3, 2, 16, 4));
    let c = ConstantPredictor(1.5);
    let a = evaluate(&c, &src, 1, true).unwrap();
    let b = evaluate(&c, &src, 3, true).unwrap();
    assert_eq!(a.per_patch, b.per_patch);
}

#[test]
fn runtime_is_positive_and_stable() {
    let net = ErrorNet::new(ModelConfig::toy()).unwrap();
    let p = net.init_params(0);
    assert!(measure_runtime(&net, &p, 1, 0).unwrap() > 0.0);
    let a = measure_runtime(&net, &p, 20, 2).unwrap();
    let b = measure_runtime(&net, &p, 40, 2).unwrap();
    assert!((a - b).abs() / a.min(b) < 0.25, "{a} vs {b}");
}
