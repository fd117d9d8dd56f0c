use std::fs;

use egiinet_core::geometry::nn_brute;
use egiinet_core::synth::MANIFEST_FILE;
use egiinet_core::train::{load_split, EvalTable};
use egiinet_core::visualize::attention_heatmap;
use egiinet_core::{build_dataset, evaluate, Manifest, MetricReport, Model, RunConfig, Split, Variant};

#[test]
fn empty_dataset_has_only_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(dir.path(), 0, 0, &RunConfig::small().data, 1).unwrap();
    assert!(m.records.is_empty());
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![MANIFEST_FILE]);
    assert_eq!(fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap().lines().count(), 1);
}

#[test]
fn rebuilding_is_byte_identical_and_every_path_loads() {
    let cfg = RunConfig::small().data;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(a.path(), 7, 3, &cfg, 42).unwrap();
    build_dataset(b.path(), 7, 3, &cfg, 42).unwrap();
    let manifest = Manifest::load(a.path()).unwrap();
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    for r in &manifest.records {
        for p in [&r.complete, &r.partial, &r.view] {
            assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
        }
        let s = manifest.load_sample(r).unwrap();
        assert_eq!(s.complete.len(), cfg.complete_points);
        assert_eq!(s.partial.len(), cfg.partial_points);
        assert_eq!((s.view.height(), s.view.width()), (cfg.image_height, cfg.image_width));
        assert!(s.partial.points().iter().all(|p| s.complete.points().contains(p)));
    }
    assert_eq!(manifest.split(Split::Train).count(), 7);
    assert_eq!(manifest.split(Split::Val).count(), 3);
}

#[test]
fn evaluation_matches_oracles() {
    let cfg = RunConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(dir.path(), 0, 10, &cfg.data, 3).unwrap();
    let samples = load_split(&manifest, Split::Val).unwrap();

    // ground truth against itself
    let perfect: Vec<_> = samples
        .iter()
        .map(|s| (s.family, MetricReport::compute(&s.complete, &s.complete, 0.001).unwrap()))
        .collect();
    for row in EvalTable::from_reports(Variant::Full, &perfect).rows {
        assert_eq!(row.cd_l2_x1000, 0.0);
        assert_eq!(row.fscore, 1.0);
    }

    let model = Model::from_run_config(&cfg).unwrap();
    let table = evaluate(&model, &samples, 0.001).unwrap();
    assert_eq!(EvalTable::parse_csv(&table.to_csv()).unwrap(), table);
    for s in &samples {
        let out = model.predict(&s.partial, &s.view).unwrap().cloud;
        let report = MetricReport::compute(&out, &s.complete, 0.001).unwrap();
        let (ab, ba) = nn_brute(&out, &s.complete).unwrap();
        let msq = |v: &[f64]| v.iter().map(|d| d * d).sum::<f64>() / v.len() as f64;
        let cd2 = msq(&ab) + msq(&ba);
        assert!((report.cd_l2 - cd2).abs() < 1e-9);
        let p = ab.iter().filter(|&&d| d * d < 0.001).count() as f64 / ab.len() as f64;
        let r = ba.iter().filter(|&&d| d * d < 0.001).count() as f64 / ba.len() as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        assert!((report.fscore - f).abs() < 1e-12);
    }
}

#[test]
fn heatmap_accounts_for_every_query() {
    let cfg = RunConfig::small();
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(dir.path(), 0, 2, &cfg.data, 5).unwrap();
    let model = Model::from_run_config(&cfg).unwrap();
    for r in &manifest.records {
        let s = manifest.load_sample(r).unwrap();
        let map = attention_heatmap(&model, &s.partial, &s.view).unwrap();
        assert_eq!((map.height, map.width), (32, 32));
        assert_eq!(map.token_mass.len(), cfg.model.image_tokens());
        assert!((map.total_mass() - cfg.model.tokens as f64).abs() < 1e-4);
        assert!(map.heat.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.overlay.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let blind = Model::new(&cfg.model, Variant::NoImage, cfg.alpha, 0).unwrap();
    let s = manifest.load_sample(&manifest.records[0]).unwrap();
    assert!(attention_heatmap(&blind, &s.partial, &s.view).is_err());
}
