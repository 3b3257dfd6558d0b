//! The shipped synthetic dumps must stay in step with the generator and the
//! classifier.

use std::path::PathBuf;

use qkscope_core::{
    classify_default, full_map, generate, read_dump, GenRegime, GenSpec, QkSeries, Regime,
    RopeConfig, TensorKind,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn load(stem: &str) -> QkSeries {
    let q = read_dump(fixture(&format!("{stem}.queries.tqkd"))).unwrap();
    let k = read_dump(fixture(&format!("{stem}.keys.tqkd"))).unwrap();
    assert_eq!(q.kind(), TensorKind::Queries);
    assert_eq!(k.kind(), TensorKind::Keys);
    let base = q
        .metadata
        .as_ref()
        .and_then(|m| m.rope_base)
        .expect("sidecar carries the rope base");
    let cfg = RopeConfig::new(base, q.head_dim()).unwrap();
    QkSeries::new(
        q.slice_head(0, 0).unwrap(),
        k.slice_head(0, 0).unwrap(),
        cfg,
    )
    .unwrap()
}

fn assert_matches_generator(stored: &QkSeries, spec: &GenSpec) {
    let fresh = generate(spec).unwrap();
    assert_eq!(stored.len(), fresh.len());
    for (a, b) in [
        (stored.queries(), fresh.queries()),
        (stored.keys(), fresh.keys()),
    ] {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
}

#[test]
fn periodic_fixture_is_reproducible_and_periodic() {
    let series = load("periodic_m2");
    let mut spec =
        GenSpec::new(GenRegime::Periodic, RopeConfig::new(1e6, 128).unwrap()).with_seed(7);
    spec.dominant_channel = Some(2);
    assert_matches_generator(&series, &spec);

    let report = classify_default(&series, &full_map(&series)).unwrap();
    assert_eq!(report.regime, Regime::PeriodicSequential);
    assert_eq!(report.dominant_channel, Some(2));
    let period = report.period.unwrap();
    let error = (period.measured.unwrap() - period.predicted.unwrap()).abs();
    assert!(error <= 1.0, "period error {error}");
}

#[test]
fn reaccess_fixture_is_reproducible_and_reaccess() {
    let series = load("reaccess");
    let spec = GenSpec::new(GenRegime::Reaccess, RopeConfig::new(1e6, 128).unwrap()).with_seed(7);
    assert_matches_generator(&series, &spec);

    let report = classify_default(&series, &full_map(&series)).unwrap();
    assert_eq!(report.regime, Regime::Reaccess);
}
