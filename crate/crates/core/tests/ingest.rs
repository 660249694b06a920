use std::path::{Path, PathBuf};

use cgp_core::data::{aggregate_regions, load_dataset, IngestConfig};
use cgp_core::Error;
use proptest::prelude::*;

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn load_golden() -> cgp_core::data::Dataset {
    let dir = golden();
    load_dataset(
        &dir.join("features.csv"),
        &dir.join("fatalities.csv"),
        &dir.join("policies.csv"),
        &IngestConfig::default(),
    )
    .unwrap()
}

#[test]
fn golden_dataset_matches_reference_dump() {
    let ds = load_golden();
    let expected = std::fs::read_to_string(golden().join("expected.txt")).unwrap();
    assert_eq!(ds.to_canonical_text(), expected);
    assert!(ds.warnings.iter().any(|w| w.contains("feature_3")));
    assert!(ds.warnings.iter().any(|w| w.starts_with("A: repaired 1")));
}

#[test]
fn golden_load_is_deterministic() {
    assert_eq!(load_golden(), load_golden());
}

#[test]
fn aggregation_of_golden_children() {
    let ds = load_golden();
    let kids: Vec<_> = ds
        .regions
        .iter()
        .filter(|r| r.parent_country.as_deref() == Some("X"))
        .cloned()
        .collect();
    let agg = aggregate_regions(&kids, "X").unwrap();
    // B starts 03-02, A starts 03-03; both end 03-08
    assert_eq!(agg.fatalities, vec![3.0, 5.0, 8.0, 11.0, 17.0, 20.0, 27.0]);
    let mixed = [ds.regions[0].clone(), ds.regions[2].clone()];
    assert!(matches!(
        aggregate_regions(&mixed, "X"),
        Err(Error::Alignment(_))
    ));
}

#[test]
fn short_outbreaks_are_dropped_with_reason() {
    let dir = golden();
    let ds = load_dataset(
        &dir.join("features.csv"),
        &dir.join("fatalities.csv"),
        &dir.join("policies.csv"),
        &IngestConfig {
            outbreak_threshold: 1.0,
            min_days: 6,
        },
    )
    .unwrap();
    let ids: Vec<&str> = ds.regions.iter().map(|r| r.region_id.as_str()).collect();
    assert_eq!(ids, ["A", "B"]);
    assert_eq!(ds.dropped.len(), 1);
    assert_eq!(ds.dropped[0].region_id, "C");
    assert!(ds
        .to_canonical_text()
        .contains("dropped C only 5 days after outbreak onset"));
}

fn record(id: &str, start_offset: i64, deaths: Vec<f64>) -> cgp_core::data::RegionRecord {
    let start =
        chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap() + chrono::Duration::days(start_offset);
    let n = deaths.len();
    let policy = cgp_core::data::PolicyTimeline {
        start_date: start,
        values: vec![vec![0.0]; n],
        stringency: None,
    };
    cgp_core::data::RegionRecord {
        region_id: id.into(),
        parent_country: Some("P".into()),
        population: 1e6,
        features: vec![0.0],
        imputed: vec![false],
        start_date: start,
        fatalities: deaths,
        scheduled_policy: cgp_core::data::PolicyTimeline {
            start_date: start,
            values: vec![],
            stringency: None,
        },
        policy,
        repairs: 0,
    }
}

proptest! {
    #[test]
    fn national_total_is_sum_of_children(
        incs in prop::collection::vec(prop::collection::vec(0u32..50, 1..30), 1..5),
        tail in 0usize..20,
    ) {
        // every child ends on the same date; start offsets follow from lengths
        let longest = incs.iter().map(Vec::len).max().unwrap() + tail;
        let kids: Vec<_> = incs
            .iter()
            .enumerate()
            .map(|(i, inc)| {
                let mut acc = 0.0;
                let d: Vec<f64> = inc.iter().map(|v| { acc += *v as f64; acc }).collect();
                record(&format!("c{i}"), (longest - d.len()) as i64, d)
            })
            .collect();
        let agg = aggregate_regions(&kids, "P").unwrap();
        for (k, total) in agg.fatalities.iter().enumerate() {
            let date = agg.start_date + chrono::Duration::days(k as i64);
            let sum: f64 = kids
                .iter()
                .filter(|c| c.start_date <= date)
                .map(|c| c.fatalities[(date - c.start_date).num_days() as usize])
                .sum();
            prop_assert_eq!(*total, sum);
        }
    }
}
