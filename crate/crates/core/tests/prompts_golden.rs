//! Byte-for-byte prompt fixtures. Set `UPDATE_GOLDEN=1` to rewrite them.

use std::collections::HashMap;
use std::path::PathBuf;

use saerad::data::{Manifest, ManifestEntry};
use saerad::interp::{
    build_describe_prompt, build_report_prompt, ActiveFeature, ActiveFeatureSet, FeatureRecord,
    PriorReport,
};

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert!(expected == actual, "{name} differs from golden file:\n{actual}");
}

fn manifest() -> Manifest {
    Manifest::from_entries([
        ManifestEntry {
            id: 11,
            report: "Moderate cardiomegaly. Tortuous thoracic aorta.".into(),
        },
        ManifestEntry {
            id: 42,
            report: "Enlarged cardiac silhouette with aortic calcification.".into(),
        },
    ])
}

#[test]
fn describe_prompt_two_reports() {
    let record = FeatureRecord {
        index: 3,
        top_examples: vec![(42, 2.5), (11, 1.25)],
        description: None,
        raw_describer_output: None,
    };
    check("describe_two_reports.txt", &build_describe_prompt(&record, &manifest()).unwrap());
}

fn two_features() -> (ActiveFeatureSet, HashMap<usize, String>) {
    let set = ActiveFeatureSet {
        example_id: Some(7),
        entries: vec![
            ActiveFeature {
                feature: 5,
                activation: 3.0,
                importance: 1.0,
            },
            ActiveFeature {
                feature: 2,
                activation: 1.0,
                importance: 1.0 / 3.0,
            },
        ],
    };
    let descriptions = HashMap::from([
        (5, "This feature represents a left-sided pleural effusion.".to_string()),
        (2, "This feature represents sternotomy wires.".to_string()),
    ]);
    (set, descriptions)
}

#[test]
fn report_prompt_two_features_no_priors() {
    let (set, descriptions) = two_features();
    check(
        "report_two_features.txt",
        &build_report_prompt(&set, &descriptions, None, &[]).unwrap(),
    );
}

#[test]
fn report_prompt_with_priors_and_indication() {
    let (set, descriptions) = two_features();
    let priors = [
        PriorReport {
            text: "IMPRESSION: No acute cardiopulmonary process.".into(),
            age_minutes: Some(2 * 24 * 60 + 16 * 60 + 28),
        },
        PriorReport {
            text: "IMPRESSION: Small left effusion.".into(),
            age_minutes: None,
        },
    ];
    check(
        "report_priors_indication.txt",
        &build_report_prompt(&set, &descriptions, Some("Status post CABG."), &priors).unwrap(),
    );
}

#[test]
fn report_prompt_no_features() {
    check(
        "report_no_features.txt",
        &build_report_prompt(&ActiveFeatureSet::default(), &HashMap::new(), None, &[]).unwrap(),
    );
}
