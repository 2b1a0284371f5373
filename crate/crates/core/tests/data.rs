use fusion_core::data::{
    generate_dataset, load_dataset, parse_caption, save_dataset, GroundTruth, SceneSpec,
};
use fusion_core::Error;
use proptest::prelude::*;

/// Upper 1% point of the chi-squared distribution with 4 degrees of freedom.
const CHI2_4DOF_P01: f64 = 13.2767;

#[test]
fn count_histogram_is_uniform() {
    let spec = SceneSpec::for_canvas(32, 8);
    let data = generate_dataset(&spec, 10_000, 1234).unwrap();
    let mut hist = [0usize; 5];
    for rec in &data {
        hist[rec.truth.count() - 1] += 1;
    }
    let expected = data.len() as f64 / 5.0;
    let chi2: f64 = hist
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < CHI2_4DOF_P01, "chi2 = {chi2}, histogram {hist:?}");
}

#[test]
fn file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shapes.bin");
    let spec = SceneSpec::for_canvas(16, 8);
    let data = generate_dataset(&spec, 12, 9).unwrap();
    save_dataset(&path, &spec, &data).unwrap();
    let (spec2, data2) = load_dataset(&path).unwrap();
    assert_eq!(spec, spec2);
    assert_eq!(data, data2);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Format { .. })));
}

fn consistent(truth: &GroundTruth, caption: &str) -> bool {
    let Ok((count, color, shape)) = parse_caption(caption) else {
        return false;
    };
    truth.count() == count && truth.count_of(shape, color) == count
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn every_record_caption_matches_its_ground_truth(seed in any::<u64>(), canvas in 16usize..40) {
        let spec = SceneSpec::for_canvas(canvas, 8);
        let data = generate_dataset(&spec, 250, seed).unwrap();
        for rec in &data {
            let caption = rec.caption().unwrap();
            prop_assert!(consistent(&rec.truth, &caption), "{caption:?} vs {:?}", rec.truth);
        }
    }
}
