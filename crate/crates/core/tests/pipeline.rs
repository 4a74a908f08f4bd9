use dora_core::data::synthetic::{gen_synthetic_clip, SyntheticConfig};
use dora_core::data::VideoSource;
use dora_core::encoder::encode;
use dora_core::trainer::{derive_seed, load_checkpoint, run, save_checkpoint, Dataset, TrainConfig, TrainState};
use dora_core::tracker::track_clip;
use dora_core::DoraError;
use proptest::prelude::*;

fn small() -> TrainConfig {
    TrainConfig::default()
        .with_overrides(&[
            "image_size=32",
            "base_crop=32",
            "local_size=16",
            "dim=12",
            "depth=2",
            "heads=3",
            "out_dim=16",
            "objects=2",
            "frames=2",
            "local_views=2",
            "batch_clips=1",
            "warmup_steps=1",
            "total_steps=4",
        ])
        .unwrap()
}

fn dataset(clips: u64) -> Dataset {
    let videos = (0..clips)
        .map(|i| {
            let clip = gen_synthetic_clip(&SyntheticConfig::new(2, 32, 2), 40 + i).unwrap();
            VideoSource::in_memory(clip.frames, vec![]).unwrap()
        })
        .collect();
    Dataset::from_videos(videos).unwrap()
}

#[test]
fn single_and_double_precision_encoders_agree() {
    let cfg = small();
    let state = TrainState::init(&cfg).unwrap();
    let wide = state.student.cast::<f64>();
    let frame = gen_synthetic_clip(&SyntheticConfig::new(2, 32, 1), 3).unwrap().frames.remove(0);
    let a = encode(&cfg.encoder(), &state.student.encoder, &frame).unwrap();
    let b = encode(&cfg.encoder(), &wide.encoder, &frame).unwrap();
    for (x, y) in a.cls().iter().zip(b.cls()) {
        assert!((*x as f64 - y).abs() < 1e-4, "{x} vs {y}");
    }
}

#[test]
fn split_run_matches_uninterrupted_run() {
    let cfg = small();
    let data = dataset(2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());

    let mut whole = TrainState::init(&cfg).unwrap();
    run(&cfg, &mut whole, &data, a.path(), None, |_| {}).unwrap();

    let mut first = TrainState::init(&cfg).unwrap();
    run(&cfg, &mut first, &data, b.path(), Some(2), |_| {}).unwrap();
    let (cfg2, mut resumed) = load_checkpoint(&b.path().join("checkpoint.dora")).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(resumed, first);
    run(&cfg2, &mut resumed, &data, b.path(), None, |_| {}).unwrap();

    assert_eq!(resumed, whole);
    let csv = |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join("metrics.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(csv(&a).lines().count(), 5);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let cfg = small();
    let state = TrainState::init(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dora");
    save_checkpoint(&path, &cfg, &state).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(DoraError::Corrupt { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tracked_maps_are_distributions(seed in 0u64..10_000) {
        let cfg = small();
        let state = TrainState::init(&cfg).unwrap();
        let clip = gen_synthetic_clip(&SyntheticConfig::new(2, 32, 3), seed).unwrap();
        let tracks = track_clip(
            &cfg.encoder(),
            &state.teacher.encoder,
            &clip.frames,
            cfg.objects,
            derive_seed(seed, "heads", 0),
            &cfg.sinkhorn(),
        )
        .unwrap();
        prop_assert_eq!(tracks.refined.len(), 3);
        for map in tracks.refined.iter().chain(&tracks.raw) {
            for i in 0..map.k() {
                let row = map.weights.row(i);
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
}
