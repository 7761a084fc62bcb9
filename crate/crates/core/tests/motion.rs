use charctl_core::motion::{
    from_json, generate_synthetic_dataset, load_dataset, sample_clip, sample_transition, save_dataset, to_json,
    CaptionedClip, DataError, Dataset, DatasetConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seconds: f64) -> DatasetConfig {
    DatasetConfig {
        clips_per_skill: 1,
        seconds,
        ..Default::default()
    }
}

fn within_3_sigma(counts: &[usize], draws: usize) {
    let p = 1.0 / counts.len() as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "bucket {i}: {c} vs {mean} ± {sigma}");
    }
}

#[test]
fn clips_are_sampled_uniformly() {
    let d = generate_synthetic_dataset(&DatasetConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = vec![0; d.len()];
    let draws = 16_000;
    for _ in 0..draws {
        let c = sample_clip(&d, &mut rng).unwrap();
        counts[d.clips.iter().position(|x| x.id == c.id).unwrap()] += 1;
    }
    within_3_sigma(&counts, draws);
}

#[test]
fn transition_start_frames_are_uniform() {
    // Frames are distinct along a walk clip's arm swing, so a pair identifies its index.
    let d = generate_synthetic_dataset(&small(1.0), 0).unwrap();
    let clip = d.clip("walk_0").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = vec![0; clip.len() - 1];
    let draws = 10_000;
    for _ in 0..draws {
        let (a, b) = sample_transition(clip, &mut rng).unwrap();
        let t = clip.frames.windows(2).position(|w| w[0] == a && w[1] == b).unwrap();
        counts[t] += 1;
    }
    within_3_sigma(&counts, draws);
}

#[test]
fn generator_is_pure() {
    let a = generate_synthetic_dataset(&small(2.0), 5).unwrap();
    let b = generate_synthetic_dataset(&small(2.0), 5).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic_dataset(&small(2.0), 6).unwrap();
    assert_ne!(a, c);
}

#[test]
fn file_round_trip() {
    let d = generate_synthetic_dataset(&small(1.5), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.json");
    save_dataset(&d, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), d);
}

fn with_captions(n: usize) -> Result<Dataset, DataError> {
    let mut clip: CaptionedClip = generate_synthetic_dataset(&small(1.0), 0).unwrap().clips[0].clone();
    clip.captions = (0..n).map(|i| format!("walk number {i}")).collect();
    Dataset::new(vec![clip])
}

#[test]
fn caption_count_is_bounded() {
    assert!(matches!(with_captions(0), Err(DataError::CaptionCount { count: 0, .. })));
    for n in 1..=4 {
        assert!(with_captions(n).is_ok());
    }
    assert!(matches!(with_captions(5), Err(DataError::CaptionCount { count: 5, .. })));
}

#[test]
fn short_full_clip_is_rejected() {
    let mut clip = generate_synthetic_dataset(&small(1.0), 0).unwrap().clips[0].clone();
    clip.frames.truncate(29);
    assert!(Dataset::new(vec![clip.clone()]).is_err());
    clip.subsequence = true;
    assert!(Dataset::new(vec![clip]).is_ok());
}

#[test]
fn duplicate_ids_are_rejected() {
    let d = generate_synthetic_dataset(&small(1.0), 0).unwrap();
    assert!(Dataset::new(vec![d.clips[0].clone(), d.clips[0].clone()]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transitions_are_consecutive_frames(seed in 0u64..10_000) {
        let d = generate_synthetic_dataset(&small(1.0), seed % 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let clip = sample_clip(&d, &mut rng).unwrap();
            let (a, b) = sample_transition(clip, &mut rng).unwrap();
            prop_assert!(clip.frames.windows(2).any(|w| w[0] == a && w[1] == b));
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact(seed in 0u64..1000, seconds in 1.0f64..2.0) {
        let d = generate_synthetic_dataset(&small(seconds), seed).unwrap();
        let text = to_json(&d);
        let back = from_json(&text).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(to_json(&back), text);
    }
}
