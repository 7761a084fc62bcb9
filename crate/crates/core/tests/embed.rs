use charctl_core::embed::{
    embedding_loss_graph, featurize_text, loss_align, loss_recon, slerp, BatchItem, EmbedConfig, EmbeddingModel,
    SkillLatent, TEXT_DIM,
};
use charctl_core::motion::{generate_synthetic_dataset, Dataset, DatasetConfig, Pose};
use charctl_core::nn::{value_and_grad, Graph};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data() -> Dataset {
    generate_synthetic_dataset(
        &DatasetConfig {
            clips_per_skill: 1,
            seconds: 1.0,
            ..Default::default()
        },
        0,
    )
    .unwrap()
}

fn small_cfg() -> EmbedConfig {
    EmbedConfig {
        d_model: 8,
        d_z: 4,
        ffn: 8,
        text_hidden: 8,
        n_max: 300,
        ..Default::default()
    }
}

fn model(seed: u64) -> EmbeddingModel {
    EmbeddingModel::new(small_cfg(), &data(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn pose() -> impl Strategy<Value = Pose> {
    (0.3f64..1.2, -4.0f64..4.0, -1.0f64..1.0, -3.0f64..3.0, -1.0f64..1.0, -1.0f64..1.0, -3.0f64..3.0).prop_map(
        |(h, v_fwd, v_lat, omega, h_rate, arm, arm_rate)| Pose {
            h,
            v_fwd,
            v_lat,
            omega,
            h_rate,
            arm,
            arm_rate,
        },
    )
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// FNV-1a written out from its definition, as an oracle for the frozen featurizer.
fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(14695981039346656037u64, |h, &b| (h ^ b as u64).wrapping_mul(1099511628211))
}

#[test]
fn featurizer_matches_hash_oracle() {
    let caption = "Sprint forward, swinging ARMS";
    let grams = ["sprint", "forward", "swinging", "arms", "sprint forward", "forward swinging", "swinging arms"];
    let mut counts = vec![0i64; TEXT_DIM];
    for g in grams {
        let h = fnv(g.as_bytes());
        counts[(h % TEXT_DIM as u64) as usize] += if h >> 63 == 0 { 1 } else { -1 };
    }
    let n = (counts.iter().map(|c| c * c).sum::<i64>() as f64).sqrt();
    let want: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let got = featurize_text(caption).unwrap();
    assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), want.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(featurize_text(caption).unwrap(), got);
}

#[test]
fn decoder_emits_requested_frame_count() {
    let m = model(0);
    let z = SkillLatent::new(vec![1.0, 0.5, -0.2, 0.1]).unwrap();
    for n in [2, 30, 300] {
        assert_eq!(m.decode_motion(&z, n).unwrap().len(), n);
    }
    assert!(m.decode_motion(&z, 1).is_err());
    assert!(m.decode_motion(&z, 301).is_err());
}

#[test]
fn zero_text_head_returns_normalized_bias() {
    let mut m = model(1);
    for name in ["text.l0.w", "text.l0.b", "text.l1.w"] {
        m.params.get_mut(name).unwrap().fill(0.0);
    }
    let b = [3.0f32, -4.0, 0.0, 12.0];
    m.params.get_mut("text.l1.b").unwrap().copy_from_slice(&b);
    let z = m.encode_text("anything at all").unwrap();
    let want = [3.0 / 13.0, -4.0 / 13.0, 0.0, 12.0 / 13.0];
    for (a, w) in z.as_slice().iter().zip(want) {
        assert!((a - w).abs() < 1e-7, "{a} vs {w}");
    }
}

#[test]
fn uncaptioned_items_do_not_touch_the_text_head() {
    let m = model(2);
    let d = data();
    let p = m.params.cast::<f64>();
    let grads = |batch: &[BatchItem]| {
        value_and_grad(&p, |g, pv| Ok(embedding_loss_graph(&m, g, pv, batch).unwrap().0)).unwrap().1
    };
    let sub = BatchItem {
        frames: d.clips[3].frames[..12].to_vec(),
        caption: None,
    };
    let only_sub = grads(std::slice::from_ref(&sub));
    for name in ["text.l0.w", "text.l0.b", "text.l1.w", "text.l1.b"] {
        assert!(only_sub.get(name).unwrap().iter().all(|&x| x == 0.0), "{name}");
    }
    // The text-head gradient of a captioned item is unchanged by the
    // subsequence beyond the 1/|batch| averaging of the reconstruction term.
    let captioned = BatchItem {
        frames: d.clips[0].frames.clone(),
        caption: Some(d.clips[0].captions[0].clone()),
    };
    let alone = grads(std::slice::from_ref(&captioned));
    let mixed = grads(&[captioned, sub]);
    for name in ["text.l0.w", "text.l1.b"] {
        for (a, b) in alone.get(name).unwrap().iter().zip(mixed.get(name).unwrap()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encoder_outputs_are_unit_norm(seed in 0u64..100, frames in prop::collection::vec(pose(), 2..40)) {
        let m = model(seed);
        let p = m.params.cast::<f64>();
        let mut g = Graph::<f64>::new();
        let pv = g.params(&p);
        let z = m.encoder_graph(&mut g, &pv, &frames);
        prop_assert!((norm(g.value(z).as_slice().unwrap()) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn text_outputs_are_unit_norm(seed in 0u64..100, words in prop::collection::vec("[a-z]{1,8}", 1..6)) {
        let m = model(seed);
        let f = featurize_text(&words.join(" ")).unwrap();
        let p = m.params.cast::<f64>();
        let mut g = Graph::<f64>::new();
        let pv = g.params(&p);
        let x = g.input(Array2::from_shape_vec((1, TEXT_DIM), f).unwrap());
        let z = m.text_graph(&mut g, &pv, x);
        prop_assert!((norm(g.value(z).as_slice().unwrap()) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn slerp_stays_on_sphere_and_hits_endpoints(a in unit_vec(6), b in unit_vec(6), t in 0.0f64..=1.0) {
        let (z1, z2) = (SkillLatent::new(a).unwrap(), SkillLatent::new(b).unwrap());
        prop_assume!(z1.cosine(&z2) > -0.99);
        let z = slerp(&z1, &z2, t).unwrap();
        prop_assert!((norm(z.as_slice()) - 1.0).abs() <= 1e-12);
        prop_assert_eq!(slerp(&z1, &z2, 0.0).unwrap(), z1.clone());
        prop_assert_eq!(slerp(&z1, &z2, 1.0).unwrap(), z2.clone());
        // Constant angular speed along the arc.
        let omega = z1.cosine(&z2).clamp(-1.0, 1.0).acos();
        let got = z1.cosine(&z).clamp(-1.0, 1.0).acos();
        prop_assert!((got - t * omega).abs() <= 1e-6);
    }

    #[test]
    fn losses_are_in_range(a in unit_vec(5), b in unit_vec(5), xs in prop::collection::vec(pose(), 1..10), ys in prop::collection::vec(pose(), 10)) {
        let l = loss_align(&a, &b).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&l));
        let n = xs.len();
        prop_assert!(loss_recon(&xs, &ys[..n]).unwrap() >= 0.0);
        prop_assert_eq!(loss_recon(&xs, &xs).unwrap(), 0.0);
    }
}
