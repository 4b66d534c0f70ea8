use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenekit::audio::{decode_wav, encode_wav, AudioClip};
use scenekit::dsp::{decode_features, encode_features, FeatureKind, FeatureSequence};
use scenekit::ivector::Scoring;
use scenekit::neural::{Table1Options, TrainConfig};
use scenekit::pipeline::{fit_model, GmmParams, IVectorParams, ModelConfig, NeuralParams, TrainedModel};

fn random_clip(channels: usize, len: usize, sr: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = (0..channels)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    AudioClip::new(ch, sr).unwrap()
}

fn random_sequence(kind: FeatureKind, dim: usize, frames: usize, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dim * frames).map(|_| rng.random_range(-50.0f32..50.0)).collect();
    FeatureSequence::new(kind, dim, 0.01, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn wav_round_trip_within_one_step(
        channels in 1usize..3,
        len in 0usize..400,
        sr in prop_oneof![Just(22_050u32), Just(44_100u32), Just(48_000u32)],
        bits in prop_oneof![Just(16u16), Just(24u16)],
        seed in any::<u64>(),
    ) {
        let clip = random_clip(channels, len, sr, seed);
        let bytes = encode_wav(&clip, bits).unwrap();
        let back = decode_wav(&bytes).unwrap();
        prop_assert_eq!(back.sample_rate(), sr);
        prop_assert_eq!(back.num_channels(), channels);
        prop_assert_eq!(back.len(), len);
        let step = 1.0 / f64::from(1u32 << (bits - 1));
        for c in 0..channels {
            for (a, b) in clip.channel(c).iter().zip(back.channel(c)) {
                prop_assert!((a - b).abs() <= step);
            }
        }
        prop_assert_eq!(encode_wav(&back, bits).unwrap(), bytes);
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact(dim in 1usize..64, frames in 0usize..50, seed in any::<u64>()) {
        let seq = random_sequence(FeatureKind::Func6klike, dim, frames, seed);
        let bytes = encode_features(&seq);
        let back = decode_features(&bytes).unwrap();
        prop_assert_eq!(&back, &seq);
        prop_assert_eq!(encode_features(&back), bytes);
    }
}

#[test]
fn fixed_dimension_kinds_round_trip() {
    for (i, kind) in [FeatureKind::Mfcc61, FeatureKind::Bimfcc183, FeatureKind::Logmel60, FeatureKind::Logmel200]
        .into_iter()
        .enumerate()
    {
        let seq = random_sequence(kind, kind.fixed_dim().unwrap(), 7, i as u64);
        assert_eq!(decode_features(&encode_features(&seq)).unwrap(), seq);
    }
}

#[test]
fn truncated_feature_file_is_rejected() {
    let bytes = encode_features(&random_sequence(FeatureKind::Mfcc61, 61, 3, 0));
    assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
}

fn tiny_net() -> NeuralParams {
    NeuralParams {
        net: Table1Options {
            dnn_units: 8,
            rnn_units: 4,
            cnn_filters: [2, 2, 2],
            ..Table1Options::default()
        },
        train: TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        },
        segment_frames: 8,
    }
}

#[test]
fn every_model_kind_round_trips_bit_exactly() {
    let seqs: Vec<FeatureSequence> = (0..6).map(|i| random_sequence(FeatureKind::Func983like, 8, 20, i)).collect();
    let clips: Vec<(&FeatureSequence, usize)> = seqs.iter().enumerate().map(|(i, s)| (s, i % 2)).collect();
    let labels = vec!["a".to_string(), "b".to_string()];
    let configs = [
        ModelConfig::Gmm(GmmParams {
            components: 2,
            max_iters: 3,
            ..GmmParams::default()
        }),
        ModelConfig::Ivector(IVectorParams {
            ubm_components: 2,
            ubm_iters: 3,
            rank: 2,
            t_iters: 2,
            scoring: Scoring::Euclidean,
            length_norm: true,
        }),
        ModelConfig::Dnn(tiny_net()),
        ModelConfig::Rnn(tiny_net()),
        ModelConfig::Cnn(tiny_net()),
    ];
    for cfg in configs {
        let model = fit_model(&clips, &labels, &cfg, 3).unwrap();
        let bytes = model.to_bytes();
        let back = TrainedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model, "{}", cfg.name());
        assert_eq!(back.to_bytes(), bytes, "{}", cfg.name());
        assert_eq!(back.predict_clip(&seqs[0]).unwrap(), model.predict_clip(&seqs[0]).unwrap());
        assert!(TrainedModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
