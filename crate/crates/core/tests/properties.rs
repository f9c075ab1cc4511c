mod common;

use proptest::prelude::*;
use ssmocr_core::checkpoint::{Checkpoint, RngState};
use ssmocr_core::decoders::ctc::ctc_loss;
use ssmocr_core::decoders::Vocabulary;
use ssmocr_core::metrics::edit_distance;
use ssmocr_core::model::{ModelConfig, ModelKind, OcrModel, Preset};
use ssmocr_core::nn::{Binder, Init, ParamStore};
use ssmocr_core::ssm::scan::selective_scan;
use ssmocr_core::ssm::ScanMode;
use ssmocr_core::synth::io::{escape_transcript, unescape_transcript};
use ssmocr_core::synth::rover_combine;
use ssmocr_core::vision::{Activation, EncoderConfig, NormKind, VisionEncoder};
use ssmocr_core::{Tape, Tensor};

fn text() -> impl Strategy<Value = Vec<char>> {
    prop::collection::vec(prop::sample::select(vec!['a', 'b', 'c', ' ', 'é']), 0..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn edit_distance_is_a_metric(a in text(), b in text(), c in text()) {
        let d = |x: &[char], y: &[char]| edit_distance(x, y).distance;
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        let e = edit_distance(&a, &b);
        prop_assert_eq!(e.sub + e.del + e.ins, e.distance);
        prop_assert_eq!(a.len() + e.ins - e.del, b.len());
    }

    #[test]
    fn edit_distance_matches_reference(a in text(), b in text()) {
        prop_assert_eq!(edit_distance(&a, &b).distance, common::levenshtein(&a, &b));
    }

    #[test]
    fn parallel_scan_matches_sequential(seed in 0u64..1_000_000, l in 1usize..200, di in 1usize..6, n in 1usize..9) {
        let mut r = common::rng(seed);
        let a_bar = common::rand_tensor(&mut r, &[l, di, n], 0.0, 1.0);
        let bx = common::rand_tensor(&mut r, &[l, di, n], -1.0, 1.0);
        let c = common::rand_tensor(&mut r, &[l, n], -1.0, 1.0);
        let x = common::rand_tensor(&mut r, &[l, di], -1.0, 1.0);
        let d = common::rand_tensor(&mut r, &[di], -1.0, 1.0).into_data();
        let seq = selective_scan(&a_bar, &bx, &c, &x, &d, ScanMode::Sequential).unwrap();
        let par = selective_scan(&a_bar, &bx, &c, &x, &d, ScanMode::Parallel).unwrap();
        prop_assert!(seq.max_abs_diff(&par) <= 1e-10);
    }

    #[test]
    fn ctc_loss_is_a_negative_log_probability(seed in 0u64..1_000_000, frames in 1usize..12, len in 0usize..5) {
        let mut r = common::rng(seed);
        let logits = common::rand_tensor(&mut r, &[frames, 4], -4.0, 4.0);
        let target: Vec<usize> = (0..len).map(|i| 1 + (seed as usize + i * 7) % 3).collect();
        match ctc_loss(&logits, &target, 0) {
            Ok(v) => prop_assert!(v >= -1e-12 && v.is_finite()),
            Err(_) => prop_assert!(frames < len + target.windows(2).filter(|w| w[0] == w[1]).count()),
        }
    }

    #[test]
    fn unanimous_rover_is_identity(s in "[a-z ]{0,20}", k in 1usize..5, w in prop::collection::vec(0.1f64..10.0, 5)) {
        let hyps = vec![s.as_str(); k];
        prop_assert_eq!(rover_combine(&hyps, &w[..k]).unwrap(), s);
    }

    #[test]
    fn transcript_escaping_roundtrips(s in "[a-c\\\\\t\n\r ]{0,30}") {
        let e = escape_transcript(&s);
        prop_assert!(!e.contains('\t') && !e.contains('\n'));
        prop_assert_eq!(unescape_transcript(&e).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_output_follows_grid_shape(h in 1usize..40, w in 1usize..60) {
        let cfg = EncoderConfig {
            channels: vec![2, 2, 3, 3, 4],
            kernel: 3,
            pooling: vec![(2, 2), (2, 1), (1, 2), (2, 2), (1, 1)],
            norm: NormKind::Batch,
            activation: Activation::Silu,
            min_height: 8,
            min_width: 8,
        };
        let mut store = ParamStore::<f32>::new();
        let enc = VisionEncoder::new(&mut store, &mut Init::new(1), "enc", cfg.clone()).unwrap();
        let tape = Tape::new();
        let bx = Binder::new(&tape, &store, false);
        let image = Tensor::<f32>::full([h, w], 0.5);
        let (seq, grid) = enc.forward(&bx, &image).unwrap();
        let (gh, gw) = cfg.grid_shape(h, w);
        prop_assert_eq!(grid, (gh, gw));
        prop_assert_eq!(tape.shape(seq).iter().product::<usize>(), gh * gw * 4);
    }

    #[test]
    fn checkpoint_bytes_roundtrip(seed in 0u64..1000, kind in prop::sample::select(ModelKind::ALL.to_vec())) {
        let mut cfg = ModelConfig::preset(kind, Preset::Desk);
        cfg.layers = 1;
        let model = OcrModel::<f32>::new(cfg, Vocabulary::default_latin(), seed).unwrap();
        let meta = vec![("note".to_string(), format!("seed {seed}"))];
        let ckpt = Checkpoint::capture(&model, None, RngState::of(&common::rng(seed)), seed, meta);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let restored: OcrModel<f32> = back.restore_model().unwrap();
        for (p, q) in model.store.params().iter().zip(restored.store.params()) {
            prop_assert_eq!(&p.name, &q.name);
            prop_assert!(p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
