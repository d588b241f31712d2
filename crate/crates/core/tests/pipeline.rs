use hsc::harness::container::{HscBitstream, HEADER_LEN};
use hsc::numerics::{RngState, Tensor};
use hsc::pipeline::{Codec, CodecConfig, SliceDecoder, StyleCodes};
use hsc::HscError;

fn codec() -> Codec {
    Codec::init(CodecConfig::default()).unwrap()
}

fn random_codes(rng: &mut RngState) -> StyleCodes {
    StyleCodes::new(8, 8, rng.normal_tensor(&[64], 1.0)).unwrap()
}

fn toy_image(codec: &Codec, seed: u64) -> Tensor {
    hsc::pipeline::sample_dataset(codec, 1, seed)
        .unwrap()
        .remove(0)
        .x
}

#[test]
fn partial_generation_matches_the_full_generator() {
    let c = codec();
    let gen = c.generator();
    let mut rng = RngState::new(1);
    for _ in 0..100 {
        let s = random_codes(&mut rng);
        let split = s.split(3).unwrap();
        let f = gen.g_s_values(c.params(), &split.s_s).unwrap();
        let two_step = gen.g_l_values(c.params(), &split.s_l, &f).unwrap();
        let full = gen.full_values(c.params(), &s).unwrap();
        assert!(two_step.max_abs_diff(&full).unwrap() <= 1e-12);
    }
}

#[test]
fn split_join_round_trip_and_bounds() {
    let s = random_codes(&mut RngState::new(2));
    let split = s.split(3).unwrap();
    assert_eq!(split.s_s.len(), 24);
    assert_eq!(split.join().unwrap(), s);
    assert!(s.split(0).is_err());
    assert!(s.split(8).is_err());
}

#[test]
fn decoder_reproduces_the_encoder_latents() {
    let c = codec();
    for seed in 0..5 {
        let x = toy_image(&c, seed);
        let enc = c.encode(&x, false).unwrap();
        let bytes = enc.stream.to_bytes();
        let lat = c
            .decode_latents(&HscBitstream::from_bytes(&bytes).unwrap())
            .unwrap();
        assert_eq!(lat.s_hat, enc.s_hat);
        assert_eq!(lat.f_hat, enc.f_hat);
        assert_eq!(lat.y_hat, enc.y_hat);
        let x_hat = c.decode_bytes(&bytes).unwrap();
        assert_eq!(x_hat, c.synthesize(&enc.s_hat, enc.f_hat.as_ref()).unwrap());
        assert_eq!(x_hat.shape(), x.shape());
    }
}

#[test]
fn encoding_is_deterministic_and_survives_a_model_file() {
    let c = codec();
    let x = toy_image(&c, 7);
    let a = c.encode(&x, false).unwrap().stream.to_bytes();
    let b = c.encode(&x, false).unwrap().stream.to_bytes();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hscm");
    c.save(&path).unwrap();
    let loaded = Codec::load(&path).unwrap();
    assert_eq!(loaded.hash(), c.hash());
    assert_eq!(
        loaded.decode_bytes(&a).unwrap(),
        c.decode_bytes(&a).unwrap()
    );
}

#[test]
fn coded_bits_track_the_rate_estimates() {
    let c = codec();
    let mut rng = RngState::new(3);
    let [cf, hf, wf] = c.config().feature_shape();
    for _ in 0..100 {
        let s = random_codes(&mut rng);
        let f = rng.normal_tensor(&[cf, hf, wf], 1.0);
        let enc = c.encode_latents(&s, &f, false).unwrap();
        let check = |actual: usize, est: f64| {
            let actual = 8.0 * actual as f64;
            assert!(
                (actual - est).abs() <= 0.02 * est + 64.0,
                "{actual} bits vs estimate {est}"
            );
        };
        check(enc.stream.scn_chunk.len(), enc.scn_estimated_bits);
        for (chunk, est) in enc.stream.fcn_chunks.iter().zip(&enc.fcn_estimated_bits) {
            check(chunk.len(), *est);
        }
    }
}

#[test]
fn stream_layout() {
    let c = codec();
    let x = toy_image(&c, 4);
    let full = c.encode(&x, false).unwrap().stream;
    assert_eq!(full.fcn_chunks.len(), 8);
    let bytes = full.to_bytes();
    let payload: usize =
        4 + full.scn_chunk.len() + full.fcn_chunks.iter().map(|c| 4 + c.len()).sum::<usize>();
    assert_eq!(bytes.len(), HEADER_LEN + payload);

    let sem = c.encode(&x, true).unwrap();
    assert!(sem.stream.header.semantics_only());
    assert!(sem.stream.fcn_chunks.is_empty());
    assert_eq!(
        sem.stream.to_bytes().len(),
        HEADER_LEN + 4 + sem.stream.scn_chunk.len()
    );
}

#[test]
fn semantics_only_decode_is_the_full_generator() {
    let c = codec();
    let x = toy_image(&c, 5);
    let enc = c.encode(&x, true).unwrap();
    let decoded = c.decode(&enc.stream).unwrap();
    assert_eq!(
        decoded,
        c.generator().full_values(c.params(), &enc.s_hat).unwrap()
    );
}

#[test]
fn slices_decode_only_in_order_and_causally() {
    let c = codec();
    let x = toy_image(&c, 6);
    let enc = c.encode(&x, false).unwrap();
    let fcn = c.fcn();
    let mut dec = SliceDecoder::new(&fcn, c.params(), enc.s_hat.flat()).unwrap();
    assert!(matches!(
        dec.decode_slice(1, &enc.stream.fcn_chunks[1]),
        Err(HscError::SliceOrder {
            requested: 1,
            expected: 0
        })
    ));
    let first = dec
        .decode_slice(0, &enc.stream.fcn_chunks[0])
        .unwrap()
        .clone();
    assert_eq!(dec.next_slice(), 1);

    // a later chunk never influences an earlier slice
    let mut other = enc.stream.clone();
    other.fcn_chunks[5] = vec![0xA5; other.fcn_chunks[5].len()];
    let mut dec2 = SliceDecoder::new(&fcn, c.params(), enc.s_hat.flat()).unwrap();
    assert_eq!(dec2.decode_slice(0, &other.fcn_chunks[0]).unwrap(), &first);
}

#[test]
fn foreign_and_corrupt_streams_are_rejected() {
    let c = codec();
    let x = toy_image(&c, 8);
    let bytes = c.encode(&x, false).unwrap().stream.to_bytes();

    let other = Codec::init(CodecConfig {
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(
        other.decode_bytes(&bytes),
        Err(HscError::HashMismatch { .. })
    ));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        c.decode_bytes(&bad),
        Err(HscError::BadMagic { .. })
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(c.decode_bytes(&bad), Err(HscError::BadVersion(9))));
    assert!(matches!(
        c.decode_bytes(&bytes[..20]),
        Err(HscError::Truncated { .. })
    ));
    assert!(c.decode_bytes(&bytes[..bytes.len() - 1]).is_err());

    let mut stream = HscBitstream::from_bytes(&bytes).unwrap();
    stream.header.t = 4;
    assert!(matches!(
        c.decode(&stream),
        Err(HscError::HeaderMismatch { field: "t", .. })
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        CodecConfig {
            t: 0,
            ..Default::default()
        },
        CodecConfig {
            k: 0,
            ..Default::default()
        },
        CodecConfig {
            k: 64,
            ..Default::default()
        },
        CodecConfig {
            image_size: 64,
            ..Default::default()
        },
    ] {
        assert!(matches!(Codec::init(cfg), Err(HscError::Config(_))));
    }
    let c = codec();
    assert!(matches!(
        c.encode(&Tensor::zeros(&[3, 16, 16]), false),
        Err(HscError::Shape { .. })
    ));
}
