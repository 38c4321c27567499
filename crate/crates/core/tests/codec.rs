use cmsc_core::codec::{power_normalize, Codec, CodecConfig, SymbolBlock, POWER_TOLERANCE};
use cmsc_core::nn::{ParamStore, Tensor};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn codec(store: &mut ParamStore, channels: usize) -> Codec {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    Codec::new(store, "codec", channels, &CodecConfig::default(), &mut rng).unwrap()
}

#[test]
fn encoder_emits_k_by_c_unit_power_symbols() {
    let mut s = ParamStore::new();
    let c = codec(&mut s, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [1, 7, 62] {
        let f = Tensor::randn(&[k, 6], 1.0, &mut rng);
        let (b, gain) = c.encode(&s, &f).unwrap();
        assert!(gain > 0.0);
        assert_eq!((b.rows, b.cols, b.len()), (k, 6, k * 6));
        assert!(
            (b.power() - 1.0).abs() <= POWER_TOLERANCE,
            "power {}",
            b.power()
        );
        assert_eq!((b, gain), c.encode(&s, &f).unwrap());
    }
}

#[test]
fn empty_pack_rejected() {
    let mut s = ParamStore::new();
    let c = codec(&mut s, 4);
    assert!(c.encode(&s, &Tensor::zeros(&[0, 4])).is_err());
}

#[test]
fn decoder_shape_contract() {
    let mut s = ParamStore::new();
    let c = codec(&mut s, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let (b, gain) = c.encode(&s, &f).unwrap();
    assert_eq!(c.decode(&s, &b, gain, 5).unwrap().shape(), [5, 4]);
    assert!(c.decode(&s, &b, gain, 4).is_err());
    let wrong = SymbolBlock::new(vec![Complex64::new(1.0, 0.0); 15], 5, 3).unwrap();
    assert!(c.decode(&s, &wrong, gain, 5).is_err());
}

#[test]
fn decoder_sees_symbols_times_gain() {
    let mut s = ParamStore::new();
    let c = codec(&mut s, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let (b, gain) = c.encode(&s, &f).unwrap();
    let shrunk =
        SymbolBlock::new(b.symbols.iter().map(|v| v * 0.25).collect(), b.rows, b.cols).unwrap();
    let x = c.decode(&s, &b, gain, 6).unwrap();
    let y = c.decode(&s, &shrunk, gain * 4.0, 6).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn normalization_reference_blocks() {
    let one = |v: Vec<Complex64>| SymbolBlock::new(v.clone(), v.len(), 1).unwrap();
    let b = one(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]);
    assert_eq!(power_normalize(&b).unwrap().symbols, b.symbols);
    let z = Complex64::new(0.0, 0.0);
    let b = one(vec![Complex64::new(2.0, 0.0), z, z, z]);
    assert_eq!(power_normalize(&b).unwrap().symbols, b.symbols);
    let b = one(vec![Complex64::new(3.0, 4.0)]);
    let n = power_normalize(&b).unwrap();
    assert!((n.symbols[0] - Complex64::new(0.6, 0.8)).norm() < 1e-15);
    assert!(power_normalize(&one(vec![z, z])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_idempotent(raw in prop::collection::vec(-5.0f64..5.0, 2..64)) {
        let raw = &raw[..raw.len() / 2 * 2];
        prop_assume!(raw.iter().any(|v| v.abs() > 1e-3));
        let b = SymbolBlock::from_reals(raw, raw.len() / 2, 1).unwrap();
        let once = power_normalize(&b).unwrap();
        let twice = power_normalize(&once).unwrap();
        prop_assert!((once.power() - 1.0).abs() < 1e-12);
        for (a, b) in once.symbols.iter().zip(&twice.symbols) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn random_packs_encode_to_unit_power(k in 1usize..40, seed in any::<u64>()) {
        let mut s = ParamStore::new();
        let c = codec(&mut s, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::randn(&[k, 3], 2.0, &mut rng);
        prop_assert!((c.encode(&s, &f).unwrap().0.power() - 1.0).abs() <= POWER_TOLERANCE);
    }
}
