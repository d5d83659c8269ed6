use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ross_core::channel::{ChannelConfig, ChannelKind};
use ross_core::Tensor;
use ross_s2t::eval::*;

const EOS: usize = 2;

#[test]
fn accuracy_position_count() {
    assert_eq!(token_accuracy(&[3, 4, 5, 6, EOS], &[3, 4, 9, 6, EOS]), 0.75);
    assert_eq!(token_accuracy(&[3, 4, 5], &[3, 4, 5]), 1.0);
    assert_eq!(token_accuracy(&[3, 4, 5], &[6, 7, 8]), 0.0);
}

#[test]
fn ngram_hand_worked_bigram() {
    // unigrams: a b b c against a b c d, clipped matches a, b, c → 3/4
    // bigrams: ab bb bc against ab bc cd → 2/3; equal lengths, no penalty
    let s = ngram_score(&[3, 4, 5, 6], &[3, 4, 4, 5], 2);
    assert!((s.value - (0.75f64 * 2.0 / 3.0).sqrt()).abs() < 1e-15);
    assert!(!s.flagged);
    // a shorter hypothesis: one unigram, no bigram
    let s = ngram_score(&[3, 4, 5, 6], &[3], 2);
    assert!(s.flagged && s.value == 0.0);
    assert_eq!(ngram_score(&[3, 4, 5, 6], &[3, 4, 5, 6], 4).value, 1.0);
}

#[test]
fn sts_unrelated_pairs_concentrate_at_half() {
    let d = 64;
    let sts = StsProxy::new(4000, d, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let band = 3.0 / (d as f64).sqrt();
    let mut sum = 0.0;
    let trials = 300;
    for _ in 0..trials {
        let len = rng.random_range(3..10);
        let a: Vec<usize> = (0..len).map(|_| rng.random_range(3..2000)).collect();
        let b: Vec<usize> = (0..len).map(|_| rng.random_range(2000..4000)).collect();
        let s = sts.score(&a, &b).value;
        assert!((s - 0.5).abs() <= band, "{s}");
        sum += s;
    }
    assert!((sum / trials as f64 - 0.5).abs() < 0.02);
}

#[test]
fn sts_empty_hypothesis_is_flagged() {
    let sts = StsProxy::new(30, 16, 1);
    let s = sts.score(&[3, 4, EOS], &[EOS]);
    assert!(s.flagged && s.value == 0.0);
}

#[test]
fn hamming_corrects_every_single_flip_in_a_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bits: Vec<u8> = (0..4 * 500).map(|_| rng.random_range(0..2)).collect();
    let coded = hamming_encode_bits(&bits);
    assert_eq!(coded.len(), 7 * 500);
    let mut bad = coded.clone();
    for w in bad.chunks_mut(7) {
        w[rng.random_range(0..7)] ^= 1;
    }
    assert_eq!(hamming_decode_bits(&bad, bits.len()), bits);
}

#[test]
fn noiseless_digital_link_within_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = Tensor::from_fn(vec![12, 16], |_| rng.random_range(-2.0..3.0));
    let q = Quantizer::fit(frames.data());
    let ch = ChannelConfig::new(ChannelKind::Rayleigh, f64::INFINITY, 4);
    let rx = digital_link(&frames, &ch, 0).unwrap();
    for (a, b) in frames.data().iter().zip(rx.data()) {
        assert!((a - b).abs() <= q.step());
    }
}

proptest! {
    #[test]
    fn metrics_bounded_and_one_on_identity(
        a in prop::collection::vec(3usize..20, 1..12),
        b in prop::collection::vec(3usize..20, 0..12),
    ) {
        let sts = StsProxy::new(20, 32, 5);
        for (x, y) in [(&a, &b), (&b, &a)] {
            let vals = [token_accuracy(x, y), sts.score(x, y).value, ngram_score(x, y, 2).value];
            for v in vals {
                prop_assert!((0.0..=1.0).contains(&v), "{}", v);
            }
        }
        prop_assert_eq!(token_accuracy(&a, &a), 1.0);
        prop_assert!((sts.score(&a, &a).value - 1.0).abs() < 1e-12);
        let mut rev = a.clone();
        rev.reverse();
        prop_assert!((sts.score(&a, &rev).value - 1.0).abs() < 1e-12);
        prop_assert!((sts.score(&a, &b).value - sts.score(&b, &a).value).abs() < 1e-15);
        if a.len() >= 2 {
            prop_assert!((ngram_score(&a, &a, 2).value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn qam_round_trip(bytes in prop::collection::vec(any::<u8>(), 1..64)) {
        let bits = bytes_to_bits(&bytes);
        prop_assert_eq!(bits_to_bytes(&bits), bytes);
        let sym = qam16_modulate(&bits);
        prop_assert_eq!(sym.len(), bits.len() / 4);
        prop_assert_eq!(qam16_demodulate(&sym), bits);
    }
}
