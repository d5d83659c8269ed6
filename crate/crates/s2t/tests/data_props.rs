use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ross_s2t::data::*;

fn spec(seed: u64, size: usize) -> CorpusSpec {
    CorpusSpec { size, seed, ..CorpusSpec::default() }
}

#[test]
fn inverse_rule_recovers_every_source() {
    let s = spec(3, 300);
    let lang = Language::new(&s).unwrap();
    let c = generate_corpus(&s).unwrap();
    for u in &c.utterances {
        assert_eq!(lang.invert(u.target_content()).as_deref(), Some(&u.source[..]), "utterance {}", u.id);
    }
}

#[test]
fn clean_frames_classify_perfectly() {
    let s = spec(5, 200);
    let lang = Language::new(&s).unwrap();
    let c = generate_corpus(&s).unwrap();
    check_clean_frames(&c, &lang).unwrap();
    assert!(s.sigma_frame <= 0.3 * lang.min_distance);
}

#[test]
fn splits_are_distinct() {
    let s = CorpusSpec::default();
    let (a, b, c) = (s.seed, s.validation(10).seed, s.held_out(10).seed);
    assert!(a != b && b != c && a != c);
    let v = generate_corpus(&s.validation(10)).unwrap();
    let t = generate_corpus(&s.held_out(10)).unwrap();
    assert!(!v.bit_eq(&t));
}

#[test]
fn save_load_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let c = corrupt_corpus(&generate_corpus(&spec(9, 30)).unwrap(), &CorruptionSpec::default(), 4).unwrap();
    let p = dir.path().join("c.corpus");
    save_corpus(&c, &p).unwrap();
    assert!(load_corpus(&p).unwrap().bit_eq(&c));
    let text = std::fs::read_to_string(&p).unwrap();
    let cut: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    assert!(parse_corpus(&cut).is_err());
}

fn brute_truth(mask: &[bool], r: usize, len: usize) -> Vec<bool> {
    (0..len).map(|l| (l * r..(l + 1) * r).any(|f| f < mask.len() && mask[f])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn corruption_keeps_targets_and_hits_fraction(
        seed in any::<u64>(),
        fraction in 0.05f64..0.95,
        spans in 1usize..4,
        noise in any::<bool>(),
    ) {
        let c = generate_corpus(&spec(seed % 1000, 4)).unwrap();
        let kind = if noise { CorruptionKind::NoiseBurst } else { CorruptionKind::Interference };
        let cs = CorruptionSpec { kind, fraction, spans, burst_sigma: None };
        let r = c.spec.frames_per_token;
        let bad = corrupt_corpus(&c, &cs, seed).unwrap();
        for (u, v) in c.utterances.iter().zip(&bad.utterances) {
            prop_assert_eq!(&u.target, &v.target);
            prop_assert_eq!(&u.source, &v.source);
            let hit = v.mask.iter().filter(|&&m| m).count() as f64;
            let frames = v.mask.len() as f64;
            prop_assert!((hit - fraction * frames).abs() <= r as f64, "{} of {}", hit, frames);
            // untouched frames are bit-identical
            for (f, &m) in v.mask.iter().enumerate() {
                if !m {
                    prop_assert_eq!(u.frames.row(f), v.frames.row(f));
                }
            }
        }
    }

    #[test]
    fn probe_truth_is_window_any(
        (mask, r) in (1usize..5, 1usize..16).prop_flat_map(|(r, n)| (prop::collection::vec(any::<bool>(), n * r), Just(r)))
    ) {
        let len = mask.len() / r + 2;
        prop_assert_eq!(frame_mask_to_probe_truth(&mask, r, len).unwrap(), brute_truth(&mask, r, len));
    }

    #[test]
    fn same_seed_same_corpus(seed in 0u64..500) {
        let a = generate_corpus(&spec(seed, 5)).unwrap();
        let b = generate_corpus(&spec(seed, 5)).unwrap();
        prop_assert!(a.bit_eq(&b));
        let cs = CorruptionSpec::default();
        prop_assert!(corrupt_corpus(&a, &cs, seed).unwrap().bit_eq(&corrupt_corpus(&b, &cs, seed).unwrap()));
    }
}

#[test]
fn edge_fractions() {
    let c = generate_corpus(&spec(2, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = &c.utterances[0];
    let none = CorruptionSpec { fraction: 0.0, spans: 0, ..CorruptionSpec::default() };
    let v = corrupt(u, &none, 4, Some(&c.utterances[1]), &mut rng).unwrap();
    assert_eq!(v.frames, u.frames);
    assert!(v.mask.iter().all(|&m| !m));
    let all = CorruptionSpec { fraction: 1.0, ..CorruptionSpec::default() };
    let v = corrupt(u, &all, 4, Some(&c.utterances[1]), &mut rng).unwrap();
    assert!(v.mask.iter().all(|&m| m));
    let single: Vec<bool> = (0..u.frames.shape()[0]).map(|f| f == 5).collect();
    let truth = frame_mask_to_probe_truth(&single, 4, 16).unwrap();
    assert_eq!(truth.iter().filter(|&&t| t).count(), 1);
}
