use num_complex::Complex;
use proptest::prelude::*;
use ross_core::channel::{apply_channel, equalize, from_symbols, to_symbols, ChannelConfig, ChannelKind};
use ross_core::Tensor;

fn unit_symbols(n: usize) -> Vec<Complex<f64>> {
    // QPSK-like unit-power points
    let s = 0.5f64.sqrt();
    (0..n).map(|i| Complex::new(if i % 2 == 0 { s } else { -s }, if i % 3 == 0 { s } else { -s })).collect()
}

/// Signal power over measured noise power, in dB.
fn empirical_snr_db(kind: ChannelKind, snr_db: f64, blocks: usize, per_block: usize) -> f64 {
    let x = unit_symbols(per_block);
    let cfg = ChannelConfig::new(kind, snr_db, 17);
    let (mut sig, mut noise) = (0.0, 0.0);
    for b in 0..blocks {
        let (y, r) = apply_channel(&x, &cfg, b as u64).unwrap();
        for (yi, xi) in y.iter().zip(&x) {
            let n = yi - r.h * xi;
            noise += n.norm_sqr();
            sig += xi.norm_sqr();
        }
    }
    10.0 * (sig / noise).log10()
}

#[test]
fn awgn_noise_matches_target_snr() {
    for snr in [0.0, 6.0, 12.0] {
        let got = empirical_snr_db(ChannelKind::Awgn, snr, 1000, 1000);
        assert!((got - snr).abs() <= 0.1, "target {snr} dB, measured {got:.4} dB");
    }
}

#[test]
fn rayleigh_noise_matches_target_snr() {
    let got = empirical_snr_db(ChannelKind::Rayleigh, 3.0, 1000, 1000);
    assert!((got - 3.0).abs() <= 0.1, "measured {got:.4} dB");
}

#[test]
fn rayleigh_gain_has_unit_mean() {
    let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 10.0, 5);
    let x = [Complex::new(1.0, 0.0)];
    let n = 100_000;
    let mean: f64 = (0..n).map(|b| apply_channel(&x, &cfg, b).unwrap().1.h.norm_sqr()).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() <= 0.02, "mean |h|² = {mean}");
}

#[test]
fn noisy_equalisation_residual_is_noise_over_h() {
    let x = unit_symbols(64);
    let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 4.0, 8);
    let (y, r) = apply_channel(&x, &cfg, 2).unwrap();
    let eq = equalize(&y, &r).unwrap();
    for i in 0..x.len() {
        let replay = r.noise[i] / r.h;
        assert!((eq[i] - x[i] - replay).norm() < 1e-12);
    }
}

proptest! {
    #[test]
    fn symbol_roundtrip(data in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let mut data = data;
        if data.len() % 2 == 1 { data.push(0.5); }
        prop_assume!(data.iter().any(|&v| v.abs() > 1e-6));
        let f = Tensor::new([data.len()], data).unwrap();
        let b = to_symbols(&f).unwrap();
        let p: f64 = b.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / b.symbols.len() as f64;
        prop_assert!((p - 1.0).abs() < 1e-12);
        let back = from_symbols(&b).unwrap();
        prop_assert!(back.max_abs_diff(&f).unwrap() <= 1e-12);
    }

    #[test]
    fn noiseless_rayleigh_equalises_exactly(seed in any::<u64>(), block in any::<u64>()) {
        let x = unit_symbols(16);
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, f64::INFINITY, seed);
        let (y, r) = apply_channel(&x, &cfg, block).unwrap();
        prop_assume!(r.h.norm() > 1e-6);
        let eq = equalize(&y, &r).unwrap();
        for (a, b) in eq.iter().zip(&x) {
            prop_assert!((a - b).norm() <= 1e-12);
        }
    }
}
