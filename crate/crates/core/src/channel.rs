//! Power-normalised complex symbol mapping over flat block-fading channels.
//!
//! Consecutive real pairs `(a, b)` of a feature matrix (row-major) become
//! symbols `a + bi`, and the block is scaled to unit mean symbol power. The
//! channel is `y = h·x + n` with one `h` per block (`h = 1` for AWGN, `h ~
//! CN(0, 1)` for Rayleigh) and `n ~ CN(0, N₀)`, `N₀ = 10^(−snr_db/10)`, i.e.
//! `snr_db` is Es/N0 per complex symbol. The receiver knows `h` exactly and
//! zero-forces.
//!
//! Draws are a pure function of `(seed, block)`: the seed keys a ChaCha8
//! generator and the block index selects its stream.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Real;

/// `|h|` below this is refused by [`equalize`].
pub const DEEP_FADE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("feature count {0} is odd and cannot be paired into symbols")]
    OddFeatureCount(usize),
    #[error("block has zero power and cannot be normalised")]
    ZeroPower,
    #[error("deep fade: |h| = {0:e} is below the equalisation guard")]
    DeepFade(f64),
    #[error("snr_db must be finite or +inf, got {0}")]
    BadSnr(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Some(ChannelKind::Awgn),
            "rayleigh" => Some(ChannelKind::Rayleigh),
            _ => None,
        }
    }
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Es/N0 in dB; `f64::INFINITY` means noiseless.
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64, seed: u64) -> Self {
        Self { kind, snr_db, seed }
    }

    /// Complex noise variance `N₀ = 10^(−snr_db/10)`; zero when noiseless.
    pub fn noise_variance(&self) -> Result<f64, ChannelError> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(ChannelError::BadSnr(self.snr_db));
        }
        Ok(if self.snr_db == f64::INFINITY { 0.0 } else { 10f64.powf(-self.snr_db / 10.0) })
    }
}

/// One draw of the channel for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization<R: Real = f64> {
    pub h: Complex<R>,
    /// Total complex noise variance `N₀` (each real axis carries `N₀/2`).
    pub noise_variance: R,
    pub snr_db: f64,
    /// The noise samples that were added, kept for replay checks.
    pub noise: Vec<Complex<R>>,
}

/// Unit-power symbols plus what is needed to undo the mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolBlock<R: Real = f64> {
    pub symbols: Vec<Complex<R>>,
    /// Factor applied to the raw features.
    pub scale: R,
    pub shape: Vec<usize>,
}

/// Pairs features into symbols and normalises to unit mean power.
pub fn to_symbols<R: Real>(f: &Tensor<R>) -> Result<SymbolBlock<R>, ChannelError> {
    let d = f.data();
    if d.len() % 2 != 0 {
        return Err(ChannelError::OddFeatureCount(d.len()));
    }
    let n = d.len() / 2;
    let power = d.iter().map(|&v| v * v).sum::<R>() / R::from_count(n.max(1));
    if n == 0 || power == R::zero() {
        return Err(ChannelError::ZeroPower);
    }
    let scale = R::one() / power.sqrt();
    let symbols = d.chunks_exact(2).map(|p| Complex::new(p[0] * scale, p[1] * scale)).collect();
    Ok(SymbolBlock { symbols, scale, shape: f.shape().to_vec() })
}

/// Inverse of [`to_symbols`].
pub fn from_symbols<R: Real>(b: &SymbolBlock<R>) -> Result<Tensor<R>, ChannelError> {
    let data = b.symbols.iter().flat_map(|s| [s.re / b.scale, s.im / b.scale]).collect();
    Ok(Tensor::new(b.shape.clone(), data)?)
}

fn normal<R: Real>(rng: &mut ChaCha8Rng, std: f64) -> R {
    let z: f64 = rng.sample(StandardNormal);
    R::lit(z * std)
}

/// `y = h·x + n` for block `block`.
pub fn apply_channel<R: Real>(
    x: &[Complex<R>],
    cfg: &ChannelConfig,
    block: u64,
) -> Result<(Vec<Complex<R>>, ChannelRealization<R>), ChannelError> {
    let n0 = cfg.noise_variance()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(block);
    let h = match cfg.kind {
        ChannelKind::Awgn => Complex::new(R::one(), R::zero()),
        ChannelKind::Rayleigh => {
            let s = 0.5f64.sqrt();
            Complex::new(normal(&mut rng, s), normal(&mut rng, s))
        }
    };
    let (y, noise) = if n0 == 0.0 {
        (x.iter().map(|&s| h * s).collect(), vec![Complex::new(R::zero(), R::zero()); x.len()])
    } else {
        let s = (n0 / 2.0).sqrt();
        let noise: Vec<Complex<R>> =
            (0..x.len()).map(|_| Complex::new(normal(&mut rng, s), normal(&mut rng, s))).collect();
        (x.iter().zip(&noise).map(|(&s, &n)| h * s + n).collect(), noise)
    };
    Ok((y, ChannelRealization { h, noise_variance: R::lit(n0), snr_db: cfg.snr_db, noise }))
}

/// Zero-forcing with perfect CSI: `y / h`.
pub fn equalize<R: Real>(y: &[Complex<R>], r: &ChannelRealization<R>) -> Result<Vec<Complex<R>>, ChannelError> {
    let mag = r.h.norm();
    if mag.as_f64() < DEEP_FADE {
        return Err(ChannelError::DeepFade(mag.as_f64()));
    }
    if r.h == Complex::new(R::one(), R::zero()) {
        return Ok(y.to_vec());
    }
    Ok(y.iter().map(|&v| v / r.h).collect())
}

/// Sends feature matrix `x` through normalisation, channel and
/// equalisation on the tape.
///
/// The normalisation is built from tape ops, so its gradient is exact. The
/// channel and equaliser together add the constant `n/h` to the normalised
/// features, so the backward pass sees the identity there. The output is in
/// normalised units; the receiver does not undo the transmit scale.
pub fn transmit<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    cfg: &ChannelConfig,
    block: u64,
) -> Result<(Var, ChannelRealization<R>), ChannelError> {
    let numel = tape.value(x).numel();
    if numel % 2 != 0 {
        return Err(ChannelError::OddFeatureCount(numel));
    }
    if tape.value(x).data().iter().all(|&v| v == R::zero()) {
        return Err(ChannelError::ZeroPower);
    }
    // scale = (2·mean(x²))^(-1/2)
    let sq = tape.square(x)?;
    let p = tape.mean(sq, None)?;
    let p = tape.scale(p, R::lit(2.0))?;
    let lp = tape.log(p)?;
    let ls = tape.scale(lp, R::lit(-0.5))?;
    let s = tape.exp(ls)?;
    let xn = tape.mul(x, s)?;

    let sent = tape.value(xn).clone();
    let symbols: Vec<Complex<R>> = sent.data().chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect();
    let (y, real) = apply_channel(&symbols, cfg, block)?;
    let eq = equalize(&y, &real)?;
    let residual: Vec<R> = eq
        .iter()
        .zip(sent.data().chunks_exact(2))
        .flat_map(|(e, p)| [e.re - p[0], e.im - p[1]])
        .collect();
    if residual.iter().all(|&v| v == R::zero()) {
        return Ok((xn, real));
    }
    let r = tape.constant(Tensor::new(sent.shape().to_vec(), residual)?);
    Ok((tape.add(xn, r)?, real))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn pair_becomes_symbol() {
        let f = Tensor::new([1, 2], vec![3.0, 4.0]).unwrap();
        let b = to_symbols(&f).unwrap();
        // power 25 → scale 1/5
        assert!((b.symbols[0] - c(0.6, 0.8)).norm() < 1e-15);
        assert_eq!(b.scale, 0.2);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert_eq!(to_symbols(&Tensor::<f64>::zeros([2, 2])), Err(ChannelError::ZeroPower));
        assert_eq!(to_symbols(&Tensor::<f64>::full([3], 1.0)), Err(ChannelError::OddFeatureCount(3)));
    }

    #[test]
    fn noiseless_awgn_is_identity() {
        let x = vec![c(0.6, 0.8), c(-1.0, 0.0)];
        let cfg = ChannelConfig::new(ChannelKind::Awgn, f64::INFINITY, 1);
        let (y, r) = apply_channel(&x, &cfg, 0).unwrap();
        assert_eq!(y, x);
        assert_eq!(r.h, c(1.0, 0.0));
        assert_eq!(equalize(&y, &r).unwrap(), x);
    }

    #[test]
    fn nan_snr_rejected() {
        let cfg = ChannelConfig::new(ChannelKind::Awgn, f64::NAN, 1);
        assert!(apply_channel::<f64>(&[c(1.0, 0.0)], &cfg, 0).is_err());
    }

    #[test]
    fn deep_fade_guard() {
        let r = ChannelRealization { h: c(1e-13, 0.0), noise_variance: 0.1, snr_db: 10.0, noise: vec![] };
        assert!(matches!(equalize(&[c(1.0, 0.0)], &r), Err(ChannelError::DeepFade(_))));
    }

    #[test]
    fn same_block_same_draw() {
        let x = vec![c(1.0, 0.0); 8];
        let cfg = ChannelConfig::new(ChannelKind::Rayleigh, 5.0, 42);
        let a = apply_channel(&x, &cfg, 3).unwrap();
        let b = apply_channel(&x, &cfg, 3).unwrap();
        let d = apply_channel(&x, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1.h, d.1.h);
    }

    #[test]
    fn transmit_noiseless_is_normalisation() {
        let mut t = Tape::<f64>::new();
        let f = Tensor::new([2, 2], vec![1.0, 2.0, -2.0, 4.0]).unwrap();
        let x = t.leaf(f.clone());
        let cfg = ChannelConfig::new(ChannelKind::Awgn, f64::INFINITY, 0);
        let (y, _) = transmit(&mut t, x, &cfg, 0).unwrap();
        let b = to_symbols(&f).unwrap();
        for (i, s) in b.symbols.iter().enumerate() {
            assert!((t.value(y).data()[2 * i] - s.re).abs() < 1e-15);
            assert!((t.value(y).data()[2 * i + 1] - s.im).abs() < 1e-15);
        }
    }
}
