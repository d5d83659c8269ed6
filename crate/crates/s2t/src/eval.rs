//! Metrics, the conventional digital baseline and the SNR sweep.

use std::fmt::Write as _;

use num_complex::Complex;
use rand_distr::{Distribution, StandardNormal};
use ross_core::channel::{apply_channel, equalize, ChannelConfig, ChannelKind};
use ross_core::losses::{EOS, PAD};
use ross_core::Tensor;
use thiserror::Error;

use crate::data::{corrupt_corpus, Corpus, CorruptionSpec};
use crate::pipeline::{infer, Bundle, PipelineError, Route};
use crate::seeds::{self, label};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Content tokens of a sequence: everything before the first EOS, PAD
/// dropped.
pub fn content(seq: &[usize]) -> Vec<usize> {
    seq.iter().take_while(|&&t| t != EOS).copied().filter(|&t| t != PAD).collect()
}

/// Exact-match rate over aligned positions up to the longer length.
pub fn token_accuracy(reference: &[usize], hypothesis: &[usize]) -> f64 {
    let (r, h) = (content(reference), content(hypothesis));
    let n = r.len().max(h.len());
    if n == 0 {
        return 1.0;
    }
    r.iter().zip(&h).filter(|(a, b)| a == b).count() as f64 / n as f64
}

/// A score with a flag for degenerate inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub flagged: bool,
}

/// Bag-of-embeddings similarity with a fixed random unit-norm table.
#[derive(Clone, Debug)]
pub struct StsProxy {
    dim: usize,
    table: Vec<f64>,
}

impl StsProxy {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, &[label::EMBED]);
        let mut table = Vec::with_capacity(vocab * dim);
        for _ in 0..vocab {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            table.extend(row.iter().map(|v| v / norm));
        }
        Self { dim, table }
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.table[token * self.dim..(token + 1) * self.dim]
    }

    fn mean(&self, toks: &[usize]) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for &t in toks {
            for (a, b) in m.iter_mut().zip(self.embedding(t)) {
                *a += b;
            }
        }
        m
    }

    /// `(1 + cos(mean_ref, mean_hyp)) / 2`; an empty side scores 0, flagged.
    pub fn score(&self, reference: &[usize], hypothesis: &[usize]) -> Score {
        let (r, h) = (content(reference), content(hypothesis));
        match (r.is_empty(), h.is_empty()) {
            (true, true) => return Score { value: 1.0, flagged: false },
            (false, false) => {}
            _ => return Score { value: 0.0, flagged: true },
        }
        let (a, b) = (self.mean(&r), self.mean(&h));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Score { value: 0.5, flagged: true };
        }
        let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
        Score { value: (1.0 + cos) / 2.0, flagged: false }
    }
}

fn ngrams(seq: &[usize], n: usize) -> std::collections::HashMap<&[usize], usize> {
    let mut m = std::collections::HashMap::new();
    for w in seq.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Geometric mean of clipped n-gram precisions for `n = 1..=n_max`, times
/// the brevity penalty `min(1, e^(1 − |ref|/|hyp|))`.
pub fn ngram_score(reference: &[usize], hypothesis: &[usize], n_max: usize) -> Score {
    let (r, h) = (content(reference), content(hypothesis));
    if n_max == 0 || h.len() < n_max {
        let exact = !h.is_empty() && r == h;
        return Score { value: if exact { 1.0 } else { 0.0 }, flagged: !exact };
    }
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let (rc, hc) = (ngrams(&r, n), ngrams(&h, n));
        let clipped: usize = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        let total = h.len() + 1 - n;
        if clipped == 0 {
            return Score { value: 0.0, flagged: false };
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let bp = (1.0 - r.len() as f64 / h.len() as f64).exp().min(1.0);
    Score { value: bp * (log_sum / n_max as f64).exp(), flagged: false }
}

// ---- digital baseline --------------------------------------------------------

/// Uniform 8-bit quantiser over a recorded range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantizer {
    pub min: f64,
    pub max: f64,
}

impl Quantizer {
    pub const LEVELS: u32 = 255;

    pub fn fit(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Self { min: 0.0, max: 0.0 };
        }
        Self { min, max }
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / Self::LEVELS as f64
    }

    pub fn quantize(&self, v: f64) -> u8 {
        let d = self.step();
        if d == 0.0 {
            return 0;
        }
        ((v - self.min) / d).round().clamp(0.0, Self::LEVELS as f64) as u8
    }

    pub fn dequantize(&self, q: u8) -> f64 {
        self.min + q as f64 * self.step()
    }
}

/// Bits of each byte, most significant first.
pub fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().flat_map(|&b| (0..8).rev().map(move |k| (b >> k) & 1)).collect()
}

pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8).map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b)).collect()
}

/// Hamming(7,4) codeword `p1 p2 d1 p3 d2 d3 d4`.
pub fn hamming_encode(d: [u8; 4]) -> [u8; 7] {
    let p1 = d[0] ^ d[1] ^ d[3];
    let p2 = d[0] ^ d[2] ^ d[3];
    let p3 = d[1] ^ d[2] ^ d[3];
    [p1, p2, d[0], p3, d[1], d[2], d[3]]
}

/// Corrects up to one flipped bit and returns the data bits.
pub fn hamming_decode(c: [u8; 7]) -> [u8; 4] {
    let mut c = c;
    let s1 = c[0] ^ c[2] ^ c[4] ^ c[6];
    let s2 = c[1] ^ c[2] ^ c[5] ^ c[6];
    let s3 = c[3] ^ c[4] ^ c[5] ^ c[6];
    let pos = (s1 | (s2 << 1) | (s3 << 2)) as usize;
    if pos != 0 {
        c[pos - 1] ^= 1;
    }
    [c[2], c[4], c[5], c[6]]
}

pub fn hamming_encode_bits(bits: &[u8]) -> Vec<u8> {
    bits.chunks(4)
        .flat_map(|c| {
            let mut d = [0u8; 4];
            d[..c.len()].copy_from_slice(c);
            hamming_encode(d)
        })
        .collect()
}

pub fn hamming_decode_bits(coded: &[u8], n_bits: usize) -> Vec<u8> {
    let mut out: Vec<u8> = coded
        .chunks(7)
        .flat_map(|c| {
            let mut w = [0u8; 7];
            w[..c.len()].copy_from_slice(c);
            hamming_decode(w)
        })
        .collect();
    out.truncate(n_bits);
    out
}

const QAM_SCALE: f64 = 0.316_227_766_016_837_94; // 1/sqrt(10)

fn gray_level(b0: u8, b1: u8) -> f64 {
    match (b0, b1) {
        (0, 0) => -3.0,
        (0, 1) => -1.0,
        (1, 1) => 1.0,
        _ => 3.0,
    }
}

fn gray_bits(v: f64) -> (u8, u8) {
    let v = v / QAM_SCALE;
    if v < -2.0 {
        (0, 0)
    } else if v < 0.0 {
        (0, 1)
    } else if v < 2.0 {
        (1, 1)
    } else {
        (1, 0)
    }
}

/// Gray-mapped 16-QAM with unit average power; the bit count is padded
/// with zeros to a multiple of 4.
pub fn qam16_modulate(bits: &[u8]) -> Vec<Complex<f64>> {
    bits.chunks(4)
        .map(|c| {
            let mut b = [0u8; 4];
            b[..c.len()].copy_from_slice(c);
            Complex::new(gray_level(b[0], b[1]) * QAM_SCALE, gray_level(b[2], b[3]) * QAM_SCALE)
        })
        .collect()
}

/// Minimum-distance demodulation.
pub fn qam16_demodulate(symbols: &[Complex<f64>]) -> Vec<u8> {
    symbols
        .iter()
        .flat_map(|s| {
            let (a, b) = gray_bits(s.re);
            let (c, d) = gray_bits(s.im);
            [a, b, c, d]
        })
        .collect()
}

/// Frames after quantisation, Hamming coding, 16-QAM, the channel and the
/// inverse chain. The quantiser range travels as error-free side
/// information.
pub fn digital_link(frames: &Tensor, ch: &ChannelConfig, block: u64) -> Result<Tensor, EvalError> {
    let q = Quantizer::fit(frames.data());
    let bytes: Vec<u8> = frames.data().iter().map(|&v| q.quantize(v)).collect();
    let bits = bytes_to_bits(&bytes);
    let coded = hamming_encode_bits(&bits);
    let symbols = qam16_modulate(&coded);
    let (y, real) = apply_channel(&symbols, ch, block).map_err(PipelineError::from)?;
    let eq = equalize(&y, &real).map_err(PipelineError::from)?;
    let mut rx = qam16_demodulate(&eq);
    rx.truncate(coded.len());
    let data = bits_to_bytes(&hamming_decode_bits(&rx, bits.len()));
    let values = data.iter().map(|&b| q.dequantize(b)).collect();
    Ok(Tensor::new(frames.shape().to_vec(), values).map_err(PipelineError::from)?)
}

/// Conventional chain on the speech frames, then the stage-1 model at the
/// receiver over an ideal link.
pub fn baseline_digital(bundle: &Bundle, frames: &Tensor, ch: &ChannelConfig, block: u64) -> Result<Vec<usize>, EvalError> {
    let rx = digital_link(frames, ch, block)?;
    let ideal = ChannelConfig::new(ChannelKind::Awgn, f64::INFINITY, 0);
    Ok(infer(bundle, &rx, &Route::DeepSc, &ideal, 0)?.tokens)
}

// ---- sweep -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum System {
    BaselineDigital,
    DeepScCleanEncoder,
    GeneratorOnly,
    RossFull,
}

impl System {
    pub const ALL: [System; 4] = [System::RossFull, System::GeneratorOnly, System::DeepScCleanEncoder, System::BaselineDigital];

    pub fn name(self) -> &'static str {
        match self {
            System::RossFull => "ross_full",
            System::GeneratorOnly => "generator_only",
            System::DeepScCleanEncoder => "deepsc_s2t_clean_encoder",
            System::BaselineDigital => "baseline_digital",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub snrs: Vec<f64>,
    pub channels: Vec<ChannelKind>,
    pub systems: Vec<System>,
    /// Corrupt the test input before transmission.
    pub corruption: Option<CorruptionSpec>,
    /// First `limit` test utterances; all when `None`.
    pub limit: Option<usize>,
    pub seed: u64,
    pub embed_dim: usize,
    pub n_max: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snrs: vec![0.0, 3.0, 6.0, 9.0, 12.0],
            channels: vec![ChannelKind::Awgn, ChannelKind::Rayleigh],
            systems: System::ALL.to_vec(),
            corruption: None,
            limit: None,
            seed: 1,
            embed_dim: StsProxy::DEFAULT_DIM,
            n_max: 4,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.snrs.is_empty() {
            return Err(EvalError::Config("SNR list is empty".into()));
        }
        if self.snrs.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(EvalError::Config("SNR values must be numbers or +inf".into()));
        }
        if self.systems.is_empty() {
            return Err(EvalError::Config("system list is empty".into()));
        }
        if self.channels.is_empty() {
            return Err(EvalError::Config("channel list is empty".into()));
        }
        if self.embed_dim == 0 || self.n_max == 0 {
            return Err(EvalError::Config("embed_dim and n_max must be positive".into()));
        }
        Ok(())
    }

    /// Channel seed of one channel kind; shared by every system and SNR.
    pub fn channel_seed(&self, kind: ChannelKind) -> u64 {
        seeds::derive(self.seed, &[label::CHANNEL, kind as u64])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub system: System,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub token_acc: f64,
    pub ngram: f64,
    pub sts_proxy: f64,
    pub n: usize,
    pub seed: u64,
    /// Utterances whose inference failed; excluded from the means.
    pub failures: Vec<String>,
    /// Utterances with a degenerate metric input (empty hypothesis).
    pub flagged: usize,
}

/// Per-utterance scores of one system at one point.
pub fn run_point(
    bundle: &Bundle,
    system: System,
    ch: &ChannelConfig,
    test: &Corpus,
    sts: &StsProxy,
    n_max: usize,
) -> (Vec<[f64; 3]>, Vec<String>, usize) {
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    let mut flagged = 0;
    for (k, u) in test.utterances.iter().enumerate() {
        let block = k as u64;
        let hyp = match system {
            System::BaselineDigital => baseline_digital(bundle, &u.frames, ch, block),
            other => {
                let route = match other {
                    System::RossFull => Route::Full,
                    System::GeneratorOnly => Route::GeneratorOnly,
                    _ => Route::DeepSc,
                };
                infer(bundle, &u.frames, &route, ch, block).map(|r| r.tokens).map_err(EvalError::from)
            }
        };
        match hyp {
            Ok(h) => {
                let s = sts.score(&u.target, &h);
                let g = ngram_score(&u.target, &h, n_max);
                flagged += usize::from(s.flagged);
                scores.push([token_accuracy(&u.target, &h), g.value, s.value]);
            }
            Err(e) => failures.push(format!("utterance {}: {e}", u.id)),
        }
    }
    (scores, failures, flagged)
}

pub fn snr_sweep(cfg: &SweepConfig, bundle: &Bundle, test: &Corpus) -> Result<Vec<MetricReport>, EvalError> {
    cfg.validate()?;
    let mut test = test.clone();
    if let Some(n) = cfg.limit {
        test.utterances.truncate(n);
    }
    if test.is_empty() {
        return Err(EvalError::Config("test slice is empty".into()));
    }
    if let Some(cs) = &cfg.corruption {
        test = corrupt_corpus(&test, cs, seeds::derive(cfg.seed, &[label::CORRUPT, label::EVAL]))?;
    }
    let sts = StsProxy::new(bundle.nets.cfg.tgt_vocab, cfg.embed_dim, cfg.seed);
    let mut out = Vec::new();
    for &system in &cfg.systems {
        for &kind in &cfg.channels {
            for &snr in &cfg.snrs {
                let seed = cfg.channel_seed(kind);
                let ch = ChannelConfig::new(kind, snr, seed);
                let (scores, failures, flagged) = run_point(bundle, system, &ch, &test, &sts, cfg.n_max);
                let n = scores.len();
                let mean = |j: usize| if n == 0 { f64::NAN } else { scores.iter().map(|s| s[j]).sum::<f64>() / n as f64 };
                out.push(MetricReport {
                    system,
                    channel: kind,
                    snr_db: snr,
                    token_acc: mean(0),
                    ngram: mean(1),
                    sts_proxy: mean(2),
                    n,
                    seed,
                    failures,
                    flagged,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        (a.system.name(), a.channel.name()).cmp(&(b.system.name(), b.channel.name())).then(a.snr_db.total_cmp(&b.snr_db))
    });
    Ok(out)
}

pub fn results_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("system,channel,snr_db,token_acc,ngram,sts_proxy,n,seed\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.system.name(),
            r.channel.name(),
            r.snr_db,
            r.token_acc,
            r.ngram,
            r.sts_proxy,
            r.n,
            r.seed
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts_missing_positions() {
        assert_eq!(token_accuracy(&[5, 6, 7, 8, EOS], &[5, 6, 7, 9, EOS]), 0.75);
        assert_eq!(token_accuracy(&[5, 6, EOS], &[5, EOS]), 0.5);
        assert_eq!(token_accuracy(&[5, EOS], &[5, 6, 7, 8, EOS]), 0.25);
        assert_eq!(token_accuracy(&[EOS, PAD], &[EOS]), 1.0);
    }

    #[test]
    fn sts_identity_and_permutation() {
        let s = StsProxy::new(27, 64, 3);
        assert!((s.score(&[4, 5, 6, EOS], &[4, 5, 6, EOS]).value - 1.0).abs() < 1e-12);
        assert!((s.score(&[4, 5, 6, EOS], &[6, 4, 5, EOS]).value - 1.0).abs() < 1e-12);
        assert_eq!(s.score(&[4, EOS], &[EOS]), Score { value: 0.0, flagged: true });
    }

    #[test]
    fn ngram_identity_and_short() {
        assert_eq!(ngram_score(&[3, 4, 5, 6, 7], &[3, 4, 5, 6, 7], 4).value, 1.0);
        let s = ngram_score(&[3, 4, 5, 6, 7], &[3, 4], 4);
        assert!(s.flagged && s.value == 0.0);
    }

    #[test]
    fn quantizer_round_trip() {
        let q = Quantizer::fit(&[-1.0, 0.3, 2.0]);
        for v in [-1.0, 0.3, 2.0, 0.0] {
            assert!((q.dequantize(q.quantize(v)) - v).abs() <= q.step() / 2.0 + 1e-12);
        }
    }

    #[test]
    fn bits_round_trip() {
        let b = [0u8, 1, 127, 128, 255];
        assert_eq!(bits_to_bytes(&bytes_to_bits(&b)), b.to_vec());
    }

    #[test]
    fn csv_formatting() {
        let r = MetricReport {
            system: System::RossFull,
            channel: ChannelKind::Awgn,
            snr_db: 3.0,
            token_acc: 0.5,
            ngram: 0.25,
            sts_proxy: 1.0 / 3.0,
            n: 2,
            seed: 9,
            failures: vec![],
            flagged: 0,
        };
        assert_eq!(
            results_csv(&[r]),
            "system,channel,snr_db,token_acc,ngram,sts_proxy,n,seed\nross_full,awgn,3.000000,0.500000,0.250000,0.333333,2,9\n"
        );
    }
}
