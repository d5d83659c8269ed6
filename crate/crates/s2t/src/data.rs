//! Synthetic speech-translation corpus.
//!
//! Each source token owns a random "acoustic prototype"; an utterance's
//! frames are its tokens' prototypes held for `r` frames each plus Gaussian
//! jitter. Source sentences follow a sparse Markov grammar, and targets are a
//! token-wise bijection followed by swapping adjacent pairs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use ross_core::losses::{BOS, EOS, PAD};
use ross_core::Tensor;
use thiserror::Error;

use crate::seeds::{self, label};

/// Ids below this are reserved (PAD, BOS, EOS).
pub const RESERVED: usize = 3;

/// Prototype draws attempted before giving up on the separation margin.
const PROTOTYPE_ATTEMPTS: usize = 64;

/// Required ratio of jitter norm to minimum prototype distance.
pub const SEPARATION_RATIO: f64 = 0.3;

const MAGIC: &str = "ross-corpus";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("invalid corruption: {0}")]
    Corruption(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corpus check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn spec_err(msg: impl Into<String>) -> DataError {
    DataError::Spec(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub frames_per_token: usize,
    pub frame_dim: usize,
    pub sigma_frame: f64,
    pub rule_seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Target rows L̃, including the EOS slot.
    pub max_target_len: usize,
    /// Allowed next tokens per source token in the grammar.
    pub successors: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            src_vocab: 27,
            tgt_vocab: 27,
            frames_per_token: 4,
            frame_dim: 16,
            sigma_frame: 0.2,
            rule_seed: 17,
            min_len: 4,
            max_len: 12,
            max_target_len: 16,
            successors: 2,
            size: 2000,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn src_content(&self) -> usize {
        self.src_vocab.saturating_sub(RESERVED)
    }

    pub fn tgt_content(&self) -> usize {
        self.tgt_vocab.saturating_sub(RESERVED)
    }

    /// Frame rows presented to the networks: `L̃ · r`.
    pub fn padded_frames(&self) -> usize {
        self.max_target_len * self.frames_per_token
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.src_vocab <= RESERVED || self.tgt_vocab <= RESERVED {
            return Err(spec_err(format!(
                "vocabularies ({}, {}) must exceed the {RESERVED} reserved ids",
                self.src_vocab, self.tgt_vocab
            )));
        }
        if self.tgt_content() < self.src_content() {
            return Err(spec_err("target vocabulary cannot hold a bijection of the source content tokens"));
        }
        if self.frames_per_token == 0 || self.frame_dim == 0 {
            return Err(spec_err("frames_per_token and frame_dim must be positive"));
        }
        if !(self.sigma_frame >= 0.0 && self.sigma_frame.is_finite()) {
            return Err(spec_err(format!("sigma_frame must be finite and non-negative, got {}", self.sigma_frame)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(spec_err(format!("length range [{}, {}] is empty", self.min_len, self.max_len)));
        }
        if self.max_len + 1 > self.max_target_len {
            return Err(spec_err(format!(
                "max_len {} plus EOS exceeds max_target_len {}",
                self.max_len, self.max_target_len
            )));
        }
        if self.successors == 0 || self.successors > self.src_content() {
            return Err(spec_err(format!("successors must be in 1..={}", self.src_content())));
        }
        Ok(())
    }

    /// Same language, fresh sentences: shares the rule seed, draws from a
    /// derived master seed.
    pub fn held_out(&self, size: usize) -> CorpusSpec {
        CorpusSpec { size, seed: seeds::derive(self.seed, &[label::EVAL]), ..self.clone() }
    }

    /// Validation split, disjoint in seed from both training and
    /// [`held_out`](Self::held_out).
    pub fn validation(&self, size: usize) -> CorpusSpec {
        CorpusSpec { size, seed: seeds::derive(self.seed, &[label::EVAL, 2]), ..self.clone() }
    }
}

/// Prototypes, grammar and translation rule fixed by the rule seed.
#[derive(Clone, Debug)]
pub struct Language {
    pub prototypes: Tensor,
    pub min_distance: f64,
    forward: Vec<usize>,
    inverse: Vec<Option<usize>>,
    successors: Vec<Vec<usize>>,
}

impl Language {
    pub fn new(spec: &CorpusSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let mut rng = seeds::rng(spec.rule_seed, &[label::RULE]);
        let (src_n, tgt_n) = (spec.src_content(), spec.tgt_content());

        let picks = sample(&mut rng, tgt_n, src_n).into_vec();
        let mut forward: Vec<usize> = (0..RESERVED).collect();
        forward.extend(picks.iter().map(|&p| p + RESERVED));
        let mut inverse = vec![None; spec.tgt_vocab];
        for (s, &t) in forward.iter().enumerate() {
            inverse[t] = Some(s);
        }

        let mut successors = vec![Vec::new(); spec.src_vocab];
        for succ in successors.iter_mut().skip(RESERVED) {
            let mut s: Vec<usize> = sample(&mut rng, src_n, spec.successors).into_iter().map(|i| i + RESERVED).collect();
            s.sort_unstable();
            *succ = s;
        }

        let jitter = spec.sigma_frame * (spec.frame_dim as f64).sqrt();
        let mut best: Option<(Tensor, f64)> = None;
        for _ in 0..PROTOTYPE_ATTEMPTS {
            let data: Vec<f64> = (0..src_n * spec.frame_dim).map(|_| rng.sample(StandardNormal)).collect();
            let protos = Tensor::new([src_n, spec.frame_dim], data).expect("prototype shape");
            let d = min_pairwise_distance(&protos);
            if best.as_ref().is_none_or(|(_, b)| d > *b) {
                best = Some((protos, d));
            }
            if jitter <= SEPARATION_RATIO * d {
                break;
            }
        }
        let (prototypes, min_distance) = best.expect("at least one attempt");
        if jitter > SEPARATION_RATIO * min_distance {
            return Err(spec_err(format!(
                "frame jitter norm {jitter:.4} exceeds {SEPARATION_RATIO} of the prototype separation {min_distance:.4}"
            )));
        }
        Ok(Self { prototypes, min_distance, forward, inverse, successors })
    }

    /// Source ids that may follow `token`.
    pub fn successors(&self, token: usize) -> &[usize] {
        &self.successors[token]
    }

    pub fn is_grammatical(&self, source: &[usize]) -> bool {
        source.iter().all(|&t| t >= RESERVED && t < self.successors.len())
            && source.windows(2).all(|w| self.successors[w[0]].contains(&w[1]))
    }

    /// Content target tokens for a source sentence (no EOS).
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = source.iter().map(|&s| self.forward[s]).collect();
        swap_pairs(&mut out);
        out
    }

    /// Undoes [`translate`](Self::translate); `None` if a token has no
    /// preimage.
    pub fn invert(&self, target: &[usize]) -> Option<Vec<usize>> {
        let mut out = target.iter().map(|&t| self.inverse.get(t).copied().flatten()).collect::<Option<Vec<_>>>()?;
        swap_pairs(&mut out);
        Some(out)
    }

    /// Index of the prototype closest to `frame`, as a source token id.
    pub fn nearest_token(&self, frame: &[f64]) -> usize {
        let d = self.prototypes.shape()[1];
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.prototypes.data().chunks(d).enumerate() {
            let dist: f64 = p.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        best.1 + RESERVED
    }
}

fn swap_pairs(v: &mut [usize]) {
    for pair in v.chunks_mut(2) {
        if pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
}

fn min_pairwise_distance(protos: &Tensor) -> f64 {
    let n = protos.shape()[0];
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = protos.row(i).iter().zip(protos.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    /// `(r · source.len(), frame_dim)`.
    pub frames: Tensor,
    pub source: Vec<usize>,
    /// Content tokens, EOS, then PAD up to L̃.
    pub target: Vec<usize>,
    /// One flag per frame; empty for a clean utterance.
    pub mask: Vec<bool>,
}

impl Utterance {
    /// Target tokens before the first EOS.
    pub fn target_content(&self) -> &[usize] {
        let end = self.target.iter().position(|&t| t == EOS || t == PAD).unwrap_or(self.target.len());
        &self.target[..end]
    }

    /// Decoder input under teacher forcing: BOS then the target shifted right.
    pub fn teacher_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.target.len());
        v.push(BOS);
        v.extend_from_slice(&self.target[..self.target.len().saturating_sub(1)]);
        v
    }

    pub fn is_corrupted(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// Frames zero-padded to `rows`.
    pub fn padded_frames(&self, rows: usize) -> Result<Tensor, DataError> {
        let (n, d) = self.frames.dims2().ok_or_else(|| DataError::Check("frames must be a matrix".into()))?;
        if n > rows {
            return Err(DataError::Check(format!("utterance {} has {n} frames, more than the {rows} supported", self.id)));
        }
        let mut data = self.frames.data().to_vec();
        data.resize(rows * d, 0.0);
        Ok(Tensor::new([rows, d], data).expect("padded shape"))
    }
}

fn pad_target(content: &[usize], len: usize) -> Vec<usize> {
    let mut t = content.to_vec();
    t.push(EOS);
    t.resize(len, PAD);
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn bit_eq(&self, other: &Corpus) -> bool {
        self.spec == other.spec
            && self.len() == other.len()
            && self.utterances.iter().zip(&other.utterances).all(|(a, b)| {
                a.id == b.id && a.source == b.source && a.target == b.target && a.mask == b.mask && a.frames.bit_eq(&b.frames)
            })
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, DataError> {
    let lang = Language::new(spec)?;
    let (r, d) = (spec.frames_per_token, spec.frame_dim);
    let mut utterances = Vec::with_capacity(spec.size);
    for id in 0..spec.size {
        let mut rng = seeds::rng(spec.seed, &[label::CORPUS, id as u64]);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut source = Vec::with_capacity(len);
        source.push(rng.random_range(RESERVED..spec.src_vocab));
        while source.len() < len {
            let succ = lang.successors(*source.last().expect("non-empty"));
            source.push(succ[rng.random_range(0..succ.len())]);
        }
        let mut data = Vec::with_capacity(len * r * d);
        for &tok in &source {
            let proto = lang.prototypes.row(tok - RESERVED);
            for _ in 0..r {
                data.extend(proto.iter().map(|&p| p + spec.sigma_frame * rng.sample::<f64, _>(StandardNormal)));
            }
        }
        let frames = Tensor::new([len * r, d], data).expect("frame shape");
        let target = pad_target(&lang.translate(&source), spec.max_target_len);
        utterances.push(Utterance { id, frames, source, target, mask: Vec::new() });
    }
    let corpus = Corpus { spec: spec.clone(), utterances };
    check_clean_frames(&corpus, &lang)?;
    Ok(corpus)
}

/// Nearest-prototype classification of every clean frame must be exact.
pub fn check_clean_frames(corpus: &Corpus, lang: &Language) -> Result<(), DataError> {
    let r = corpus.spec.frames_per_token;
    for u in corpus.utterances.iter().filter(|u| !u.is_corrupted()) {
        for (f, &tok) in (0..u.frames.shape()[0]).zip(u.source.iter().flat_map(|t| std::iter::repeat_n(t, r))) {
            let got = lang.nearest_token(u.frames.row(f));
            if got != tok {
                return Err(DataError::Check(format!(
                    "utterance {} frame {f}: nearest prototype is token {got}, expected {tok}",
                    u.id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionKind {
    NoiseBurst,
    Interference,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::NoiseBurst => "noise-burst",
            CorruptionKind::Interference => "interference",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [CorruptionKind::NoiseBurst, CorruptionKind::Interference].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// ρ_c: share of token slots hit.
    pub fraction: f64,
    pub spans: usize,
    /// Burst standard deviation; `None` means three times the frame RMS.
    pub burst_sigma: Option<f64>,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self { kind: CorruptionKind::Interference, fraction: 0.25, spans: 2, burst_sigma: None }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(DataError::Corruption(format!("fraction {} outside [0, 1]", self.fraction)));
        }
        if self.fraction == 0.0 && self.spans > 0 {
            return Err(DataError::Corruption(format!("{} spans requested with zero fraction", self.spans)));
        }
        if self.fraction > 0.0 && self.spans == 0 {
            return Err(DataError::Corruption("positive fraction needs at least one span".into()));
        }
        if let Some(s) = self.burst_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(DataError::Corruption(format!("burst sigma {s} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Half-open slot ranges: `k` slots in at most `spans` runs separated by at
/// least one clean slot.
fn place_spans<G: Rng + ?Sized>(n: usize, k: usize, spans: usize, rng: &mut G) -> Vec<(usize, usize)> {
    let s = spans.min(k).min(n - k + 1);
    let cuts = {
        let mut c: Vec<usize> = sample(rng, k - 1, s - 1).into_iter().map(|i| i + 1).collect();
        c.sort_unstable();
        c
    };
    let mut lens = Vec::with_capacity(s);
    let mut prev = 0;
    for &c in cuts.iter().chain(std::iter::once(&k)) {
        lens.push(c - prev);
        prev = c;
    }
    let spare = n - k - (s - 1);
    let mut bars: Vec<usize> = sample(rng, spare + s, s).into_vec();
    bars.sort_unstable();
    let mut gaps = Vec::with_capacity(s + 1);
    let mut last = 0;
    for (i, &b) in bars.iter().enumerate() {
        gaps.push(b - i - last);
        last = b - i;
    }
    let mut out = Vec::with_capacity(s);
    let mut pos = 0;
    for (i, &len) in lens.iter().enumerate() {
        pos += gaps[i] + usize::from(i > 0);
        out.push((pos, pos + len));
        pos += len;
    }
    out
}

/// Corrupts token-aligned spans of a clean utterance. Interference copies
/// frames from `interferer` starting at a random offset that is not on the
/// token grid, so corrupted windows straddle two interfering tokens.
pub fn corrupt<G: Rng + ?Sized>(
    u: &Utterance,
    cspec: &CorruptionSpec,
    r: usize,
    interferer: Option<&Utterance>,
    rng: &mut G,
) -> Result<Utterance, DataError> {
    cspec.validate()?;
    if u.is_corrupted() {
        return Err(DataError::Corruption(format!("utterance {} is already corrupted", u.id)));
    }
    let (frames, d) = u.frames.dims2().ok_or_else(|| DataError::Corruption("frames must be a matrix".into()))?;
    if r == 0 || frames % r != 0 {
        return Err(DataError::Corruption(format!("{frames} frames not divisible by r = {r}")));
    }
    let mut out = u.clone();
    out.mask = vec![false; frames];
    let n = frames / r;
    if cspec.fraction == 0.0 || n == 0 {
        return Ok(out);
    }
    let k = ((cspec.fraction * n as f64).round() as usize).clamp(1, n);
    let spans = place_spans(n, k, cspec.spans, rng);

    let data = out.frames.data_mut();
    match cspec.kind {
        CorruptionKind::NoiseBurst => {
            let sigma = cspec.burst_sigma.unwrap_or_else(|| {
                let ms = u.frames.data().iter().map(|v| v * v).sum::<f64>() / u.frames.numel() as f64;
                3.0 * ms.sqrt()
            });
            for &(a, b) in &spans {
                for v in &mut data[a * r * d..b * r * d] {
                    *v = sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        CorruptionKind::Interference => {
            let other = interferer.ok_or_else(|| DataError::Corruption("interference needs a source utterance".into()))?;
            let (m, od) = other.frames.dims2().unwrap_or((0, 0));
            if m == 0 || od != d {
                return Err(DataError::Corruption(format!("interferer {} has incompatible frames", other.id)));
            }
            for &(a, b) in &spans {
                let phase = if r > 1 { rng.random_range(1..r) } else { 0 };
                let offset = r * rng.random_range(0..m.div_ceil(r)) + phase;
                for (i, f) in (a * r..b * r).enumerate() {
                    let src = (offset + i) % m;
                    data[f * d..(f + 1) * d].copy_from_slice(other.frames.row(src));
                }
            }
        }
    }
    for &(a, b) in &spans {
        out.mask[a * r..b * r].iter_mut().for_each(|m| *m = true);
    }
    Ok(out)
}

/// Corrupted copy of every utterance; interferers are other utterances of
/// the same corpus chosen from `seed`.
pub fn corrupt_corpus(corpus: &Corpus, cspec: &CorruptionSpec, seed: u64) -> Result<Corpus, DataError> {
    let n = corpus.len();
    let mut utterances = Vec::with_capacity(n);
    for (i, u) in corpus.utterances.iter().enumerate() {
        let mut rng = seeds::rng(seed, &[label::CORRUPT, u.id as u64]);
        let other = (n > 1).then(|| &corpus.utterances[(i + 1 + rng.random_range(0..n - 1)) % n]);
        utterances.push(corrupt(u, cspec, corpus.spec.frames_per_token, other, &mut rng)?);
    }
    Ok(Corpus { spec: corpus.spec.clone(), utterances })
}

/// Slot `l` is set iff any frame of window `[l·r, (l+1)·r)` is corrupted.
pub fn frame_mask_to_probe_truth(mask: &[bool], r: usize, len: usize) -> Result<Vec<bool>, DataError> {
    if r == 0 || mask.len() % r != 0 {
        return Err(DataError::Corruption(format!("mask length {} not divisible by r = {r}", mask.len())));
    }
    let slots = mask.len() / r;
    if slots > len {
        return Err(DataError::Corruption(format!("{slots} token slots exceed probe length {len}")));
    }
    let mut out = vec![false; len];
    for (o, w) in out.iter_mut().zip(mask.chunks(r)) {
        *o = w.iter().any(|&m| m);
    }
    Ok(out)
}

// ---- file format ----------------------------------------------------------

fn header_line(spec: &CorpusSpec, records: usize) -> String {
    format!(
        "{MAGIC} {FORMAT_VERSION} src_vocab={} tgt_vocab={} frames_per_token={} frame_dim={} sigma_frame={} rule_seed={} \
         min_len={} max_len={} max_target_len={} successors={} size={} seed={} records={records}",
        spec.src_vocab,
        spec.tgt_vocab,
        spec.frames_per_token,
        spec.frame_dim,
        spec.sigma_frame,
        spec.rule_seed,
        spec.min_len,
        spec.max_len,
        spec.max_target_len,
        spec.successors,
        spec.size,
        spec.seed,
    )
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut s = header_line(&corpus.spec, corpus.len());
    s.push('\n');
    for u in &corpus.utterances {
        let bytes: Vec<u8> = u.frames.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let mask: String = u.mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", u.id, join_ids(&u.source), join_ids(&u.target), hex::encode(bytes), mask);
    }
    s
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, corpus_to_string(corpus))?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, DataError> {
    parse_corpus(&fs::read_to_string(path)?)
}

fn parse_header(line: &str) -> Result<(CorpusSpec, usize), DataError> {
    let err = |msg: String| DataError::Parse { line: 1, msg };
    let mut words = line.split_whitespace();
    if words.next() != Some(MAGIC) {
        return Err(err(format!("missing '{MAGIC}' header")));
    }
    match words.next().map(str::parse::<u32>) {
        Some(Ok(FORMAT_VERSION)) => {}
        other => return Err(err(format!("unsupported format version {other:?}"))),
    }
    let mut fields = std::collections::BTreeMap::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| err(format!("expected key=value, got '{w}'")))?;
        fields.insert(k, v);
    }
    let take = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("header lacks '{k}'")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, DataError> {
        v.parse().map_err(|_| DataError::Parse { line: 1, msg: format!("bad value '{v}' for '{k}'") })
    }
    let spec = CorpusSpec {
        src_vocab: num("src_vocab", take("src_vocab")?)?,
        tgt_vocab: num("tgt_vocab", take("tgt_vocab")?)?,
        frames_per_token: num("frames_per_token", take("frames_per_token")?)?,
        frame_dim: num("frame_dim", take("frame_dim")?)?,
        sigma_frame: num("sigma_frame", take("sigma_frame")?)?,
        rule_seed: num("rule_seed", take("rule_seed")?)?,
        min_len: num("min_len", take("min_len")?)?,
        max_len: num("max_len", take("max_len")?)?,
        max_target_len: num("max_target_len", take("max_target_len")?)?,
        successors: num("successors", take("successors")?)?,
        size: num("size", take("size")?)?,
        seed: num("seed", take("seed")?)?,
    };
    let records = num("records", take("records")?)?;
    spec.validate().map_err(|e| err(e.to_string()))?;
    Ok((spec, records))
}

fn parse_ids(field: &str, what: &str, line: usize) -> Result<Vec<usize>, DataError> {
    field
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| DataError::Parse { line, msg: format!("bad {what} token '{w}'") }))
        .collect()
}

fn parse_record(text: &str, line: usize, spec: &CorpusSpec) -> Result<Utterance, DataError> {
    let err = |msg: String| DataError::Parse { line, msg };
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() != 5 {
        return Err(err(format!("expected 5 tab-separated fields, found {}", cols.len())));
    }
    let id = cols[0].parse().map_err(|_| err(format!("bad id '{}'", cols[0])))?;
    let source = parse_ids(cols[1], "source", line)?;
    let target = parse_ids(cols[2], "target", line)?;
    let bytes = hex::decode(cols[3]).map_err(|e| err(format!("bad frame dump: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(err("frame dump is not a whole number of 64-bit values".into()));
    }
    let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let rows = source.len() * spec.frames_per_token;
    if data.len() != rows * spec.frame_dim {
        return Err(err(format!("{} frame values, expected {}", data.len(), rows * spec.frame_dim)));
    }
    if target.len() != spec.max_target_len {
        return Err(err(format!("target has {} tokens, expected {}", target.len(), spec.max_target_len)));
    }
    if source.iter().any(|&t| t < RESERVED || t >= spec.src_vocab) || target.iter().any(|&t| t >= spec.tgt_vocab) {
        return Err(err("token id out of range".into()));
    }
    let mask = cols[4]
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(err(format!("bad mask character '{other}'"))),
        })
        .collect::<Result<Vec<bool>, _>>()?;
    if !mask.is_empty() && mask.len() != rows {
        return Err(err(format!("mask has {} flags, expected {rows}", mask.len())));
    }
    let frames = Tensor::new([rows, spec.frame_dim], data).expect("checked shape");
    Ok(Utterance { id, frames, source, target, mask })
}

pub fn parse_corpus(text: &str) -> Result<Corpus, DataError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(DataError::Parse { line: 1, msg: "empty file".into() })?;
    let (spec, records) = parse_header(header)?;
    let mut utterances = Vec::with_capacity(records);
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        if utterances.len() == records {
            return Err(DataError::Parse { line, msg: format!("header declares {records} records, found more") });
        }
        utterances.push(parse_record(l, line, &spec)?);
    }
    if utterances.len() != records {
        return Err(DataError::Parse {
            line: utterances.len() + 2,
            msg: format!("header declares {records} records, file ends after {}", utterances.len()),
        });
    }
    Ok(Corpus { spec, utterances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> CorpusSpec {
        CorpusSpec { size: 40, ..CorpusSpec::default() }
    }

    #[test]
    fn reserved_vocab_rejected() {
        let spec = CorpusSpec { src_vocab: 3, ..small() };
        assert!(matches!(generate_corpus(&spec), Err(DataError::Spec(_))));
    }

    #[test]
    fn zero_jitter_frames_repeat_prototypes() {
        let spec = CorpusSpec { sigma_frame: 0.0, ..small() };
        let c = generate_corpus(&spec).unwrap();
        let u = &c.utterances[0];
        let r = spec.frames_per_token;
        for (k, &tok) in u.source.iter().enumerate() {
            for j in 0..r {
                assert_eq!(u.frames.row(k * r + j), c.utterances.iter().find_map(|v| {
                    v.source.iter().position(|&t| t == tok).map(|p| v.frames.row(p * r))
                }).unwrap());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn targets_are_translations() {
        let spec = small();
        let lang = Language::new(&spec).unwrap();
        let c = generate_corpus(&spec).unwrap();
        for u in &c.utterances {
            assert!(lang.is_grammatical(&u.source));
            assert_eq!(u.target.len(), spec.max_target_len);
            assert_eq!(u.target[u.source.len()], EOS);
            assert_eq!(u.frames.shape()[0], u.source.len() * spec.frames_per_token);
        }
    }

    #[test]
    fn zero_fraction_is_identity() {
        let c = generate_corpus(&small()).unwrap();
        let cs = CorruptionSpec { fraction: 0.0, spans: 0, ..CorruptionSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = corrupt(&c.utterances[0], &cs, 4, Some(&c.utterances[1]), &mut rng).unwrap();
        assert!(out.frames.bit_eq(&c.utterances[0].frames));
        assert!(out.mask.iter().all(|&m| !m));
        assert_eq!(out.mask.len(), c.utterances[0].frames.shape()[0]);
    }

    #[test]
    fn zero_fraction_with_spans_rejected() {
        let cs = CorruptionSpec { fraction: 0.0, spans: 1, ..CorruptionSpec::default() };
        assert!(cs.validate().is_err());
    }

    #[test]
    fn full_fraction_hits_every_frame() {
        let c = generate_corpus(&small()).unwrap();
        for kind in [CorruptionKind::NoiseBurst, CorruptionKind::Interference] {
            let cs = CorruptionSpec { kind, fraction: 1.0, spans: 3, burst_sigma: None };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let out = corrupt(&c.utterances[2], &cs, 4, Some(&c.utterances[3]), &mut rng).unwrap();
            assert!(out.mask.iter().all(|&m| m));
            assert_eq!(out.target, c.utterances[2].target);
        }
    }

    #[test]
    fn interference_copies_off_grid() {
        let c = generate_corpus(&small()).unwrap();
        let (u, other) = (&c.utterances[0], &c.utterances[1]);
        let cs = CorruptionSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = corrupt(u, &cs, 4, Some(other), &mut rng).unwrap();
        let first = out.mask.iter().position(|&m| m).unwrap();
        let src = (0..other.frames.shape()[0]).find(|&f| other.frames.row(f) == out.frames.row(first)).unwrap();
        assert_ne!(src % 4, first % 4);
    }

    #[test]
    fn probe_truth_windows() {
        assert_eq!(frame_mask_to_probe_truth(&[false; 8], 4, 4).unwrap(), vec![false; 4]);
        let mut m = vec![false; 12];
        m[5] = true;
        assert_eq!(frame_mask_to_probe_truth(&m, 4, 5).unwrap(), vec![false, true, false, false, false]);
        assert!(frame_mask_to_probe_truth(&[false; 7], 4, 4).is_err());
        assert!(frame_mask_to_probe_truth(&[false; 20], 4, 4).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let c = generate_corpus(&small()).unwrap();
        let cc = corrupt_corpus(&c, &CorruptionSpec::default(), 4).unwrap();
        let back = parse_corpus(&corpus_to_string(&cc)).unwrap();
        assert!(back.bit_eq(&cc));
    }

    #[test]
    fn truncation_names_the_line() {
        let c = generate_corpus(&small()).unwrap();
        let text = corpus_to_string(&c);
        let cut: String = text.lines().take(11).map(|l| format!("{l}\n")).collect();
        match parse_corpus(&cut) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 12),
            other => panic!("expected parse error, got {other:?}"),
        }
        let half = &text[..text.len() - 100];
        assert!(matches!(parse_corpus(half), Err(DataError::Parse { line: 41, .. })));
    }

    #[test]
    fn record_count_mismatch_rejected() {
        let c = generate_corpus(&small()).unwrap();
        let text = corpus_to_string(&c).replacen("records=40", "records=39", 1);
        assert!(matches!(parse_corpus(&text), Err(DataError::Parse { line: 41, .. })));
    }
}
