//! Staged training and the inference routes.
//!
//! Stage 1 trains encoder, channel codec and decoder end to end over a noisy
//! channel. Stage 2 trains the compensating generator against a
//! discriminator with the encoder frozen. Stage 3 trains the probe network
//! and the receiver-side compensator with everything else frozen.
//!
//! Every random draw in a step is keyed by `(seed, stage, step)`, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use ross_core::channel::{transmit, ChannelConfig, ChannelError, ChannelKind};
use ross_core::losses::{
    disc_loss, gen_loss, lsr_ce, probe_comp_loss, probe_net_loss, valid_positions, LossConfig, LossError, PROB_FLOOR,
};
use ross_core::nnblocks::{AdamConfig, AdamState, Bindings, GradStore, NnError, ParamStore};
use ross_core::{Tape, Tensor, Var};
use thiserror::Error;

use crate::data::{corrupt, corrupt_corpus, frame_mask_to_probe_truth, Corpus, CorruptionSpec, DataError, Utterance};
use crate::seeds::{self, label};
use crate::txmodels::{binarize, ModelError, Net, Networks};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] ross_core::AutodiffError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage {stage} checkpoint missing: {path}")]
    MissingCheckpoint { stage: u8, path: PathBuf },
    #[error("stage {stage} diverged at step {step}: loss {loss}")]
    Diverged { stage: u8, step: usize, loss: f64, last_good: Box<ParamStore> },
    #[error("stage 2 stalled at step {step}: validation MSE {mse:.6} above {limit:.6}")]
    Stalled { step: usize, mse: f64, limit: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const STAGE1_NETS: [Net; 4] = [Net::Encoder, Net::ChannelEncoder, Net::ChannelDecoder, Net::Decoder];
pub const STAGE2_NETS: [Net; 2] = [Net::Generator, Net::Discriminator];
pub const STAGE3_NETS: [Net; 2] = [Net::Probe, Net::Compensator];

/// Where the compensator's probe comes from during stage 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeSource {
    /// Binarised probe-network output.
    Network,
    /// Ground-truth token-slot mask (diagnostic).
    Oracle,
    /// Every position probed (diagnostic).
    AllOnes,
}

impl ProbeSource {
    pub fn name(self) -> &'static str {
        match self {
            ProbeSource::Network => "network",
            ProbeSource::Oracle => "oracle",
            ProbeSource::AllOnes => "all-ones",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [ProbeSource::Network, ProbeSource::Oracle, ProbeSource::AllOnes].into_iter().find(|p| p.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub channel: ChannelKind,
    pub seed: u64,
    /// Generator updates per discriminator update.
    pub k_g: usize,
    pub loss: LossConfig,
    pub corruption: CorruptionSpec,
    /// Target positions within this distance of a probed row enter the
    /// compensator loss.
    pub probe_loss_window: usize,
    pub probe_source: ProbeSource,
    /// Stage-2 validation interval in steps.
    pub eval_every: usize,
    /// Evaluations without improvement before the stall guard fires; 0
    /// disables it.
    pub stall_patience: usize,
    /// The guard only fires while validation MSE exceeds this share of the
    /// untrained-generator MSE.
    pub stall_ratio: f64,
    /// Stage-2 validation utterances.
    pub valid_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 2000,
            adam: AdamConfig::default(),
            snr_min_db: 0.0,
            snr_max_db: 12.0,
            channel: ChannelKind::Awgn,
            seed: 1,
            k_g: 1,
            loss: LossConfig::default(),
            corruption: CorruptionSpec::default(),
            probe_loss_window: 1,
            probe_source: ProbeSource::Network,
            eval_every: 250,
            stall_patience: 0,
            stall_ratio: 0.5,
            valid_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.snr_min_db.is_finite() && self.snr_max_db.is_finite() && self.snr_min_db <= self.snr_max_db) {
            return err(format!("SNR range [{}, {}] is empty", self.snr_min_db, self.snr_max_db));
        }
        if self.k_g == 0 {
            return err("k_g must be at least 1".into());
        }
        if self.eval_every == 0 {
            return err("eval_every must be positive".into());
        }
        self.loss.validate()?;
        self.corruption.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: u8,
    pub name: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Trained networks plus optimiser state; the stage checkpoint.
    pub checkpoint: ParamStore,
    pub losses: Vec<LossRecord>,
    pub metrics: BTreeMap<&'static str, f64>,
    pub warnings: Vec<String>,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,stage,loss_name,value\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.stage, r.name, r.value);
    }
    s
}

pub fn write_loss_csv(records: &[LossRecord], path: impl AsRef<Path>) -> Result<(), PipelineError> {
    std::fs::write(path, loss_csv(records))?;
    Ok(())
}

fn opt_prefix(stage: u8, part: &str) -> String {
    format!("opt{stage}{part}.")
}

/// Network parameters of `nets` inside `store`.
pub fn select(store: &ParamStore, nets: &[Net]) -> Result<ParamStore, PipelineError> {
    let mut out = ParamStore::new(store.seed());
    for &n in nets {
        let part = n.slice(store);
        if part.is_empty() {
            return Err(PipelineError::Config(format!("checkpoint has no '{}' parameters", n.prefix())));
        }
        out.merge(&part)?;
    }
    Ok(out)
}

fn batch_indices(seed: u64, stage: u8, step: usize, n: usize, b: usize) -> Vec<usize> {
    let mut rng = seeds::rng(seed, &[label::BATCH, stage as u64, step as u64]);
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn draw_snr(cfg: &TrainConfig, stage: u8, step: usize) -> f64 {
    if cfg.snr_min_db == cfg.snr_max_db {
        return cfg.snr_min_db;
    }
    let mut rng = seeds::rng(cfg.seed, &[label::SNR, stage as u64, step as u64]);
    rng.random_range(cfg.snr_min_db..=cfg.snr_max_db)
}

fn step_channel(cfg: &TrainConfig, stage: u8, step: usize) -> ChannelConfig {
    ChannelConfig::new(cfg.channel, draw_snr(cfg, stage, step), seeds::derive(cfg.seed, &[label::CHANNEL, stage as u64, step as u64]))
}

/// Corrupted copy of `corpus[i]` for one training draw.
fn training_pair<'a>(
    corpus: &'a Corpus,
    cspec: &CorruptionSpec,
    seed: u64,
    stage: u8,
    step: usize,
    slot: usize,
    i: usize,
) -> Result<(&'a Utterance, Utterance), PipelineError> {
    let mut rng = seeds::rng(seed, &[label::CORRUPT, stage as u64, step as u64, slot as u64]);
    let n = corpus.len();
    let clean = &corpus.utterances[i];
    let other = (n > 1).then(|| &corpus.utterances[(i + 1 + rng.random_range(0..n - 1)) % n]);
    let bad = corrupt(clean, cspec, corpus.spec.frames_per_token, other, &mut rng)?;
    Ok((clean, bad))
}

/// Every parameter of `store` gets an entry, zero where nothing arrived.
fn zero_fill(grads: &mut GradStore, store: &ParamStore) {
    for (name, t) in store.iter() {
        if grads.get(name).is_none() {
            grads.insert(name.clone(), vec![0.0; t.numel()]);
        }
    }
}

/// `−mean log p(target)` over valid positions, from a probability matrix.
pub fn plain_ce(probs: &Tensor, target: &[usize]) -> f64 {
    let e = probs.shape()[1];
    let valid = valid_positions(target);
    let n = valid.iter().filter(|&&v| v).count().max(1);
    let s: f64 = (0..target.len()).filter(|&i| valid[i]).map(|i| -probs.data()[i * e + target[i]].max(PROB_FLOOR).ln()).sum();
    s / n as f64
}

fn check_nonempty(corpus: &Corpus) -> Result<(), PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::Config("training corpus is empty".into()));
    }
    Ok(())
}

// ---- stage 1 ---------------------------------------------------------------

/// Encoder → channel encoder → channel → channel decoder → teacher-forced
/// decoder. Returns the distributions.
pub fn link_forward(
    nets: &Networks,
    tape: &mut Tape,
    p: &Bindings,
    frames: &Tensor,
    ch: &ChannelConfig,
    block: u64,
    teacher: &[usize],
) -> Result<Var, PipelineError> {
    let x = tape.constant(frames.clone());
    let f = nets.encoder.forward(tape, p, x)?;
    let s = nets.chenc.forward(tape, p, f)?;
    let (y, _) = transmit(tape, s, ch, block)?;
    let fh = nets.chdec.forward(tape, p, y)?;
    Ok(nets.decoder.forward(tape, p, fh, teacher)?)
}

pub fn train_stage1(
    nets: &Networks,
    cfg: &TrainConfig,
    corpus: &Corpus,
    resume: Option<&ParamStore>,
) -> Result<TrainOutcome, PipelineError> {
    const STAGE: u8 = 1;
    cfg.validate()?;
    check_nonempty(corpus)?;
    let opt_name = opt_prefix(STAGE, "");
    let (mut params, mut opt) = match resume {
        Some(ck) => (select(ck, &STAGE1_NETS)?, AdamState::import(cfg.adam, ck, &opt_name)?),
        None => (nets.init(&STAGE1_NETS, seeds::derive(cfg.seed, &[label::INIT, 1]))?, AdamState::new(cfg.adam)),
    };
    let start = opt.step_count() as usize;
    let mut losses = Vec::new();
    let bsz = cfg.batch_size as f64;
    for step in start..cfg.steps {
        let ch = step_channel(cfg, STAGE, step);
        let mut grads = GradStore::new();
        let (mut total, mut ce) = (0.0, 0.0);
        for (k, i) in batch_indices(cfg.seed, STAGE, step, corpus.len(), cfg.batch_size).into_iter().enumerate() {
            let u = &corpus.utterances[i];
            let mut tape = Tape::new();
            let b = Bindings::of(&mut tape, &params, true);
            let probs = link_forward(nets, &mut tape, &b, &u.frames, &ch, k as u64, &u.teacher_input())?;
            let out = lsr_ce(&mut tape, probs, &u.target, &cfg.loss)?;
            let v = tape.value(out.loss).item();
            if !v.is_finite() {
                return Err(diverged(STAGE, step, v, &params, &opt, &opt_name));
            }
            tape.backward(out.loss)?;
            grads.merge(&b.grads_for(&tape, &params));
            total += v;
            ce += plain_ce(tape.value(probs), &u.target);
        }
        grads.scale(1.0 / bsz);
        losses.push(LossRecord { step, stage: STAGE, name: "lsr_ce", value: total / bsz });
        losses.push(LossRecord { step, stage: STAGE, name: "ce", value: ce / bsz });
        opt.step(&mut params, &mut grads)?;
    }
    let checkpoint = with_optimiser(params, &[(&opt, opt_name.as_str())])?;
    Ok(TrainOutcome { checkpoint, losses, metrics: BTreeMap::new(), warnings: Vec::new() })
}

fn with_optimiser(mut params: ParamStore, opts: &[(&AdamState, &str)]) -> Result<ParamStore, PipelineError> {
    for (o, prefix) in opts {
        params.merge(&o.export(prefix)?)?;
    }
    Ok(params)
}

fn diverged(stage: u8, step: usize, loss: f64, params: &ParamStore, opt: &AdamState, prefix: &str) -> PipelineError {
    let last_good = with_optimiser(params.clone(), &[(opt, prefix)]).unwrap_or_else(|_| params.clone());
    PipelineError::Diverged { stage, step, loss, last_good: Box::new(last_good) }
}

// ---- stage 2 ---------------------------------------------------------------

/// Clean-speech features `F` from the frozen encoder.
pub fn encode(nets: &Networks, enc: &ParamStore, frames: &Tensor) -> Result<Tensor, PipelineError> {
    let mut tape = Tape::new();
    let b = Bindings::of(&mut tape, enc, false);
    let x = tape.constant(frames.clone());
    let f = nets.encoder.forward(&mut tape, &b, x)?;
    Ok(tape.value(f).clone())
}

/// `(F̃, Ĩ)` from a frozen generator.
pub fn generate(nets: &Networks, gen: &ParamStore, frames: &Tensor) -> Result<(Tensor, Tensor), PipelineError> {
    let mut tape = Tape::new();
    let b = Bindings::of(&mut tape, gen, false);
    let x = tape.constant(frames.clone());
    let (f, i) = nets.generator.forward(&mut tape, &b, x)?;
    Ok((tape.value(f).clone(), tape.value(i).clone()))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
}

/// Clean/corrupted validation pairs with the clean features.
pub struct ValidationSet {
    pub clean: Corpus,
    pub corrupted: Corpus,
    pub features: Vec<Tensor>,
}

impl ValidationSet {
    pub fn new(nets: &Networks, enc: &ParamStore, clean: &Corpus, cspec: &CorruptionSpec, seed: u64) -> Result<Self, PipelineError> {
        let corrupted = corrupt_corpus(clean, cspec, seed)?;
        let features = clean.utterances.iter().map(|u| encode(nets, enc, &u.frames)).collect::<Result<_, _>>()?;
        Ok(Self { clean: clean.clone(), corrupted, features })
    }
}

/// Mean `MSE(F, F̃)` and mean discriminator scores on real and generated
/// features.
pub fn gan_report(nets: &Networks, gen_disc: &ParamStore, valid: &ValidationSet) -> Result<(f64, f64, f64), PipelineError> {
    let (mut m, mut dr, mut df) = (0.0, 0.0, 0.0);
    for (u, f) in valid.corrupted.utterances.iter().zip(&valid.features) {
        let mut tape = Tape::new();
        let b = Bindings::of(&mut tape, gen_disc, false);
        let x = tape.constant(u.frames.clone());
        let (ft, _) = nets.generator.forward(&mut tape, &b, x)?;
        let fr = tape.constant(f.clone());
        let sr = nets.discriminator.forward(&mut tape, &b, fr)?;
        let sf = nets.discriminator.forward(&mut tape, &b, ft)?;
        m += mse(f, tape.value(ft));
        dr += tape.value(sr).item();
        df += tape.value(sf).item();
    }
    let n = valid.corrupted.len().max(1) as f64;
    Ok((m / n, dr / n, df / n))
}

pub fn train_stage2(
    nets: &Networks,
    cfg: &TrainConfig,
    corpus: &Corpus,
    stage1: &ParamStore,
    valid: &Corpus,
    resume: Option<&ParamStore>,
) -> Result<TrainOutcome, PipelineError> {
    const STAGE: u8 = 2;
    cfg.validate()?;
    check_nonempty(corpus)?;
    let enc = select(stage1, &[Net::Encoder])?;
    let (pg, pd) = (opt_prefix(STAGE, "g"), opt_prefix(STAGE, "d"));
    let (mut gen, mut disc, mut opt_g, mut opt_d) = match resume {
        Some(ck) => (
            select(ck, &[Net::Generator])?,
            select(ck, &[Net::Discriminator])?,
            AdamState::import(cfg.adam, ck, &pg)?,
            AdamState::import(cfg.adam, ck, &pd)?,
        ),
        None => {
            let init = nets.init(&STAGE2_NETS, seeds::derive(cfg.seed, &[label::INIT, 2]))?;
            (
                select(&init, &[Net::Generator])?,
                select(&init, &[Net::Discriminator])?,
                AdamState::new(cfg.adam),
                AdamState::new(cfg.adam),
            )
        }
    };
    let features: Vec<Tensor> = corpus.utterances.iter().map(|u| encode(nets, &enc, &u.frames)).collect::<Result<_, _>>()?;
    let vset = ValidationSet::new(nets, &enc, valid, &cfg.corruption, seeds::derive(cfg.seed, &[label::EVAL, 2]))?;

    let merged = |g: &ParamStore, d: &ParamStore| -> Result<ParamStore, PipelineError> {
        let mut m = g.clone();
        m.merge(d)?;
        Ok(m)
    };
    let untrained = nets.init::<f64>(&STAGE2_NETS, seeds::derive(cfg.seed, &[label::INIT, 2]))?;
    let (baseline, _, _) = gan_report(nets, &untrained, &vset)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("baseline_mse", baseline);

    let mut losses = Vec::new();
    let (mut best, mut since_best) = (f64::INFINITY, 0);
    let bsz = cfg.batch_size as f64;
    let start = opt_d.step_count() as usize;
    for step in start..cfg.steps {
        let idx = batch_indices(cfg.seed, STAGE, step, corpus.len(), cfg.batch_size);
        let pairs: Vec<(usize, Utterance)> = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| training_pair(corpus, &cfg.corruption, cfg.seed, STAGE, step, slot, i).map(|(_, bad)| (i, bad)))
            .collect::<Result<_, _>>()?;

        // discriminator
        let mut grads = GradStore::new();
        let (mut dl, mut dr, mut df) = (0.0, 0.0, 0.0);
        for (i, bad) in &pairs {
            let mut tape = Tape::new();
            let bg = Bindings::of(&mut tape, &gen, false);
            let x = tape.constant(bad.frames.clone());
            let (ft, _) = nets.generator.forward(&mut tape, &bg, x)?;
            let ft = tape.constant(tape.value(ft).clone());
            let mut bd = Bindings::new();
            bd.bind(&mut tape, &disc, true);
            let fr = tape.constant(features[*i].clone());
            let sr = nets.discriminator.forward(&mut tape, &bd, fr)?;
            let sf = nets.discriminator.forward(&mut tape, &bd, ft)?;
            let l = disc_loss(&mut tape, sr, sf)?;
            let v = tape.value(l).item();
            if !v.is_finite() {
                return Err(diverged(STAGE, step, v, &merged(&gen, &disc)?, &opt_d, &pd));
            }
            dr += tape.value(sr).item();
            df += tape.value(sf).item();
            dl += v;
            tape.backward(l)?;
            grads.merge(&bd.grads_for(&tape, &disc));
        }
        grads.scale(1.0 / bsz);
        opt_d.step(&mut disc, &mut grads)?;
        losses.push(LossRecord { step, stage: STAGE, name: "disc_loss", value: dl / bsz });
        losses.push(LossRecord { step, stage: STAGE, name: "d_real", value: dr / bsz });
        losses.push(LossRecord { step, stage: STAGE, name: "d_fake", value: df / bsz });

        // generator
        for _ in 0..cfg.k_g {
            let mut grads = GradStore::new();
            let (mut gl, mut ms) = (0.0, 0.0);
            for (i, bad) in &pairs {
                let mut tape = Tape::new();
                let bg = Bindings::of(&mut tape, &gen, true);
                let mut bd = Bindings::new();
                bd.bind(&mut tape, &disc, false);
                let x = tape.constant(bad.frames.clone());
                let (ft, _) = nets.generator.forward(&mut tape, &bg, x)?;
                let sf = nets.discriminator.forward(&mut tape, &bd, ft)?;
                let fr = tape.constant(features[*i].clone());
                let l = gen_loss(&mut tape, fr, ft, sf, &cfg.loss)?;
                let v = tape.value(l).item();
                if !v.is_finite() {
                    return Err(diverged(STAGE, step, v, &merged(&gen, &disc)?, &opt_g, &pg));
                }
                gl += v;
                ms += mse(&features[*i], tape.value(ft));
                tape.backward(l)?;
                grads.merge(&bg.grads_for(&tape, &gen));
            }
            grads.scale(1.0 / bsz);
            opt_g.step(&mut gen, &mut grads)?;
            losses.push(LossRecord { step, stage: STAGE, name: "gen_loss", value: gl / bsz });
            losses.push(LossRecord { step, stage: STAGE, name: "mse", value: ms / bsz });
        }

        if (step + 1) % cfg.eval_every == 0 && cfg.stall_patience > 0 {
            let (m, _, _) = gan_report(nets, &merged(&gen, &disc)?, &vset)?;
            losses.push(LossRecord { step, stage: STAGE, name: "valid_mse", value: m });
            if m < best {
                best = m;
                since_best = 0;
            } else {
                since_best += 1;
            }
            let limit = cfg.stall_ratio * baseline;
            if since_best >= cfg.stall_patience && m > limit {
                return Err(PipelineError::Stalled { step, mse: m, limit });
            }
        }
    }
    let both = merged(&gen, &disc)?;
    let (m, dr, df) = gan_report(nets, &both, &vset)?;
    metrics.insert("valid_mse", m);
    metrics.insert("d_real", dr);
    metrics.insert("d_fake", df);
    let checkpoint = with_optimiser(both, &[(&opt_g, pg.as_str()), (&opt_d, pd.as_str())])?;
    Ok(TrainOutcome { checkpoint, losses, metrics, warnings: Vec::new() })
}

// ---- stage 3 ---------------------------------------------------------------

fn row_norms(t: &Tensor) -> Vec<f64> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// `i_l = ‖I_l − Ĩ_l‖` and `ĩ_l = ‖Ĩ_l‖`.
pub fn probe_targets(i: &Tensor, it: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let diff = Tensor::new(i.shape().to_vec(), i.data().iter().zip(it.data()).map(|(a, b)| a - b).collect()).expect("same shape");
    (row_norms(&diff), row_norms(it))
}

/// Sets every position within `w` of a set position.
pub fn dilate(mask: &[bool], w: usize) -> Vec<bool> {
    let n = mask.len();
    (0..n).map(|j| (j.saturating_sub(w)..(j + w + 1).min(n)).any(|k| mask[k])).collect()
}

/// Probe values `c` for one Ĩ.
pub fn probe_values(nets: &Networks, probe: &ParamStore, it: &Tensor) -> Result<Vec<f64>, PipelineError> {
    let mut tape = Tape::new();
    let b = Bindings::of(&mut tape, probe, false);
    let x = tape.constant(it.clone());
    let c = nets.probe.forward(&mut tape, &b, x)?;
    Ok(tape.value(c).data().to_vec())
}

/// Sum of the compensator loss for one utterance; `comp` trainable when
/// `grads` is given.
#[allow(clippy::too_many_arguments)]
fn comp_pass(
    nets: &Networks,
    frozen: &ParamStore,
    comp: &ParamStore,
    ft: &Tensor,
    probe: &[bool],
    loss_mask: &[bool],
    target: &[usize],
    teacher: &[usize],
    ch: &ChannelConfig,
    block: u64,
    grads: Option<&mut GradStore>,
) -> Result<f64, PipelineError> {
    let mut tape = Tape::new();
    let bf = Bindings::of(&mut tape, frozen, false);
    let mut bc = Bindings::new();
    bc.bind(&mut tape, comp, grads.is_some());
    let x = tape.constant(ft.clone());
    let s = nets.chenc.forward(&mut tape, &bf, x)?;
    let (y, _) = transmit(&mut tape, s, ch, block)?;
    let fh = nets.chdec.forward(&mut tape, &bf, y)?;
    let fc = nets.compensator.forward(&mut tape, &bc, fh, probe)?;
    let probs = nets.decoder.forward(&mut tape, &bf, fc, teacher)?;
    let valid = valid_positions(target);
    let mask: Vec<bool> = loss_mask.iter().zip(&valid).map(|(&a, &b)| a && b).collect();
    let out = probe_comp_loss(&mut tape, probs, target, &mask)?;
    let v = tape.value(out.loss).item();
    if let Some(g) = grads {
        if out.positions > 0 {
            tape.backward(out.loss)?;
            g.merge(&bc.grads_for(&tape, comp));
        }
    }
    Ok(v)
}

pub fn train_stage3(
    nets: &Networks,
    cfg: &TrainConfig,
    corpus: &Corpus,
    stage1: &ParamStore,
    stage2: &ParamStore,
    resume: Option<&ParamStore>,
) -> Result<TrainOutcome, PipelineError> {
    const STAGE: u8 = 3;
    cfg.validate()?;
    check_nonempty(corpus)?;
    let gen = select(stage2, &[Net::Generator])?;
    let frozen = select(stage1, &[Net::ChannelEncoder, Net::ChannelDecoder, Net::Decoder])?;
    let (pp, pc) = (opt_prefix(STAGE, "p"), opt_prefix(STAGE, "c"));
    let (mut probe, mut comp, mut opt_p, mut opt_c) = match resume {
        Some(ck) => (
            select(ck, &[Net::Probe])?,
            select(ck, &[Net::Compensator])?,
            AdamState::import(cfg.adam, ck, &pp)?,
            AdamState::import(cfg.adam, ck, &pc)?,
        ),
        None => {
            let init = nets.init(&STAGE3_NETS, seeds::derive(cfg.seed, &[label::INIT, 3]))?;
            (
                select(&init, &[Net::Probe])?,
                select(&init, &[Net::Compensator])?,
                AdamState::new(cfg.adam),
                AdamState::new(cfg.adam),
            )
        }
    };
    let clean_inter: Vec<Tensor> = corpus
        .utterances
        .iter()
        .map(|u| {
            let mut tape = Tape::new();
            let b = Bindings::of(&mut tape, &gen, false);
            let x = tape.constant(u.frames.clone());
            let i = nets.generator.intermediate(&mut tape, &b, x)?;
            Ok(tape.value(i).clone())
        })
        .collect::<Result<_, PipelineError>>()?;

    let (l, r) = (nets.cfg.max_target_len, corpus.spec.frames_per_token);
    let mut losses = Vec::new();
    let mut warnings = Vec::new();
    let (mut epoch_seen, mut epoch_ones) = (0usize, 0usize);
    let bsz = cfg.batch_size as f64;
    let start = opt_p.step_count() as usize;
    for step in start..cfg.steps {
        let ch = step_channel(cfg, STAGE, step);
        let (mut gp, mut gc) = (GradStore::new(), GradStore::new());
        let (mut pl, mut cl, mut ones) = (0.0, 0.0, 0usize);
        for (slot, i) in batch_indices(cfg.seed, STAGE, step, corpus.len(), cfg.batch_size).into_iter().enumerate() {
            let (clean, bad) = training_pair(corpus, &cfg.corruption, cfg.seed, STAGE, step, slot, i)?;
            let (ft, it) = generate(nets, &gen, &bad.frames)?;
            let (iv, itv) = probe_targets(&clean_inter[i], &it);

            let mut tape = Tape::new();
            let b = Bindings::of(&mut tape, &probe, true);
            let x = tape.constant(it.clone());
            let c = nets.probe.forward(&mut tape, &b, x)?;
            let ivar = tape.constant(Tensor::new([l], iv)?);
            let itvar = tape.constant(Tensor::new([l], itv)?);
            let lp = probe_net_loss(&mut tape, ivar, itvar, c)?;
            let v = tape.value(lp).item();
            if !v.is_finite() {
                return Err(diverged(STAGE, step, v, &probe, &opt_p, &pp));
            }
            pl += v;
            tape.backward(lp)?;
            gp.merge(&b.grads_for(&tape, &probe));

            let cmask = match cfg.probe_source {
                ProbeSource::Network => binarize(tape.value(c).data()),
                ProbeSource::Oracle => frame_mask_to_probe_truth(&bad.mask, r, l)?,
                ProbeSource::AllOnes => vec![true; l],
            };
            ones += cmask.iter().filter(|&&m| m).count();
            let loss_mask = dilate(&cmask, cfg.probe_loss_window);
            let v = comp_pass(
                nets,
                &frozen,
                &comp,
                &ft,
                &cmask,
                &loss_mask,
                &clean.target,
                &clean.teacher_input(),
                &ch,
                slot as u64,
                Some(&mut gc),
            )?;
            if !v.is_finite() {
                return Err(diverged(STAGE, step, v, &comp, &opt_c, &pc));
            }
            cl += v;
        }
        zero_fill(&mut gc, &comp);
        gp.scale(1.0 / bsz);
        gc.scale(1.0 / bsz);
        opt_p.step(&mut probe, &mut gp)?;
        opt_c.step(&mut comp, &mut gc)?;
        losses.push(LossRecord { step, stage: STAGE, name: "probe_net_loss", value: pl / bsz });
        losses.push(LossRecord { step, stage: STAGE, name: "probe_comp_loss", value: cl / bsz });
        losses.push(LossRecord { step, stage: STAGE, name: "probe_rate", value: ones as f64 / (bsz * l as f64) });

        epoch_seen += cfg.batch_size;
        epoch_ones += ones;
        if epoch_seen >= corpus.len() {
            if epoch_ones == 0 {
                warnings.push(format!("step {step}: probe produced no positive position over a full epoch"));
            }
            epoch_seen = 0;
            epoch_ones = 0;
        }
    }
    let mut both = probe;
    both.merge(&comp)?;
    let checkpoint = with_optimiser(both, &[(&opt_p, pp.as_str()), (&opt_c, pc.as_str())])?;
    Ok(TrainOutcome { checkpoint, losses, metrics: BTreeMap::new(), warnings })
}

/// Mean stage-3 compensator loss over `valid` with the probe taken from
/// `source`; no parameter changes.
pub fn comp_loss_report(
    bundle: &Bundle,
    valid: &Corpus,
    source: ProbeSource,
    window: usize,
    ch: &ChannelConfig,
) -> Result<f64, PipelineError> {
    let nets = &bundle.nets;
    let (l, r) = (nets.cfg.max_target_len, valid.spec.frames_per_token);
    let frozen = bundle.slices(&[Net::ChannelEncoder, Net::ChannelDecoder, Net::Decoder])?;
    let mut total = 0.0;
    for (k, u) in valid.utterances.iter().enumerate() {
        let (ft, it) = generate(nets, bundle.slice(Net::Generator), &u.frames)?;
        let cmask = match source {
            ProbeSource::Network => binarize(&probe_values(nets, bundle.slice(Net::Probe), &it)?),
            ProbeSource::Oracle => frame_mask_to_probe_truth(&u.mask, r, l)?,
            ProbeSource::AllOnes => vec![true; l],
        };
        let loss_mask = dilate(&cmask, window);
        total += comp_pass(
            nets,
            &frozen,
            bundle.slice(Net::Compensator),
            &ft,
            &cmask,
            &loss_mask,
            &u.target,
            &u.teacher_input(),
            ch,
            k as u64,
            None,
        )?;
    }
    Ok(total / valid.len().max(1) as f64)
}

// ---- inference ---------------------------------------------------------------

/// Trained parameters of every available stage, split per network.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub nets: Networks,
    slices: BTreeMap<Net, ParamStore>,
}

impl Bundle {
    /// Network parameters from stage checkpoints; optimiser state is
    /// dropped. Later stages may be absent.
    pub fn new(nets: &Networks, stages: &[&ParamStore]) -> Result<Self, PipelineError> {
        let mut slices = BTreeMap::new();
        for ck in stages {
            for n in Net::ALL {
                let part = n.slice(ck);
                if !part.is_empty() {
                    slices.insert(n, part);
                }
            }
        }
        for n in STAGE1_NETS {
            if !slices.contains_key(&n) {
                return Err(PipelineError::Config(format!("bundle lacks '{}' parameters", n.prefix())));
            }
        }
        Ok(Self { nets: nets.clone(), slices })
    }

    /// Loads stage checkpoints from disk; a missing file is reported with
    /// its stage.
    pub fn load(nets: &Networks, paths: &[(u8, &Path)]) -> Result<Self, PipelineError> {
        let mut stores = Vec::new();
        for &(stage, p) in paths {
            if !p.exists() {
                return Err(PipelineError::MissingCheckpoint { stage, path: p.to_path_buf() });
            }
            stores.push(ParamStore::load(p)?);
        }
        let refs: Vec<&ParamStore> = stores.iter().collect();
        Self::new(nets, &refs)
    }

    pub fn has(&self, net: Net) -> bool {
        self.slices.contains_key(&net)
    }

    /// Parameters of one network; empty if that stage was not loaded.
    pub fn slice(&self, net: Net) -> &ParamStore {
        static EMPTY: std::sync::OnceLock<ParamStore> = std::sync::OnceLock::new();
        self.slices.get(&net).unwrap_or_else(|| EMPTY.get_or_init(|| ParamStore::new(0)))
    }

    pub fn slices(&self, nets: &[Net]) -> Result<ParamStore, PipelineError> {
        let mut out = ParamStore::new(0);
        for &n in nets {
            if !self.has(n) {
                let stage = if STAGE2_NETS.contains(&n) { 2 } else if STAGE3_NETS.contains(&n) { 3 } else { 1 };
                return Err(PipelineError::MissingCheckpoint { stage, path: PathBuf::from(n.prefix()) });
            }
            out.merge(self.slice(n))?;
        }
        Ok(out)
    }
}

/// Which transmitter and receiver path to run.
#[derive(Clone, Debug, PartialEq)]
pub enum Route {
    /// Stage-1 link: clean encoder, no compensation.
    DeepSc,
    /// Generator features, compensator bypassed (`C ≡ 0`).
    GeneratorOnly,
    /// Generator, probe network and compensator.
    Full,
    /// Generator and compensator with a supplied probe.
    FullWithProbe(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub tokens: Vec<usize>,
    pub probe: Vec<bool>,
}

/// Channel encoder → channel → channel decoder on a feature matrix.
pub fn over_the_air(bundle: &Bundle, f: &Tensor, ch: &ChannelConfig, block: u64) -> Result<Tensor, PipelineError> {
    let mut tape = Tape::new();
    let b = Bindings::of(&mut tape, bundle.slice(Net::ChannelEncoder), false);
    let mut b2 = b.clone();
    b2.bind(&mut tape, bundle.slice(Net::ChannelDecoder), false);
    let x = tape.constant(f.clone());
    let s = bundle.nets.chenc.forward(&mut tape, &b2, x)?;
    let (y, _) = transmit(&mut tape, s, ch, block)?;
    let fh = bundle.nets.chdec.forward(&mut tape, &b2, y)?;
    Ok(tape.value(fh).clone())
}

pub fn infer(bundle: &Bundle, frames: &Tensor, route: &Route, ch: &ChannelConfig, block: u64) -> Result<Inference, PipelineError> {
    let nets = &bundle.nets;
    let l = nets.cfg.max_target_len;
    let (f, probe) = match route {
        Route::DeepSc => (encode(nets, bundle.slice(Net::Encoder), frames)?, vec![false; l]),
        other => {
            if !bundle.has(Net::Generator) {
                return Err(PipelineError::MissingCheckpoint { stage: 2, path: PathBuf::from(Net::Generator.prefix()) });
            }
            let (ft, it) = generate(nets, bundle.slice(Net::Generator), frames)?;
            let probe = match other {
                Route::GeneratorOnly => vec![false; l],
                Route::FullWithProbe(c) => c.clone(),
                _ => {
                    if !bundle.has(Net::Probe) {
                        return Err(PipelineError::MissingCheckpoint { stage: 3, path: PathBuf::from(Net::Probe.prefix()) });
                    }
                    binarize(&probe_values(nets, bundle.slice(Net::Probe), &it)?)
                }
            };
            (ft, probe)
        }
    };
    let mut fh = over_the_air(bundle, &f, ch, block)?;
    if probe.iter().any(|&c| c) {
        if !bundle.has(Net::Compensator) {
            return Err(PipelineError::MissingCheckpoint { stage: 3, path: PathBuf::from(Net::Compensator.prefix()) });
        }
        let mut tape = Tape::new();
        let b = Bindings::of(&mut tape, bundle.slice(Net::Compensator), false);
        let x = tape.constant(fh);
        let y = nets.compensator.forward(&mut tape, &b, x, &probe)?;
        fh = tape.value(y).clone();
    }
    let tokens = nets.decoder.greedy(bundle.slice(Net::Decoder), &fh)?;
    Ok(Inference { tokens, probe })
}

/// Binarised probe against ground-truth slot masks: `(precision, recall,
/// F1)` pooled over all positions of `corrupted`.
pub fn probe_f1(bundle: &Bundle, corrupted: &Corpus) -> Result<(f64, f64, f64), PipelineError> {
    let (l, r) = (bundle.nets.cfg.max_target_len, corrupted.spec.frames_per_token);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for u in &corrupted.utterances {
        let (_, it) = generate(&bundle.nets, bundle.slice(Net::Generator), &u.frames)?;
        let pred = binarize(&probe_values(&bundle.nets, bundle.slice(Net::Probe), &it)?);
        let mask = if u.mask.is_empty() { vec![false; u.frames.shape()[0]] } else { u.mask.clone() };
        let truth = frame_mask_to_probe_truth(&mask, r, l)?;
        for (p, t) in pred.iter().zip(&truth) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok((precision, recall, f1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_window() {
        let m = [false, false, true, false, false];
        assert_eq!(dilate(&m, 0), m.to_vec());
        assert_eq!(dilate(&m, 1), vec![false, true, true, true, false]);
        assert_eq!(dilate(&[true, false, false], 1), vec![true, true, false]);
    }

    #[test]
    fn plain_ce_of_uniform_is_log_e() {
        let p = Tensor::full([3, 4], 0.25);
        assert!((plain_ce(&p, &[3, 2, 0]) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_empty_range() {
        let c = TrainConfig { snr_min_db: 5.0, snr_max_db: 1.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { k_g: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        assert_eq!(batch_indices(3, 1, 10, 100, 8), batch_indices(3, 1, 10, 100, 8));
        assert_ne!(batch_indices(3, 1, 10, 100, 8), batch_indices(3, 1, 11, 100, 8));
    }

    #[test]
    fn csv_layout() {
        let s = loss_csv(&[LossRecord { step: 0, stage: 1, name: "ce", value: 0.5 }]);
        assert_eq!(s, "step,stage,loss_name,value\n0,1,ce,0.5\n");
    }
}
