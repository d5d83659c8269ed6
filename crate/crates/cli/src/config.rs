//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Every key has a default, so an empty file is a complete configuration.
//! A file or override naming a key outside the table is rejected with the
//! list of valid keys. Keys in `stage1`..`stage3` left empty inherit the
//! matching `train` key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ross_core::channel::ChannelKind;
use ross_core::losses::{LossConfig, SmoothingRule};
use ross_core::nnblocks::AdamConfig;
use ross_s2t::data::{CorpusSpec, CorruptionKind, CorruptionSpec};
use ross_s2t::eval::{SweepConfig, System};
use ross_s2t::pipeline::{ProbeSource, TrainConfig};
use ross_s2t::txmodels::ModelConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("unknown key `{key}`; valid keys are:\n{valid}")]
    UnknownKey { key: String, valid: String },
    #[error("override `{0}` is not of the form section.key=value")]
    Override(String),
    #[error("{key} = {value:?}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

const TRAIN_KEYS: [(&str, &str); 19] = [
    ("batch_size", "16"),
    ("steps", "2000"),
    ("lr", "0.001"),
    ("beta1", "0.9"),
    ("beta2", "0.98"),
    ("adam_eps", "1e-9"),
    ("snr_min_db", "0"),
    ("snr_max_db", "12"),
    ("channel", "awgn"),
    ("k_g", "1"),
    ("kappa", "0.95"),
    ("xi", "10"),
    ("smoothing", "literal"),
    ("probe_loss_window", "1"),
    ("probe_source", "network"),
    ("eval_every", "250"),
    ("stall_patience", "0"),
    ("stall_ratio", "0.5"),
    ("valid_size", "100"),
];

fn defaults() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("run.out", "out".into());
    put("run.seed", "1".into());

    let d = CorpusSpec::default();
    put("data.src_vocab", d.src_vocab.to_string());
    put("data.tgt_vocab", d.tgt_vocab.to_string());
    put("data.frames_per_token", d.frames_per_token.to_string());
    put("data.frame_dim", d.frame_dim.to_string());
    put("data.sigma_frame", d.sigma_frame.to_string());
    put("data.rule_seed", d.rule_seed.to_string());
    put("data.min_len", d.min_len.to_string());
    put("data.max_len", d.max_len.to_string());
    put("data.max_target_len", d.max_target_len.to_string());
    put("data.successors", d.successors.to_string());
    put("data.train_size", d.size.to_string());
    put("data.valid_size", "100".into());
    put("data.test_size", "200".into());

    let c = CorruptionSpec::default();
    put("corruption.kind", c.kind.name().into());
    put("corruption.fraction", c.fraction.to_string());
    put("corruption.spans", c.spans.to_string());
    put("corruption.burst_sigma", "auto".into());

    let m0 = ModelConfig::default();
    put("model.model_width", m0.model_width.to_string());
    put("model.heads", m0.heads.to_string());
    put("model.ff_width", m0.ff_width.to_string());
    put("model.extractor_kernels", join(&m0.extractor_kernels));
    put("model.extractor_strides", join(&m0.extractor_strides));
    put("model.converter_depth", m0.converter_depth.to_string());
    put("model.converter_conv_depth", m0.converter_conv_depth.to_string());
    put("model.conv_kernel", m0.conv_kernel.to_string());
    put("model.decoder_depth", m0.decoder_depth.to_string());
    put("model.feature_width", m0.feature_width.to_string());
    put("model.channel_hidden", m0.channel_hidden.to_string());
    put("model.symbol_width", m0.symbol_width.to_string());
    put("model.intermediate_width", m0.intermediate_width.to_string());
    put("model.disc_channels", m0.disc_channels.to_string());
    put("model.disc_depth", m0.disc_depth.to_string());
    put("model.probe_hidden", m0.probe_hidden.to_string());
    put("model.comp_channels", m0.comp_channels.to_string());
    put("model.comp_depth", m0.comp_depth.to_string());

    for (k, v) in TRAIN_KEYS {
        put(&format!("train.{k}"), v.into());
        for s in 1..=3 {
            put(&format!("stage{s}.{k}"), String::new());
        }
    }
    put("stage1.steps", "3000".into());
    put("stage1.lr", "0.002".into());
    put("stage2.steps", "1500".into());
    put("stage3.steps", "3000".into());
    put("stage3.lr", "0.002".into());
    put("stage3.channel", "rayleigh".into());

    put("sweep.snrs", "0,3,6,9,12".into());
    put("sweep.channels", "awgn,rayleigh".into());
    put("sweep.systems", System::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));
    put("sweep.corrupt", "true".into());
    put("sweep.limit", "all".into());
    put("sweep.embed_dim", "64".into());
    put("sweep.n_max", "4".into());
    m
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Resolved `section.key → value` table.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: defaults() }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: &str| ConfigError::Syntax { path: origin.into(), line: n + 1, msg: msg.into() };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| syntax("unclosed section header"))?.trim();
                if name.is_empty() {
                    return Err(syntax("empty section name"));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
            let sec = section.as_deref().ok_or_else(|| syntax("key before any [section]"))?;
            cfg.set(&format!("{sec}.{}", k.trim()), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey { key: key.to_string(), valid: self.keys().join("\n") }),
        }
    }

    /// Applies a `section.key=value` override.
    pub fn apply(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
        if !k.contains('.') {
            return Err(ConfigError::Override(spec.to_string()));
        }
        self.set(k.trim(), v.trim())
    }

    pub fn keys(&self) -> Vec<String> {
        self.values.keys().cloned().collect()
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// The table back in file form; parsing it yields the same config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (k, v) in &self.values {
            let (sec, key) = k.split_once('.').expect("keys are section-qualified");
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                current = sec;
            }
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    fn value<T>(&self, key: &str, parse: impl FnOnce(&str) -> Option<T>, what: &str) -> Result<T, ConfigError> {
        let v = self.get(key);
        parse(v).ok_or_else(|| ConfigError::Value { key: key.into(), value: v.into(), msg: format!("expected {what}") })
    }

    fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.value(key, |s| s.parse().ok(), "a non-negative integer")
    }

    fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.value(key, |s| s.parse().ok(), "a non-negative integer")
    }

    fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.value(key, parse_f64, "a number")
    }

    fn list<T>(&self, key: &str, item: impl Fn(&str) -> Option<T>, what: &str) -> Result<Vec<T>, ConfigError> {
        self.value(key, |s| s.split(',').map(|p| item(p.trim())).collect(), what)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("run.out"))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.u64("run.seed")
    }

    /// Training corpus spec; the validation and test splits derive from it.
    pub fn corpus(&self) -> Result<CorpusSpec, ConfigError> {
        Ok(CorpusSpec {
            src_vocab: self.usize("data.src_vocab")?,
            tgt_vocab: self.usize("data.tgt_vocab")?,
            frames_per_token: self.usize("data.frames_per_token")?,
            frame_dim: self.usize("data.frame_dim")?,
            sigma_frame: self.f64("data.sigma_frame")?,
            rule_seed: self.u64("data.rule_seed")?,
            min_len: self.usize("data.min_len")?,
            max_len: self.usize("data.max_len")?,
            max_target_len: self.usize("data.max_target_len")?,
            successors: self.usize("data.successors")?,
            size: self.usize("data.train_size")?,
            seed: self.seed()?,
        })
    }

    pub fn split_sizes(&self) -> Result<(usize, usize), ConfigError> {
        Ok((self.usize("data.valid_size")?, self.usize("data.test_size")?))
    }

    pub fn corruption(&self) -> Result<CorruptionSpec, ConfigError> {
        let burst = match self.get("corruption.burst_sigma") {
            "auto" => None,
            _ => Some(self.f64("corruption.burst_sigma")?),
        };
        Ok(CorruptionSpec {
            kind: self.value("corruption.kind", CorruptionKind::from_name, "noise or interference")?,
            fraction: self.f64("corruption.fraction")?,
            spans: self.usize("corruption.spans")?,
            burst_sigma: burst,
        })
    }

    /// Model widths; vocabulary and length fields follow the data section.
    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let d = self.corpus()?;
        Ok(ModelConfig {
            frame_dim: d.frame_dim,
            frames_per_token: d.frames_per_token,
            src_vocab: d.src_vocab,
            tgt_vocab: d.tgt_vocab,
            max_target_len: d.max_target_len,
            probe_len: d.max_target_len,
            model_width: self.usize("model.model_width")?,
            heads: self.usize("model.heads")?,
            ff_width: self.usize("model.ff_width")?,
            extractor_kernels: self.list("model.extractor_kernels", |s| s.parse().ok(), "comma-separated integers")?,
            extractor_strides: self.list("model.extractor_strides", |s| s.parse().ok(), "comma-separated integers")?,
            converter_depth: self.usize("model.converter_depth")?,
            converter_conv_depth: self.usize("model.converter_conv_depth")?,
            conv_kernel: self.usize("model.conv_kernel")?,
            decoder_depth: self.usize("model.decoder_depth")?,
            feature_width: self.usize("model.feature_width")?,
            channel_hidden: self.usize("model.channel_hidden")?,
            symbol_width: self.usize("model.symbol_width")?,
            intermediate_width: self.usize("model.intermediate_width")?,
            disc_channels: self.usize("model.disc_channels")?,
            disc_depth: self.usize("model.disc_depth")?,
            probe_hidden: self.usize("model.probe_hidden")?,
            comp_channels: self.usize("model.comp_channels")?,
            comp_depth: self.usize("model.comp_depth")?,
        })
    }

    /// Training settings of one stage: `stageN` keys over `train` keys.
    pub fn train(&self, stage: u8) -> Result<TrainConfig, ConfigError> {
        let mut view = self.clone();
        for (k, _) in TRAIN_KEYS {
            let v = self.get(&format!("stage{stage}.{k}"));
            if !v.is_empty() {
                view.values.insert(format!("train.{k}"), v.to_string());
            }
        }
        view.train_section(self.seed()?, self.corruption()?)
    }

    fn train_section(&self, seed: u64, corruption: CorruptionSpec) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            batch_size: self.usize("train.batch_size")?,
            steps: self.usize("train.steps")?,
            adam: AdamConfig {
                lr: self.f64("train.lr")?,
                beta1: self.f64("train.beta1")?,
                beta2: self.f64("train.beta2")?,
                eps: self.f64("train.adam_eps")?,
            },
            snr_min_db: self.f64("train.snr_min_db")?,
            snr_max_db: self.f64("train.snr_max_db")?,
            channel: self.value("train.channel", ChannelKind::from_name, "awgn or rayleigh")?,
            seed,
            k_g: self.usize("train.k_g")?,
            loss: LossConfig {
                kappa: self.f64("train.kappa")?,
                xi: self.f64("train.xi")?,
                smoothing: self.value("train.smoothing", SmoothingRule::from_name, "literal or standard")?,
            },
            corruption,
            probe_loss_window: self.usize("train.probe_loss_window")?,
            probe_source: self.value("train.probe_source", ProbeSource::from_name, "network, oracle or all-ones")?,
            eval_every: self.usize("train.eval_every")?,
            stall_patience: self.usize("train.stall_patience")?,
            stall_ratio: self.f64("train.stall_ratio")?,
            valid_size: self.usize("train.valid_size")?,
        })
    }

    pub fn sweep(&self) -> Result<SweepConfig, ConfigError> {
        let corrupt = self.value("sweep.corrupt", parse_bool, "true or false")?;
        let limit = match self.get("sweep.limit") {
            "all" => None,
            _ => Some(self.usize("sweep.limit")?),
        };
        Ok(SweepConfig {
            snrs: self.list("sweep.snrs", parse_f64, "comma-separated numbers or inf")?,
            channels: self.list("sweep.channels", ChannelKind::from_name, "comma-separated channel names")?,
            systems: self.list("sweep.systems", System::from_name, "comma-separated system names")?,
            corruption: if corrupt { Some(self.corruption()?) } else { None },
            limit,
            seed: self.seed()?,
            embed_dim: self.usize("sweep.embed_dim")?,
            n_max: self.usize("sweep.n_max")?,
        })
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "inf" | "+inf" => Some(f64::INFINITY),
        _ => s.parse().ok().filter(|v: &f64| v.is_finite()),
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}
