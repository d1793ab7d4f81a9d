//! Run configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. A `preset = NAME`
//! line resets every field to that preset before later lines apply. Every
//! key can also be overridden from the command line with `--set key=value`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::decoupled::ExpertKind;
use crate::error::{Error, Result};
use crate::feedback::FeedbackMode;
use crate::joint_loss::{LossType, LossWeights};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub train_annotations: PathBuf,
    pub val_annotations: PathBuf,
    pub feature_dir: PathBuf,
    pub clip_length: f64,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub ema_decay: f64,
    pub feedback_mode: FeedbackMode,
    pub feedback_start_frac: f64,
    pub loss_type: LossType,
    pub loss_aux: bool,
    pub loss_weights: LossWeights,
    pub very_good_label: u8,
    /// Input dims are taken from the data at train time.
    pub model: ModelConfig,
}

pub const PRESETS: [&str; 2] = ["desk", "qvhighlights"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Synthetic-benchmark scale.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            train_annotations: "data/train.jsonl".into(),
            val_annotations: "data/val.jsonl".into(),
            feature_dir: "data/features".into(),
            clip_length: 2.0,
            out_dir: "runs/default".into(),
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            seed: 7,
            eval_every: 5,
            ema_decay: 0.99,
            feedback_mode: FeedbackMode::Mr2Hd,
            feedback_start_frac: 0.5,
            loss_type: LossType::TaskDependent,
            loss_aux: true,
            loss_weights: LossWeights::default(),
            very_good_label: 4,
            model: ModelConfig::default(),
        }
    }

    /// Settings for pre-extracted QVHighlights-style features.
    pub fn qvhighlights() -> Self {
        Self {
            preset: "qvhighlights".into(),
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-4,
            ema_decay: 0.999,
            model: ModelConfig {
                video_dim: 2818,
                text_dim: 512,
                hidden_dim: 256,
                ffn_dim: 1024,
                ..ModelConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "qvhighlights" => Ok(Self::qvhighlights()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected one of {PRESETS:?})"))),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // relative data paths resolve against the config file
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.train_annotations,
                &mut cfg.val_annotations,
                &mut cfg.feature_dir,
                &mut cfg.out_dir,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
        }
        let w = &mut self.loss_weights;
        let m = &mut self.model;
        match key {
            "preset" => {
                *self = Self::preset(value)?;
            }
            "data.train" => self.train_annotations = value.into(),
            "data.val" => self.val_annotations = value.into(),
            "data.features" => self.feature_dir = value.into(),
            "data.clip_length" => self.clip_length = parse(key, value)?,
            "out.dir" => self.out_dir = value.into(),
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "ema.decay" => self.ema_decay = parse(key, value)?,
            "feedback.mode" => self.feedback_mode = parse(key, value)?,
            "feedback.start_frac" => self.feedback_start_frac = parse(key, value)?,
            "loss.type" => self.loss_type = parse(key, value)?,
            "loss.aux" => self.loss_aux = parse(key, value)?,
            "loss.w_l1" => w.l1 = parse(key, value)?,
            "loss.w_giou" => w.giou = parse(key, value)?,
            "loss.w_bce" => w.bce = parse(key, value)?,
            "loss.w_hinge" => w.hinge = parse(key, value)?,
            "loss.w_neg" => w.neg = parse(key, value)?,
            "loss.w_cont" => w.cont = parse(key, value)?,
            "eval.very_good" => self.very_good_label = parse(key, value)?,
            "model.hidden_dim" => m.hidden_dim = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "model.fusion_layers" => m.fusion_layers = parse(key, value)?,
            "experts.mr" => m.mr_expert = parse::<ExpertKind>(key, value)?,
            "experts.hd" => m.hd_expert = parse::<ExpertKind>(key, value)?,
            "experts.shared_layers" => m.shared_layers = parse(key, value)?,
            "mr.num_queries" => m.num_queries = parse(key, value)?,
            "mr.layers" => m.mr_layers = parse(key, value)?,
            "hd.hidden_ratio" => m.hd_hidden_ratio = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema.decay {} outside [0, 1]", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.feedback_start_frac) {
            return bad(format!("feedback.start_frac {} outside [0, 1]", self.feedback_start_frac));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.clip_length > 0.0) {
            return bad("data.clip_length must be positive".into());
        }
        let m = &self.model;
        if m.heads == 0 || m.hidden_dim % m.heads != 0 {
            return bad(format!("model.hidden_dim {} not divisible by model.heads {}", m.hidden_dim, m.heads));
        }
        if m.num_queries == 0 || m.mr_layers == 0 {
            return bad("mr.num_queries and mr.layers must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout {} outside [0, 1)", m.dropout));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let w = &self.loss_weights;
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("data.train", self.train_annotations.display().to_string());
        kv("data.val", self.val_annotations.display().to_string());
        kv("data.features", self.feature_dir.display().to_string());
        kv("data.clip_length", self.clip_length.to_string());
        kv("out.dir", self.out_dir.display().to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("ema.decay", self.ema_decay.to_string());
        kv("feedback.mode", self.feedback_mode.to_string());
        kv("feedback.start_frac", self.feedback_start_frac.to_string());
        kv("loss.type", self.loss_type.to_string());
        kv("loss.aux", self.loss_aux.to_string());
        kv("loss.w_l1", w.l1.to_string());
        kv("loss.w_giou", w.giou.to_string());
        kv("loss.w_bce", w.bce.to_string());
        kv("loss.w_hinge", w.hinge.to_string());
        kv("loss.w_neg", w.neg.to_string());
        kv("loss.w_cont", w.cont.to_string());
        kv("eval.very_good", self.very_good_label.to_string());
        kv("model.hidden_dim", m.hidden_dim.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.ffn_dim", m.ffn_dim.to_string());
        kv("model.dropout", m.dropout.to_string());
        kv("model.fusion_layers", m.fusion_layers.to_string());
        kv("experts.mr", m.mr_expert.to_string());
        kv("experts.hd", m.hd_expert.to_string());
        kv("experts.shared_layers", m.shared_layers.to_string());
        kv("mr.num_queries", m.num_queries.to_string());
        kv("mr.layers", m.mr_layers.to_string());
        kv("hd.hidden_ratio", m.hd_hidden_ratio.to_string());
        s
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
