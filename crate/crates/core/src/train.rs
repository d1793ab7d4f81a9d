//! Training loop, optimizer, parameter averaging, checkpoints and inference.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feature_store::{load_split_with_clip_length, Annotation, PredictionRecord, Sample};
use crate::feedback::{feedback_active, Routing};
use crate::joint_loss::{combine, hd_loss, mr_loss, sample_hinge_pairs, Breakdown, ItemLoss};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{feature_tensor, Model, ModelConfig};
use crate::mr_decoder::{moments_to_seconds, seconds_to_moment};
use crate::nn::ops::to_f64_vec;
use crate::nn::{Ctx, Init, ParamStore};

pub const GAMMA_MR: &str = "loss.gamma_mr";
pub const GAMMA_HD: &str = "loss.gamma_hd";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

/// One annotated video-query pair with features already on the device.
#[derive(Debug, Clone)]
pub struct Item {
    pub annotation: Annotation,
    pub video: Tensor,
    pub text: Tensor,
    /// Ground-truth windows as normalized `(center, width)`.
    pub moments: Vec<(f64, f64)>,
}

impl Item {
    pub fn from_sample(sample: &Sample, dtype: DType, device: &Device) -> Result<Self> {
        let a = &sample.annotation;
        let moments = a
            .relevant_windows
            .iter()
            .map(|w| seconds_to_moment(w[0].max(0.0), w[1].min(a.duration), a.duration))
            .collect();
        Ok(Self {
            annotation: a.clone(),
            video: feature_tensor(&sample.features.video, dtype, device)?,
            text: feature_tensor(&sample.features.text, dtype, device)?,
            moments,
        })
    }

    pub fn num_clips(&self) -> usize {
        self.video.dims()[0]
    }
}

pub fn load_items(annotations: &Path, feature_dir: &Path, clip_length: f64, dtype: DType) -> Result<Vec<Item>> {
    load_split_with_clip_length(annotations, feature_dir, clip_length)?
        .iter()
        .map(|s| Item::from_sample(s, dtype, &Device::Cpu))
        .collect()
}

/// Adam with decoupled weight decay and global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Parameters exempt from weight decay.
pub fn no_decay(name: &str) -> bool {
    name.starts_with("loss.")
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let vars = store.vars();
        let mut present = Vec::with_capacity(vars.len());
        let mut sq = 0.0;
        for (name, var) in &vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                // detached so optimizer state does not keep the graph alive
                present.push((name, var, g.detach()));
            }
        }
        let norm = sq.sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / (norm + 1e-6)
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in present {
            let g = (g * scale)?;
            let m_prev = match self.m.get(name.as_str()) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(name.as_str()) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v_prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let p = var.as_tensor();
            let mut next = (p - (update * self.lr)?)?;
            if !no_decay(name) && self.weight_decay > 0.0 {
                next = (next - (p * (self.lr * self.weight_decay))?)?;
            }
            var.set(&next)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(norm)
    }
}

/// `ema = decay * ema + (1 - decay) * current`, parameter by parameter.
pub fn ema_update(ema: &ParamStore, current: &ParamStore, decay: f64) -> Result<()> {
    for (name, var) in ema.vars() {
        let src = current
            .get(&name)
            .ok_or_else(|| Error::validation(format!("missing parameter {name}")))?;
        if decay == 1.0 {
            continue;
        }
        let next = if decay == 0.0 {
            src.as_tensor().clone()
        } else {
            ((var.as_tensor() * decay)? + (src.as_tensor() * (1.0 - decay))?)?
        };
        var.set(&next)?;
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub routing: Routing,
    pub loss: Breakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_mr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma_hd: Option<f64>,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalReport>,
}

/// A model with its parameter average, optimizer and schedule position.
pub struct Trainer {
    pub config: RunConfig,
    pub store: ParamStore,
    pub model: Model,
    pub ema_store: ParamStore,
    pub ema_model: Model,
    pub optimizer: AdamW,
    /// Epochs completed.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

fn build(config: &ModelConfig, dtype: DType, seed: u64, with_gammas: bool) -> Result<(ParamStore, Model)> {
    let store = ParamStore::new(dtype, seed);
    let model = Model::new(&store.root(), *config)?;
    if with_gammas {
        let p = store.root();
        p.get((), GAMMA_MR, Init::Zeros)?;
        p.get((), GAMMA_HD, Init::Zeros)?;
    }
    Ok((store, model))
}

impl Trainer {
    /// Fresh parameters for inputs of the given widths.
    pub fn new(config: RunConfig, video_dim: usize, text_dim: usize, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut config = config;
        config.model.video_dim = video_dim;
        config.model.text_dim = text_dim;
        let gammas = config.loss_type.has_gammas();
        let (store, model) = build(&config.model, dtype, config.seed, gammas)?;
        let (ema_store, ema_model) = build(&config.model, dtype, config.seed, gammas)?;
        ema_store.copy_from(&store)?;
        let optimizer = AdamW::new(config.learning_rate, config.weight_decay, config.grad_clip);
        Ok(Self {
            config,
            store,
            model,
            ema_store,
            ema_model,
            optimizer,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn for_items(config: RunConfig, items: &[Item], dtype: DType) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::validation("no training items"))?;
        Self::new(config, first.video.dims()[1], first.text.dims()[1], dtype)
    }

    pub fn gammas(&self) -> Option<(Tensor, Tensor)> {
        Some((
            self.store.get(GAMMA_MR)?.as_tensor().clone(),
            self.store.get(GAMMA_HD)?.as_tensor().clone(),
        ))
    }

    pub fn routing_at(&self, epoch: usize) -> Routing {
        feedback_active(epoch, self.config.epochs, self.config.feedback_mode, self.config.feedback_start_frac)
    }

    /// Routing used at inference: the one of the final training epoch.
    pub fn inference_routing(&self) -> Routing {
        self.routing_at(self.config.epochs - 1)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Per-item losses for one forward pass.
    pub fn item_loss(
        &self,
        item: &Item,
        negative_text: &Tensor,
        routing: Routing,
        rng: &mut ChaCha8Rng,
        ctx: &mut Ctx,
    ) -> Result<ItemLoss> {
        let out = self
            .model
            .forward(&item.video, &item.text, item.annotation.duration, routing, ctx)?;
        let labels = &item.annotation.saliency_labels;
        let pairs = sample_hinge_pairs(labels, rng);
        let negative = self.model.saliency(&item.video, negative_text, ctx)?;
        Ok(ItemLoss {
            mr: mr_loss(&out.moments, &item.moments, self.config.loss_aux)?,
            hd: hd_loss(&out.saliency, labels, pairs.as_deref(), Some(&negative))?,
        })
    }

    /// One pass over `items`; returns the mean breakdown and the mean
    /// gradient norm.
    pub fn train_epoch(&mut self, items: &[Item]) -> Result<(Breakdown, f64)> {
        if items.is_empty() {
            return Err(Error::validation("no training items"));
        }
        let epoch = self.epoch;
        let routing = self.routing_at(epoch);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let gammas = self.gammas();
        let mut sums = Breakdown::new();
        let mut norm_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for (step, batch) in batches.iter().enumerate() {
            let mut ctx = Ctx::train(rng.random());
            let mut losses = Vec::with_capacity(batch.len());
            for (k, &i) in batch.iter().enumerate() {
                // the next item in epoch order supplies a mismatched query
                let pos = step * self.config.batch_size + k;
                let other = order[(pos + 1) % order.len()];
                losses.push(self.item_loss(&items[i], &items[other].text, routing, &mut rng, &mut ctx)?);
            }
            let loss = combine(
                &losses,
                self.config.loss_type,
                &self.config.loss_weights,
                gammas.as_ref().map(|(a, b)| (a, b)),
            )?;
            if !loss.breakdown.values().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    breakdown: serde_json::to_string(&loss.breakdown)?,
                });
            }
            let grads = loss.total.backward()?;
            norm_sum += self.optimizer.step(&self.store, &grads)?;
            ema_update(&self.ema_store, &self.store, self.config.ema_decay)?;
            for (k, v) in loss.breakdown {
                *sums.entry(k).or_insert(0.0) += v;
            }
        }
        let n = batches.len() as f64;
        sums.values_mut().for_each(|v| *v /= n);
        self.epoch += 1;
        Ok((sums, norm_sum / n))
    }

    /// Trains for the configured number of epochs, evaluating the averaged
    /// weights on `val` every `eval_every` epochs and after the last one.
    /// Each epoch's record is appended to `log_path` when given.
    pub fn fit(&mut self, train: &[Item], val: &[Item], log_path: Option<&Path>) -> Result<()> {
        let mut sink = match log_path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)
            }
            None => None,
        };
        while self.epoch < self.config.epochs {
            let epoch = self.epoch;
            let routing = self.routing_at(epoch);
            let (loss, grad_norm) = self.train_epoch(train)?;
            let done = epoch + 1;
            let eval = if !val.is_empty() && (done % self.config.eval_every == 0 || done == self.config.epochs) {
                Some(self.evaluate(val)?)
            } else {
                None
            };
            let entry = EpochLog {
                epoch,
                routing,
                gamma_mr: loss.get("gamma_mr").copied(),
                gamma_hd: loss.get("gamma_hd").copied(),
                loss,
                grad_norm,
                eval,
            };
            info!(
                "epoch {epoch} total {:.4} mr {:.4} hd {:.4}{}",
                entry.loss["total"],
                entry.loss["l_mr"],
                entry.loss["l_hd"],
                entry
                    .eval
                    .map(|e| format!(" | R1@0.5 {:.3} mAP {:.3} HD mAP {:.3}", e.mr.r1_050, e.mr.map_avg, e.hd.map))
                    .unwrap_or_default()
            );
            if let (Some(f), Some(p)) = (sink.as_mut(), log_path) {
                writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(p, e))?;
            }
            self.log.push(entry);
        }
        Ok(())
    }

    /// Predictions with the averaged weights.
    pub fn predict(&self, items: &[Item]) -> Result<Vec<PredictionRecord>> {
        predict_with(&self.ema_model, self.inference_routing(), items)
    }

    pub fn evaluate(&self, items: &[Item]) -> Result<EvalReport> {
        let preds = self.predict(items)?;
        let gts: Vec<Annotation> = items.iter().map(|i| i.annotation.clone()).collect();
        evaluate(&preds, &gts, self.config.very_good_label)
    }

    /// Writes parameters, averaged parameters, optimizer state and metadata
    /// to one safetensors file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, var) in self.store.vars() {
            tensors.push((format!("param.{name}"), var.as_tensor().clone()));
        }
        for (name, var) in self.ema_store.vars() {
            tensors.push((format!("ema.{name}"), var.as_tensor().clone()));
        }
        for (name, t) in &self.optimizer.m {
            tensors.push((format!("adam_m.{name}"), t.clone()));
        }
        for (name, t) in &self.optimizer.v {
            tensors.push((format!("adam_v.{name}"), t.clone()));
        }
        let meta = CheckpointMeta {
            config: self.config.to_text(),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            step: self.optimizer.step,
            video_dim: self.config.model.video_dim,
            text_dim: self.config.model.text_dim,
            dtype: format!("{:?}", self.store.dtype()),
            log: serde_json::to_string(&self.log)?,
        };
        let metadata: HashMap<String, String> = serde_json::from_value(serde_json::to_value(&meta)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(tensors, Some(metadata), path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let raw = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Format(format!("{}: no checkpoint metadata", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_value(serde_json::to_value(raw)?)
            .map_err(|e| Error::Format(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
        let config = RunConfig::parse(&meta.config)?;
        if config.hash() != meta.config_hash {
            return Err(Error::Format(format!("{}: config hash mismatch", path.display())));
        }
        let dtype = match meta.dtype.as_str() {
            "F32" => DType::F32,
            "F64" => DType::F64,
            other => return Err(Error::Format(format!("unsupported checkpoint dtype {other}"))),
        };
        let mut trainer = Self::new(config, meta.video_dim, meta.text_dim, dtype)?;
        let st = safetensors::SafeTensors::deserialize(&bytes)?;
        let device = Device::Cpu;
        let read = |key: &str| -> Result<Tensor> {
            let view = st
                .tensor(key)
                .map_err(|e| Error::Format(format!("{}: {key}: {e}", path.display())))?;
            Ok(view.load(&device)?)
        };
        for (store, prefix) in [(&trainer.store, "param"), (&trainer.ema_store, "ema")] {
            for (name, var) in store.vars() {
                let t = read(&format!("{prefix}.{name}"))?;
                if t.dims() != var.dims() {
                    return Err(Error::Format(format!("{prefix}.{name}: shape {:?}, expected {:?}", t.dims(), var.dims())));
                }
                var.set(&t)?;
            }
        }
        for key in st.names() {
            if let Some(name) = key.strip_prefix("adam_m.") {
                trainer.optimizer.m.insert(name.to_string(), read(key)?);
            } else if let Some(name) = key.strip_prefix("adam_v.") {
                trainer.optimizer.v.insert(name.to_string(), read(key)?);
            }
        }
        trainer.optimizer.step = meta.step;
        trainer.epoch = meta.epoch;
        trainer.log = serde_json::from_str(&meta.log)?;
        Ok(trainer)
    }

    /// Fails unless `items` match the input widths the model was built for.
    pub fn check_dims(&self, items: &[Item]) -> Result<()> {
        let m = &self.config.model;
        for item in items {
            let (v, t) = (item.video.dims()[1], item.text.dims()[1]);
            if v != m.video_dim || t != m.text_dim {
                return Err(Error::Config(format!(
                    "query {}: feature dims ({v}, {t}) do not match checkpoint dims ({}, {})",
                    item.annotation.qid, m.video_dim, m.text_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: String,
    config_hash: String,
    #[serde(with = "as_string")]
    epoch: usize,
    #[serde(with = "as_string")]
    step: u64,
    #[serde(with = "as_string")]
    video_dim: usize,
    #[serde(with = "as_string")]
    text_dim: usize,
    dtype: String,
    log: String,
}

// safetensors metadata values are strings
mod as_string {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

/// Runs `model` on every item: `N_q` windows sorted by confidence plus the
/// saliency vector.
pub fn predict_with(model: &Model, routing: Routing, items: &[Item]) -> Result<Vec<PredictionRecord>> {
    items
        .iter()
        .map(|item| {
            let duration = item.annotation.duration;
            let out = model.forward(&item.video, &item.text, duration, routing, &mut Ctx::eval())?;
            let (moments, conf) = out.moments.to_host()?;
            let mut windows: Vec<[f64; 3]> = moments_to_seconds(&moments, duration)
                .into_iter()
                .zip(conf)
                .map(|((s, e), c)| [s, e, c])
                .collect();
            windows.sort_by(|a, b| b[2].total_cmp(&a[2]).then(a[0].total_cmp(&b[0])));
            Ok(PredictionRecord {
                qid: item.annotation.qid.clone(),
                pred_windows: windows,
                pred_saliency: to_f64_vec(&out.saliency)?,
            })
        })
        .collect()
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub final_eval: Option<EvalReport>,
    pub checkpoint: PathBuf,
}

/// Loads the configured splits, trains, and writes the metrics log and
/// checkpoint under `out.dir`.
pub fn run(config: &RunConfig) -> Result<TrainOutcome> {
    let c = config;
    let train = load_items(&c.train_annotations, &c.feature_dir, c.clip_length, DType::F32)?;
    let val = if c.val_annotations.exists() {
        load_items(&c.val_annotations, &c.feature_dir, c.clip_length, DType::F32)?
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::for_items(config.clone(), &train, DType::F32)?;
    trainer.fit(&train, &val, Some(&c.out_dir.join(METRICS_FILE)))?;
    let checkpoint = c.out_dir.join(CHECKPOINT_FILE);
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome {
        final_eval: trainer.log.last().and_then(|l| l.eval),
        log: trainer.log,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::Sample;
    use crate::nn::ops::to_f64_vec;
    use crate::synth::{generate, SynthConfig};

    fn items(n: usize) -> Vec<Item> {
        let cfg = SynthConfig {
            num_items: n,
            val_items: 0,
            num_clips: 12,
            video_dim: 6,
            text_dim: 5,
            num_tokens: 3,
            max_windows: 2,
            min_window_len: 2,
            max_window_len: 4,
            ..SynthConfig::default()
        };
        generate(&cfg)
            .unwrap()
            .items
            .into_iter()
            .map(|s| {
                let s = Sample {
                    annotation: s.annotation,
                    features: s.features,
                };
                Item::from_sample(&s, DType::F64, &Device::Cpu).unwrap()
            })
            .collect()
    }

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::desk();
        c.apply_overrides(&[
            "epochs=4",
            "batch_size=2",
            "model.hidden_dim=8",
            "model.heads=2",
            "model.ffn_dim=16",
            "mr.num_queries=3",
            "eval_every=2",
        ])
        .unwrap();
        c
    }

    fn store_with(values: &[f64]) -> ParamStore {
        let s = ParamStore::new(DType::F64, 0);
        s.root().get(values.len(), "w", Init::Zeros).unwrap();
        s.get("w")
            .unwrap()
            .set(&Tensor::new(values, &Device::Cpu).unwrap())
            .unwrap();
        s
    }

    fn values(s: &ParamStore, name: &str) -> Vec<f64> {
        to_f64_vec(s.get(name).unwrap().as_tensor()).unwrap()
    }

    #[test]
    fn adamw_first_step_moves_by_lr_times_sign() {
        let s = store_with(&[1.0, -2.0]);
        let w = s.get("w").unwrap();
        let loss = (w.as_tensor() * Tensor::new(&[3.0f64, -0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(0.1, 0.0, 0.0);
        let norm = opt.step(&s, &grads).unwrap();
        assert!((norm - (9.25f64).sqrt()).abs() < 1e-12);
        let v = values(&s, "w");
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn adamw_decay_is_decoupled_and_skips_gammas() {
        let s = ParamStore::new(DType::F64, 0);
        s.root().get(1, "w", Init::Const(1.0)).unwrap();
        s.root().get((), GAMMA_MR, Init::Const(1.0)).unwrap();
        let w = s.get("w").unwrap();
        let g = s.get(GAMMA_MR).unwrap();
        // unit gradient on both: the Adam step is -lr, decay only hits w
        let loss = (w.as_tensor().sum_all().unwrap() + g.as_tensor()).unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(0.5, 0.1, 0.0);
        opt.step(&s, &grads).unwrap();
        let w_after = values(&s, "w")[0];
        assert!((w_after - 0.45).abs() < 1e-6, "{w_after}");
        let g_after = values(&s, GAMMA_MR)[0];
        assert!((g_after - 0.5).abs() < 1e-6, "{g_after}");
    }

    #[test]
    fn clipping_scales_the_gradient_fed_to_the_moments() {
        let s = store_with(&[0.0, 0.0]);
        let w = s.get("w").unwrap();
        let loss = (w.as_tensor() * Tensor::new(&[30.0f64, 40.0], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(0.1, 0.0, 0.1);
        assert_eq!(opt.step(&s, &grads).unwrap(), 50.0);
        let m = to_f64_vec(&opt.m["w"]).unwrap();
        assert!((m[0] - 0.1 * 0.06).abs() < 1e-9 && (m[1] - 0.1 * 0.08).abs() < 1e-9, "{m:?}");
    }

    #[test]
    fn ema_decay_extremes() {
        let ema = store_with(&[1.0, 2.0]);
        let cur = store_with(&[5.0, -1.0]);
        ema_update(&ema, &cur, 1.0).unwrap();
        assert_eq!(values(&ema, "w"), vec![1.0, 2.0]);
        ema_update(&ema, &cur, 0.5).unwrap();
        assert_eq!(values(&ema, "w"), vec![3.0, 0.5]);
        ema_update(&ema, &cur, 0.0).unwrap();
        assert_eq!(values(&ema, "w"), vec![5.0, -1.0]);
    }

    #[test]
    fn gammas_only_for_task_dependent_and_they_move() {
        let data = items(4);
        let mut c = tiny_config();
        c.set("loss.type", "sum").unwrap();
        let mut t = Trainer::for_items(c.clone(), &data, DType::F64).unwrap();
        assert!(t.gammas().is_none());
        t.fit(&data, &[], None).unwrap();
        assert!(t.log.iter().all(|l| l.gamma_mr.is_none() && !l.loss.contains_key("gamma_hd")));
        assert!(t.log.iter().all(|l| (l.loss["total"] - l.loss["l_mr"] - l.loss["l_hd"]).abs() < 1e-9));

        c.set("loss.type", "task_dependent").unwrap();
        let mut t = Trainer::for_items(c, &data, DType::F64).unwrap();
        t.fit(&data, &[], None).unwrap();
        let g: Vec<f64> = t.log.iter().map(|l| l.gamma_mr.unwrap()).collect();
        assert!(g.windows(2).any(|w| w[0] != w[1]), "{g:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = items(4);
        let mut t = Trainer::for_items(tiny_config(), &data, DType::F64).unwrap();
        t.fit(&data, &data[..2], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        t.save(&path).unwrap();
        let back = Trainer::load(&path).unwrap();
        assert_eq!(back.config, t.config);
        assert_eq!((back.epoch, back.optimizer.step), (t.epoch, t.optimizer.step));
        assert_eq!(back.log, t.log);
        for (name, var) in t.store.vars() {
            assert_eq!(values(&back.store, &name), to_f64_vec(var.as_tensor()).unwrap(), "{name}");
        }
        assert_eq!(back.predict(&data).unwrap(), t.predict(&data).unwrap());
    }

    #[test]
    fn untrained_predictions_are_the_anchor_grid() {
        let data = items(2);
        let t = Trainer::for_items(tiny_config(), &data, DType::F64).unwrap();
        let anchors = t.ema_model.mr.anchors().unwrap();
        for (item, rec) in data.iter().zip(t.predict(&data).unwrap()) {
            let d = item.annotation.duration;
            let mut expected: Vec<(f64, f64)> = moments_to_seconds(
                &anchors.iter().map(|a| (a.center, a.width)).collect::<Vec<_>>(),
                d,
            );
            let mut got: Vec<(f64, f64)> = rec.pred_windows.iter().map(|w| (w[0], w[1])).collect();
            expected.sort_by(|a, b| a.0.total_cmp(&b.0));
            got.sort_by(|a, b| a.0.total_cmp(&b.0));
            assert_eq!(got.len(), 3);
            for (g, e) in got.iter().zip(&expected) {
                assert!((g.0 - e.0).abs() < 1e-9 && (g.1 - e.1).abs() < 1e-9, "{g:?} vs {e:?}");
            }
        }
    }

    #[test]
    fn check_dims_rejects_other_widths() {
        let data = items(2);
        let t = Trainer::new(tiny_config(), 7, 5, DType::F64).unwrap();
        assert!(matches!(t.check_dims(&data), Err(Error::Config(_))));
    }
}
