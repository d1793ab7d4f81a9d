//! Synthetic benchmark with planted query-relevant windows.
//!
//! Every item draws a random direction `u` with unit RMS per coordinate, so
//! `snr` is the per-coordinate amplitude ratio against the unit Gaussian
//! noise. Clip features inside the planted windows are `snr * u` plus noise;
//! clips outside are noise only. Query tokens are `u` (mapped into the text
//! space) plus a small perturbation, so relevance is recoverable only by
//! comparing the two modalities.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{
    save_annotations, text_feature_path, video_feature_path, write_feature_file, Annotation,
    FeatureMatrix, FeatureSequence, DEFAULT_CLIP_LENGTH,
};

const TEXT_NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_items: usize,
    /// Items at the end of the list that form the validation split.
    pub val_items: usize,
    pub num_clips: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    pub num_tokens: usize,
    pub max_windows: usize,
    pub min_window_len: usize,
    pub max_window_len: usize,
    pub snr: f64,
    pub clip_length: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_items: 250,
            val_items: 50,
            num_clips: 75,
            video_dim: 64,
            text_dim: 64,
            num_tokens: 8,
            max_windows: 3,
            min_window_len: 4,
            max_window_len: 16,
            snr: 3.0,
            clip_length: DEFAULT_CLIP_LENGTH,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Sets one field by name, e.g. `("snr", "inf")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "num_items" => self.num_items = num(key, value)?,
            "val_items" => self.val_items = num(key, value)?,
            "num_clips" => self.num_clips = num(key, value)?,
            "video_dim" => self.video_dim = num(key, value)?,
            "text_dim" => self.text_dim = num(key, value)?,
            "num_tokens" => self.num_tokens = num(key, value)?,
            "max_windows" => self.max_windows = num(key, value)?,
            "min_window_len" => self.min_window_len = num(key, value)?,
            "max_window_len" => self.max_window_len = num(key, value)?,
            "snr" => self.snr = num(key, value)?,
            "clip_length" => self.clip_length = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown data key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let gen = |m: String| Err(Error::Generation(m));
        if self.num_clips < 8 {
            return gen(format!("need at least 8 clips, got {}", self.num_clips));
        }
        if self.max_windows == 0 || self.min_window_len == 0 {
            return gen("max_windows and min_window_len must be positive".into());
        }
        if self.max_windows * self.min_window_len > self.num_clips {
            return gen(format!(
                "cannot pack {} windows of at least {} clips into {} clips",
                self.max_windows, self.min_window_len, self.num_clips
            ));
        }
        if self.max_window_len < self.min_window_len {
            return gen("max_window_len < min_window_len".into());
        }
        if !(self.snr > 0.0) {
            return gen(format!("snr must be positive, got {}", self.snr));
        }
        if self.video_dim == 0 || self.text_dim == 0 || self.num_tokens == 0 {
            return gen("feature dimensions and token count must be positive".into());
        }
        if self.val_items > self.num_items {
            return gen("val_items exceeds num_items".into());
        }
        if !(self.clip_length > 0.0) {
            return gen("clip_length must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthItem {
    pub annotation: Annotation,
    pub features: FeatureSequence,
    /// Planted windows as half-open clip index ranges.
    pub clip_windows: Vec<(usize, usize)>,
    /// Direction in video feature space, unit RMS per coordinate.
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub items: Vec<SynthItem>,
}

impl SynthData {
    pub fn train(&self) -> &[SynthItem] {
        &self.items[..self.items.len() - self.config.val_items]
    }

    pub fn val(&self) -> &[SynthItem] {
        &self.items[self.items.len() - self.config.val_items..]
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Rescales `v` to unit RMS per coordinate.
fn normalize(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

/// Fixed map from video space into text space, used when the two
/// dimensions differ.
fn text_projection(cfg: &SynthConfig) -> Option<Vec<Vec<f64>>> {
    if cfg.text_dim == cfg.video_dim {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57_0000);
    Some(
        (0..cfg.text_dim)
            .map(|_| gaussian_vec(&mut rng, cfg.video_dim))
            .collect(),
    )
}

fn sample_windows(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let k = rng.random_range(1..=cfg.max_windows);
    let mut lengths: Vec<usize> = (0..k)
        .map(|_| rng.random_range(cfg.min_window_len..=cfg.max_window_len))
        .collect();
    while lengths.iter().sum::<usize>() > cfg.num_clips {
        let longest = (0..k).max_by_key(|&i| (lengths[i], usize::MAX - i)).unwrap();
        lengths[longest] -= 1;
    }
    let free = cfg.num_clips - lengths.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    lengths.shuffle(rng);

    let mut windows = Vec::with_capacity(k);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (len, cut) in lengths.into_iter().zip(cuts) {
        pos += cut - prev_cut;
        prev_cut = cut;
        windows.push((pos, pos + len));
        pos += len;
    }
    windows
}

fn saliency_labels(n: usize, windows: &[(usize, usize)]) -> Vec<u8> {
    let mut labels = vec![0u8; n];
    for &(s, e) in windows {
        for (i, label) in labels.iter_mut().enumerate().take(e).skip(s) {
            let edge = e - s >= 3 && (i == s || i + 1 == e);
            *label = if edge { 3 } else { 4 };
        }
    }
    labels
}

fn generate_item(
    cfg: &SynthConfig,
    index: usize,
    projection: Option<&Vec<Vec<f64>>>,
) -> SynthItem {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let windows = sample_windows(cfg, &mut rng);
    let mut direction = gaussian_vec(&mut rng, cfg.video_dim);
    normalize(&mut direction);

    let n = cfg.num_clips;
    let mut inside = vec![false; n];
    for &(s, e) in &windows {
        inside[s..e].iter_mut().for_each(|b| *b = true);
    }
    let mut video = Vec::with_capacity(n * cfg.video_dim);
    for &is_in in &inside {
        let noise = gaussian_vec(&mut rng, cfg.video_dim);
        for (d, &z) in noise.iter().enumerate() {
            let v = match (is_in, cfg.snr.is_infinite()) {
                (true, true) => direction[d],
                (true, false) => cfg.snr * direction[d] + z,
                (false, _) => z,
            };
            video.push(v as f32);
        }
    }

    let text_dir = match projection {
        None => direction.clone(),
        Some(p) => {
            let mut t: Vec<f64> = p
                .iter()
                .map(|row| row.iter().zip(&direction).map(|(a, b)| a * b).sum())
                .collect();
            normalize(&mut t);
            t
        }
    };
    let mut text = Vec::with_capacity(cfg.num_tokens * cfg.text_dim);
    for _ in 0..cfg.num_tokens {
        let noise = gaussian_vec(&mut rng, cfg.text_dim);
        text.extend(
            text_dir
                .iter()
                .zip(&noise)
                .map(|(u, z)| (u + TEXT_NOISE_STD * z) as f32),
        );
    }

    let cl = cfg.clip_length;
    let annotation = Annotation {
        qid: format!("q{index:05}"),
        vid: format!("v{index:05}"),
        duration: n as f64 * cl,
        query_text: None,
        relevant_windows: {
            let mut w: Vec<[f64; 2]> = windows
                .iter()
                .map(|&(s, e)| [s as f64 * cl, e as f64 * cl])
                .collect();
            w.sort_by(|a, b| a[0].total_cmp(&b[0]));
            w
        },
        saliency_labels: saliency_labels(n, &windows),
    };
    SynthItem {
        annotation,
        features: FeatureSequence {
            video: FeatureMatrix {
                rows: n,
                cols: cfg.video_dim,
                data: video,
            },
            text: FeatureMatrix {
                rows: cfg.num_tokens,
                cols: cfg.text_dim,
                data: text,
            },
            clip_length: cl,
        },
        clip_windows: windows,
        direction,
    }
}

/// Builds the whole dataset in memory. A pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let projection = text_projection(cfg);
    let items = (0..cfg.num_items)
        .map(|i| generate_item(cfg, i, projection.as_ref()))
        .collect();
    Ok(SynthData {
        config: cfg.clone(),
        items,
    })
}

/// Paths written by [`generate_to_dir`].
#[derive(Debug, Clone)]
pub struct SynthLayout {
    pub train_annotations: PathBuf,
    pub val_annotations: PathBuf,
    pub feature_dir: PathBuf,
}

impl SynthLayout {
    pub fn under(out: &Path) -> Self {
        Self {
            train_annotations: out.join("train.jsonl"),
            val_annotations: out.join("val.jsonl"),
            feature_dir: out.join("features"),
        }
    }
}

/// Writes `train.jsonl`, `val.jsonl`, `features/` and `synth_config.json`
/// under `out`.
pub fn generate_to_dir(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<SynthLayout> {
    let out = out.as_ref();
    let data = generate(cfg)?;
    let layout = SynthLayout::under(out);
    fs::create_dir_all(&layout.feature_dir).map_err(|e| Error::io(&layout.feature_dir, e))?;
    for item in &data.items {
        let a = &item.annotation;
        write_feature_file(video_feature_path(&layout.feature_dir, &a.vid), &item.features.video)?;
        write_feature_file(text_feature_path(&layout.feature_dir, &a.qid), &item.features.text)?;
    }
    let anns = |items: &[SynthItem]| items.iter().map(|i| i.annotation.clone()).collect::<Vec<_>>();
    save_annotations(&anns(data.train()), &layout.train_annotations)?;
    save_annotations(&anns(data.val()), &layout.val_annotations)?;
    let cfg_path = out.join("synth_config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_items: 20,
            val_items: 5,
            num_clips: 30,
            video_dim: 16,
            text_dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn packing_bound_is_enforced() {
        let cfg = SynthConfig {
            max_windows: 3,
            num_clips: 8,
            min_window_len: 3,
            max_window_len: 3,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn tight_packing_succeeds() {
        let cfg = SynthConfig {
            max_windows: 3,
            num_clips: 9,
            min_window_len: 3,
            max_window_len: 3,
            num_items: 30,
            val_items: 0,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        for item in &data.items {
            item.annotation.validate(cfg.clip_length).unwrap();
        }
    }

    #[test]
    fn windows_are_disjoint_and_in_range() {
        let cfg = small();
        let data = generate(&cfg).unwrap();
        for item in &data.items {
            item.annotation.validate(cfg.clip_length).unwrap();
            let k = item.clip_windows.len();
            assert!((1..=cfg.max_windows).contains(&k));
            for &(s, e) in &item.clip_windows {
                assert!(s < e && e <= cfg.num_clips);
            }
        }
    }

    #[test]
    fn labels_taper_at_edges() {
        assert_eq!(saliency_labels(8, &[(1, 6)]), vec![0, 3, 4, 4, 4, 3, 0, 0]);
        assert_eq!(saliency_labels(4, &[(0, 2)]), vec![4, 4, 0, 0]);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_to_dir(&cfg, a.path()).unwrap();
        generate_to_dir(&cfg, b.path()).unwrap();
        let mut files: Vec<_> = walk(a.path());
        files.sort();
        assert!(!files.is_empty());
        for rel in files {
            assert_eq!(
                fs::read(a.path().join(&rel)).unwrap(),
                fs::read(b.path().join(&rel)).unwrap(),
                "{rel:?}"
            );
        }
    }

    fn walk(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out
    }

    #[test]
    fn noiseless_limit_plants_the_direction() {
        let cfg = SynthConfig {
            snr: f64::INFINITY,
            ..small()
        };
        let data = generate(&cfg).unwrap();
        for item in &data.items {
            let video = &item.features.video;
            let u_norm = item.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut sims = Vec::new();
            for i in 0..video.rows {
                let row: Vec<f64> = video.row(i).iter().map(|&v| v as f64).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cos = row.iter().zip(&item.direction).map(|(a, b)| a * b).sum::<f64>() / (norm * u_norm);
                sims.push(cos);
            }
            let labels = &item.annotation.saliency_labels;
            for (i, &cos) in sims.iter().enumerate() {
                if labels[i] > 0 {
                    let row = video.row(i);
                    for (d, &v) in row.iter().enumerate() {
                        assert_eq!(v, item.direction[d] as f32);
                    }
                    assert!((cos - 1.0).abs() < 1e-6);
                }
            }
            // nearest-neighbour retrieval: threshold between the classes
            let min_in = (0..sims.len()).filter(|&i| labels[i] > 0).map(|i| sims[i]).fold(f64::INFINITY, f64::min);
            let max_out = (0..sims.len()).filter(|&i| labels[i] == 0).map(|i| sims[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(min_in > max_out);
        }
    }

    #[test]
    fn in_window_similarity_exceeds_background() {
        let cfg = SynthConfig {
            num_items: 40,
            val_items: 0,
            snr: 0.5,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
        for item in &data.items {
            let v = &item.features.video;
            for i in 0..v.rows {
                let row = v.row(i);
                let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let cos = row.iter().zip(&item.direction).map(|(&a, b)| a as f64 * b).sum::<f64>() / norm;
                if item.annotation.saliency_labels[i] > 0 {
                    sin += cos;
                    nin += 1;
                } else {
                    sout += cos;
                    nout += 1;
                }
            }
        }
        assert!(nin + nout >= 1000);
        assert!(sin / nin as f64 > sout / nout as f64);
    }

    #[test]
    fn mismatched_text_dim_still_generates() {
        let cfg = SynthConfig {
            text_dim: 12,
            ..small()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.items[0].features.text.cols, 12);
        assert_eq!(data.train().len(), 15);
        assert_eq!(data.val().len(), 5);
    }
}
