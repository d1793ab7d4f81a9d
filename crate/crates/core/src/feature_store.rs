//! On-disk data model: query annotations (JSONL), clip/token feature matrices
//! (a small binary format) and prediction records (JSONL).
//!
//! Feature files start with a 16-byte little-endian header of four `u32`
//! values, `magic`, `version`, `rows`, `cols`, followed by `rows * cols`
//! row-major `f32` values. Video features live in `<vid>.vfeat`, query token
//! features in `<qid>.tfeat`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Clip length used by QVHighlights-style data, in seconds.
pub const DEFAULT_CLIP_LENGTH: f64 = 2.0;
/// Highest saliency level an annotation may carry.
pub const MAX_SALIENCY_LABEL: u8 = 4;

pub const FEATURE_MAGIC: u32 = u32::from_le_bytes(*b"MLFT");
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const VIDEO_FEATURE_EXT: &str = "vfeat";
pub const TEXT_FEATURE_EXT: &str = "tfeat";

/// Number of clips in a video of `duration` seconds; a trailing partial clip
/// rounds to the nearest whole clip.
pub fn clip_count(duration: f64, clip_length: f64) -> usize {
    (duration / clip_length).round() as usize
}

fn string_or_number<'de, D>(de: D) -> std::result::Result<String, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Str(String),
        Int(i64),
    }
    Ok(match Id::deserialize(de)? {
        Id::Str(s) => s,
        Id::Int(i) => i.to_string(),
    })
}

/// One query over one video, with its ground-truth moments and per-clip
/// saliency levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(deserialize_with = "string_or_number")]
    pub qid: String,
    #[serde(deserialize_with = "string_or_number")]
    pub vid: String,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    /// `(start, end)` pairs in seconds.
    pub relevant_windows: Vec<[f64; 2]>,
    /// One level in `0..=4` per clip.
    pub saliency_labels: Vec<u8>,
}

impl Annotation {
    pub fn num_clips(&self, clip_length: f64) -> usize {
        clip_count(self.duration, clip_length)
    }

    pub fn validate(&self, clip_length: f64) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("qid {}: {msg}", self.qid)));
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return fail(format!("duration {} is not positive", self.duration));
        }
        for &[start, end] in &self.relevant_windows {
            if !(start.is_finite() && end.is_finite()) {
                return fail("non-finite window bound".into());
            }
            if start >= end {
                return fail(format!("window [{start}, {end}]: start >= end"));
            }
            if start < 0.0 || end > self.duration {
                return fail(format!(
                    "window [{start}, {end}] outside [0, {}]",
                    self.duration
                ));
            }
        }
        let mut sorted = self.relevant_windows.clone();
        sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for pair in sorted.windows(2) {
            if pair[1][0] < pair[0][1] {
                return fail(format!(
                    "windows [{}, {}] and [{}, {}] overlap",
                    pair[0][0], pair[0][1], pair[1][0], pair[1][1]
                ));
            }
        }
        let n = self.num_clips(clip_length);
        if self.saliency_labels.len() != n {
            return fail(format!(
                "{} saliency labels for {n} clips",
                self.saliency_labels.len()
            ));
        }
        if let Some(bad) = self
            .saliency_labels
            .iter()
            .find(|&&l| l > MAX_SALIENCY_LABEL)
        {
            return fail(format!("saliency label {bad} outside 0..=4"));
        }
        Ok(())
    }
}

/// Reads a JSONL annotation file, validating every record against the
/// default 2 s clip length.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    load_annotations_with_clip_length(path, DEFAULT_CLIP_LENGTH)
}

pub fn load_annotations_with_clip_length(
    path: impl AsRef<Path>,
    clip_length: f64,
) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        ann.validate(clip_length)?;
        out.push(ann);
    }
    Ok(out)
}

pub fn save_annotations(annotations: &[Annotation], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), annotations)
}

/// Dense row-major `f32` matrix as stored in feature files.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Format(format!(
                "{} values do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "{what}: non-finite value at row {}, col {}",
                pos / self.cols,
                pos % self.cols
            )));
        }
        Ok(())
    }
}

/// Video clip features and query token features for one annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `[N x D_v]`
    pub video: FeatureMatrix,
    /// `[W x D_t]`
    pub text: FeatureMatrix,
    pub clip_length: f64,
}

impl FeatureSequence {
    pub fn num_clips(&self) -> usize {
        self.video.rows
    }
}

pub fn encode_feature_matrix(m: &FeatureMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    for word in [FEATURE_MAGIC, FEATURE_VERSION, m.rows as u32, m.cols as u32] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses the binary layout. Shape problems are format errors; non-finite
/// values are validation errors.
pub fn decode_feature_matrix(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (magic, version, rows, cols) = (word(0), word(1), word(2) as usize, word(3) as usize);
    if magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:#010x}")));
    }
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("empty shape {rows}x{cols}")));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("shape {rows}x{cols} overflows")))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "header declares {rows}x{cols} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = FeatureMatrix { rows, cols, data };
    m.check_finite("feature matrix")?;
    Ok(m)
}

pub fn write_feature_file(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_matrix(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn video_feature_path(dir: &Path, vid: &str) -> PathBuf {
    dir.join(format!("{vid}.{VIDEO_FEATURE_EXT}"))
}

pub fn text_feature_path(dir: &Path, qid: &str) -> PathBuf {
    dir.join(format!("{qid}.{TEXT_FEATURE_EXT}"))
}

pub fn load_features(dir: impl AsRef<Path>, vid: &str, qid: &str) -> Result<FeatureSequence> {
    let dir = dir.as_ref();
    Ok(FeatureSequence {
        video: read_feature_file(video_feature_path(dir, vid))?,
        text: read_feature_file(text_feature_path(dir, qid))?,
        clip_length: DEFAULT_CLIP_LENGTH,
    })
}

/// Model output for one query, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(deserialize_with = "string_or_number")]
    pub qid: String,
    /// `(start, end, confidence)` sorted by confidence, highest first.
    #[serde(rename = "pred_relevant_windows")]
    pub pred_windows: Vec<[f64; 3]>,
    #[serde(rename = "pred_saliency_scores")]
    pub pred_saliency: Vec<f64>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("qid {}: {msg}", self.qid)));
        for &[start, end, conf] in &self.pred_windows {
            if !(0.0..=1.0).contains(&conf) {
                return fail(format!("confidence {conf} outside [0, 1]"));
            }
            if !(start < end) {
                return fail(format!("window [{start}, {end}]: start >= end"));
            }
        }
        if self.pred_windows.windows(2).any(|w| w[0][2] < w[1][2]) {
            return fail("windows are not sorted by confidence".into());
        }
        if self.pred_saliency.iter().any(|s| !s.is_finite()) {
            return fail("non-finite saliency score".into());
        }
        Ok(())
    }
}

pub fn save_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    write_jsonl(path.as_ref(), records)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// An annotation together with its loaded features.
#[derive(Debug, Clone)]
pub struct Sample {
    pub annotation: Annotation,
    pub features: FeatureSequence,
}

impl Sample {
    pub fn num_clips(&self) -> usize {
        self.features.num_clips()
    }
}

/// Loads every annotation in `annotations` and the matching feature files in
/// `feature_dir`, checking that clip counts agree.
pub fn load_split(annotations: impl AsRef<Path>, feature_dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    load_split_with_clip_length(annotations, feature_dir, DEFAULT_CLIP_LENGTH)
}

pub fn load_split_with_clip_length(
    annotations: impl AsRef<Path>,
    feature_dir: impl AsRef<Path>,
    clip_length: f64,
) -> Result<Vec<Sample>> {
    let anns = load_annotations_with_clip_length(annotations, clip_length)?;
    let dir = feature_dir.as_ref();
    anns.into_iter()
        .map(|annotation| {
            let mut features = load_features(dir, &annotation.vid, &annotation.qid)?;
            features.clip_length = clip_length;
            let n = annotation.num_clips(clip_length);
            if features.num_clips() != n {
                return Err(Error::Format(format!(
                    "qid {}: video {} has {} feature rows but annotation implies {n} clips",
                    annotation.qid,
                    annotation.vid,
                    features.num_clips()
                )));
            }
            Ok(Sample {
                annotation,
                features,
            })
        })
        .collect()
}
