//! Clip data model, annotation CSV and frame-directory ingestion, and the
//! synthetic clip generator used for desk-scale verification.
//!
//! Annotation files are 1-based (`onset`, `apex`, `offset` index positions in
//! the numerically sorted frame directory); [`FrameSequence`] stores 0-based
//! indices.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Grid2;

pub const ANNOTATION_HEADER: [&str; 7] = [
    "dataset", "subject", "video", "onset", "apex", "offset", "label",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("annotation row {row}: {message}")]
    Annotation { row: usize, message: String },
    #[error("annotation header must be `{}`, got `{found}`", ANNOTATION_HEADER.join(","))]
    Header { found: String },
    #[error("{path}: {message}")]
    Frame { path: PathBuf, message: String },
    #[error("unsupported frame format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid synthetic spec: {0}")]
    SynthSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "SMIC")]
    Smic,
    #[serde(rename = "CASME2")]
    Casme2,
    #[serde(rename = "SAMM")]
    Samm,
    #[serde(rename = "SYNTH")]
    Synth,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::Smic,
        DatasetId::Casme2,
        DatasetId::Samm,
        DatasetId::Synth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Smic => "SMIC",
            DatasetId::Casme2 => "CASME2",
            DatasetId::Samm => "SAMM",
            DatasetId::Synth => "SYNTH",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SMIC" => Ok(DatasetId::Smic),
            "CASME2" | "CASMEII" | "CASME_II" => Ok(DatasetId::Casme2),
            "SAMM" => Ok(DatasetId::Samm),
            "SYNTH" => Ok(DatasetId::Synth),
            other => Err(format!("unknown dataset `{other}`")),
        }
    }
}

/// Composite three-class emotion label. The discriminants are the class
/// indices used everywhere else (and the tie-break order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionClass {
    Negative = 0,
    Positive = 1,
    Surprise = 2,
}

impl EmotionClass {
    pub const COUNT: usize = 3;
    pub const ALL: [EmotionClass; 3] = [
        EmotionClass::Negative,
        EmotionClass::Positive,
        EmotionClass::Surprise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionClass::Negative => "negative",
            EmotionClass::Positive => "positive",
            EmotionClass::Surprise => "surprise",
        }
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "negative" => Ok(EmotionClass::Negative),
            "positive" => Ok(EmotionClass::Positive),
            "surprise" => Ok(EmotionClass::Surprise),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// Subject identity. Subjects from different source databases never collide.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectKey {
    pub dataset: DatasetId,
    pub subject: String,
}

impl SubjectKey {
    pub fn new(dataset: DatasetId, subject: impl Into<String>) -> Self {
        Self {
            dataset,
            subject: subject.into(),
        }
    }
}

impl fmt::Display for SubjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset, self.subject)
    }
}

/// One annotation line, 1-based as written in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRow {
    pub dataset: DatasetId,
    pub subject: String,
    pub video: String,
    pub onset: usize,
    pub apex: Option<usize>,
    pub offset: usize,
    pub label: EmotionClass,
}

impl AnnotationRow {
    pub fn subject_key(&self) -> SubjectKey {
        SubjectKey::new(self.dataset, self.subject.clone())
    }
}

/// One micro-expression clip. Indices are 0-based positions into `frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub dataset: DatasetId,
    pub subject: String,
    pub video: String,
    pub frames: Vec<Grid2>,
    pub onset: usize,
    pub apex: Option<usize>,
    pub offset: usize,
    pub label: EmotionClass,
}

impl FrameSequence {
    pub fn subject_key(&self) -> SubjectKey {
        SubjectKey::new(self.dataset, self.subject.clone())
    }

    pub fn annotation(&self) -> AnnotationRow {
        AnnotationRow {
            dataset: self.dataset,
            subject: self.subject.clone(),
            video: self.video.clone(),
            onset: self.onset + 1,
            apex: self.apex.map(|a| a + 1),
            offset: self.offset + 1,
            label: self.label,
        }
    }

    /// Checks the sequence invariants; `Err` carries a description.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.frames.len();
        if n == 0 {
            return Err("sequence has no frames".into());
        }
        if self.onset > self.offset || self.offset >= n {
            return Err(format!(
                "need 1 <= onset <= offset <= {n} (got onset {}, offset {})",
                self.onset + 1,
                self.offset + 1
            ));
        }
        if let Some(a) = self.apex {
            if a < self.onset || a > self.offset {
                return Err(format!(
                    "apex {} outside [{}, {}]",
                    a + 1,
                    self.onset + 1,
                    self.offset + 1
                ));
            }
        }
        let ext = self.frames[0].extent();
        if let Some(bad) = self.frames.iter().position(|f| f.extent() != ext) {
            return Err(format!(
                "frame {} has extent {:?}, expected {:?}",
                bad + 1,
                self.frames[bad].extent(),
                ext
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompositeDataset {
    pub sequences: Vec<FrameSequence>,
}

impl CompositeDataset {
    pub fn new(sequences: Vec<FrameSequence>) -> Self {
        Self { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<SubjectKey> {
        self.sequences.iter().map(|s| s.subject_key()).collect()
    }

    /// Counts indexed by [`EmotionClass::index`].
    pub fn class_counts(&self) -> [usize; EmotionClass::COUNT] {
        let mut counts = [0; EmotionClass::COUNT];
        for s in &self.sequences {
            counts[s.label.index()] += 1;
        }
        counts
    }

    pub fn annotations(&self) -> Vec<AnnotationRow> {
        self.sequences.iter().map(|s| s.annotation()).collect()
    }
}

fn parse_index(field: &str, name: &str, row: usize) -> Result<usize, DataError> {
    let v: usize = field.trim().parse().map_err(|_| DataError::Annotation {
        row,
        message: format!("{name} `{field}` is not a non-negative integer"),
    })?;
    if v == 0 {
        return Err(DataError::Annotation {
            row,
            message: format!("{name} must be >= 1 (indices are 1-based)"),
        });
    }
    Ok(v)
}

/// Parses annotation CSV text. An empty input is an empty annotation set;
/// otherwise the header is mandatory. Rows are numbered from 1 after the
/// header in diagnostics.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRow>, DataError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| DataError::Header {
        found: e.to_string(),
    })?;
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != ANNOTATION_HEADER {
        return Err(DataError::Header {
            found: found.join(","),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Annotation {
            row,
            message: e.to_string(),
        })?;
        let field = |k: usize| record.get(k).unwrap_or("").trim();
        let bad = |message: String| DataError::Annotation { row, message };
        let dataset: DatasetId = field(0).parse().map_err(bad)?;
        let subject = field(1).to_string();
        let video = field(2).to_string();
        if subject.is_empty() || video.is_empty() {
            return Err(DataError::Annotation {
                row,
                message: "subject and video must be non-empty".into(),
            });
        }
        for name in [&subject, &video] {
            if name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(DataError::Annotation {
                    row,
                    message: format!("`{name}` is not a valid directory name"),
                });
            }
        }
        let onset = parse_index(field(3), "onset", row)?;
        let apex = match field(4) {
            "" => None,
            f => Some(parse_index(f, "apex", row)?),
        };
        let offset = parse_index(field(5), "offset", row)?;
        let label: EmotionClass = field(6)
            .parse()
            .map_err(|m| DataError::Annotation { row, message: m })?;
        if onset > offset {
            return Err(DataError::Annotation {
                row,
                message: format!("onset {onset} after offset {offset}"),
            });
        }
        if let Some(a) = apex {
            if a < onset || a > offset {
                return Err(DataError::Annotation {
                    row,
                    message: format!("apex {a} outside [{onset}, {offset}]"),
                });
            }
        }
        rows.push(AnnotationRow {
            dataset,
            subject,
            video,
            onset,
            apex,
            offset,
            label,
        });
    }
    Ok(rows)
}

/// Serialises annotation rows in the canonical CSV layout.
pub fn write_annotations(rows: &[AnnotationRow]) -> String {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer
        .write_record(ANNOTATION_HEADER)
        .expect("writing to a Vec cannot fail");
    for r in rows {
        let apex = r.apex.map(|a| a.to_string()).unwrap_or_default();
        writer
            .write_record([
                r.dataset.as_str(),
                &r.subject,
                &r.video,
                &r.onset.to_string(),
                &apex,
                &r.offset.to_string(),
                r.label.as_str(),
            ])
            .expect("writing to a Vec cannot fail");
    }
    String::from_utf8(writer.into_inner().expect("flush to Vec")).expect("utf-8 fields")
}

/// An undecoded 8-bit frame buffer, interleaved when multi-channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bit_depth: u8,
    pub data: Vec<u8>,
}

/// Converts an 8-bit gray or RGB buffer to a luminance grid in `[0, 1]`
/// using ITU-R 601 weights.
pub fn crop_and_gray(frame: &RawFrame) -> Result<Grid2, DataError> {
    if frame.bit_depth != 8 {
        return Err(DataError::UnsupportedFormat(format!(
            "{}-bit samples",
            frame.bit_depth
        )));
    }
    if frame.channels != 1 && frame.channels != 3 {
        return Err(DataError::UnsupportedFormat(format!(
            "{} channels",
            frame.channels
        )));
    }
    let n = frame.width * frame.height;
    if n == 0 || frame.data.len() != n * frame.channels {
        return Err(DataError::UnsupportedFormat(format!(
            "buffer of {} bytes for {}x{}x{}",
            frame.data.len(),
            frame.height,
            frame.width,
            frame.channels
        )));
    }
    let data = if frame.channels == 1 {
        frame.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    } else {
        frame
            .data
            .chunks_exact(3)
            .map(|p| {
                (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
                    / 255.0
            })
            .collect()
    };
    Grid2::new(frame.height, frame.width, data)
        .map_err(|e| DataError::UnsupportedFormat(e.to_string()))
}

fn decode_frame(path: &Path) -> Result<Grid2, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes).map_err(|e| DataError::Frame {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let raw = match img {
        image::DynamicImage::ImageLuma8(b) => RawFrame {
            width,
            height,
            channels: 1,
            bit_depth: 8,
            data: b.into_raw(),
        },
        image::DynamicImage::ImageRgb8(b) => RawFrame {
            width,
            height,
            channels: 3,
            bit_depth: 8,
            data: b.into_raw(),
        },
        other => {
            return Err(DataError::Frame {
                path: path.to_path_buf(),
                message: format!("unsupported pixel layout {:?}", other.color()),
            })
        }
    };
    crop_and_gray(&raw).map_err(|e| DataError::Frame {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

const FRAME_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "pbm"];

/// Lists numerically named frame files in a directory, sorted by number.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        let number = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok());
        if let (true, Some(n)) = (ext_ok, number) {
            frames.push((n, path));
        }
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

pub fn video_dir(frames_root: &Path, row: &AnnotationRow) -> PathBuf {
    frames_root
        .join(row.dataset.as_str())
        .join(&row.subject)
        .join(&row.video)
}

fn load_sequence(
    row_no: usize,
    row: &AnnotationRow,
    frames_root: &Path,
) -> Result<FrameSequence, DataError> {
    let dir = video_dir(frames_root, row);
    if !dir.is_dir() {
        return Err(DataError::Frame {
            path: dir,
            message: "frame directory not found".into(),
        });
    }
    let paths = list_frames(&dir)?;
    let frames = paths
        .iter()
        .map(|p| decode_frame(p))
        .collect::<Result<Vec<_>, _>>()?;
    let seq = FrameSequence {
        dataset: row.dataset,
        subject: row.subject.clone(),
        video: row.video.clone(),
        frames,
        onset: row.onset - 1,
        apex: row.apex.map(|a| a - 1),
        offset: row.offset - 1,
        label: row.label,
    };
    seq.validate().map_err(|message| DataError::Annotation {
        row: row_no,
        message: format!("{}: {message}", dir.display()),
    })?;
    Ok(seq)
}

/// Loads every annotated clip. Videos are decoded in parallel; the result
/// keeps annotation order.
pub fn load_dataset(
    annotation_path: &Path,
    frames_root: &Path,
) -> Result<CompositeDataset, DataError> {
    let text = fs::read_to_string(annotation_path).map_err(io_err(annotation_path))?;
    let rows = parse_annotations(&text)?;
    let sequences = rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| load_sequence(i + 1, row, frames_root))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CompositeDataset { sequences })
}

fn to_gray8(frame: &Grid2) -> image::GrayImage {
    let data = frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(frame.width() as u32, frame.height() as u32, data)
        .expect("buffer matches extent")
}

/// Writes the annotation CSV and one PNG per frame (named `1.png`, `2.png`,
/// ... inside the canonical directory layout).
pub fn save_dataset(
    dataset: &CompositeDataset,
    annotation_path: &Path,
    frames_root: &Path,
) -> Result<(), DataError> {
    if let Some(parent) = annotation_path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(annotation_path, write_annotations(&dataset.annotations()))
        .map_err(io_err(annotation_path))?;
    dataset.sequences.par_iter().try_for_each(|seq| {
        let dir = video_dir(frames_root, &seq.annotation());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (i, frame) in seq.frames.iter().enumerate() {
            let path = dir.join(format!("{}.png", i + 1));
            to_gray8(frame)
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| DataError::Frame {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Synthetic clips

/// Minimum gap between the interior means of the normalised v channel of a
/// Positive clip and a Negative clip. Positive motion is a uniform upward
/// lift, so its v channel sits near 1 away from the lift; the converging
/// Negative pattern is antisymmetric and sits near 0.5.
pub const V_MEAN_SEPARATION: f64 = 0.2;

const MOTION_SPREAD: f64 = 0.2;
const CREASE_CONTRAST: f64 = 0.12;
const CREASE_PERIOD: f64 = 3.5;
const CREASE_SPREAD: f64 = 0.65;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub subjects: usize,
    pub clips_per_subject: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            subjects: 6,
            clips_per_subject: 10,
            frames: 24,
            height: 170,
            width: 140,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::SynthSpec(m.to_string()));
        if self.subjects == 0 || self.clips_per_subject == 0 {
            return fail("subjects and clips_per_subject must be positive");
        }
        if self.frames < 5 {
            return fail("frames must be at least 5");
        }
        if self.height < 24 || self.width < 24 {
            return fail("height and width must be at least 24");
        }
        Ok(())
    }
}

/// Ground truth recorded for one generated clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipTruth {
    pub subject: String,
    pub video: String,
    /// 0-based apex position.
    pub apex: usize,
    /// Displacement at the apex, in pixels.
    pub amplitude: f64,
    /// Motion centre `(y, x)` in pixels.
    pub center: (f64, f64),
    /// Gaussian support radius of the motion, in pixels.
    pub sigma: f64,
    pub label: EmotionClass,
}

impl ClipTruth {
    /// Motion envelope in `[0, 1]`: linear rise from the first frame to the
    /// apex, linear decay to the last frame.
    pub fn envelope(&self, t: usize, frames: usize) -> f64 {
        let last = frames - 1;
        if t <= self.apex {
            if self.apex == 0 {
                1.0
            } else {
                t as f64 / self.apex as f64
            }
        } else if self.apex == last {
            1.0
        } else {
            (last - t) as f64 / (last - self.apex) as f64
        }
    }

    /// Fine stripes that fade in with the motion, as skin creases do. They
    /// change the local texture so that texture statistics track the
    /// envelope `level`.
    pub fn crease(&self, y: f64, x: f64, level: f64) -> f64 {
        let dy = (y - self.center.0) / (CREASE_SPREAD * self.sigma);
        let dx = (x - self.center.1) / (CREASE_SPREAD * self.sigma);
        let window = (-(dx * dx + dy * dy) / 2.0).exp();
        level * CREASE_CONTRAST * window * (2.0 * std::f64::consts::PI * y / CREASE_PERIOD).sin()
    }

    /// Analytic apex displacement `(u, v)` = `(dx, dy)` at pixel `(y, x)`.
    pub fn displacement(&self, y: f64, x: f64) -> (f64, f64) {
        motion_field(self.label, self.amplitude, self.center, self.sigma, y, x)
    }
}

fn motion_field(
    label: EmotionClass,
    amplitude: f64,
    center: (f64, f64),
    sigma: f64,
    y: f64,
    x: f64,
) -> (f64, f64) {
    let dy = (y - center.0) / sigma;
    let dx = (x - center.1) / sigma;
    let w = amplitude * (-(dx * dx + dy * dy) / 2.0).exp();
    match label {
        // Tissue pulled towards the centre.
        EmotionClass::Negative => (-w * dx, -w * dy),
        // Lifted upwards and spread sideways.
        EmotionClass::Positive => (w * dx, -w),
        // Stretched vertically.
        EmotionClass::Surprise => (0.0, w * dy),
    }
}

#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>, // (amp, ky, kx, phase)
    blobs: Vec<(f64, f64, f64, f64)>, // (amp, cy, cx, r)
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Self {
        let waves = (0..6)
            .map(|_| {
                let period: f64 = rng.random_range(7.0..18.0);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let k = 2.0 * std::f64::consts::PI / period;
                (
                    rng.random_range(0.03..0.07),
                    k * angle.sin(),
                    k * angle.cos(),
                    rng.random_range(0.0..2.0 * std::f64::consts::PI),
                )
            })
            .collect();
        let (h, w) = (height as f64, width as f64);
        // Darker eye and mouth blobs, loosely face-like.
        let blobs = vec![
            (-0.12, 0.30 * h, 0.28 * w, 0.08 * w),
            (-0.12, 0.30 * h, 0.72 * w, 0.08 * w),
            (-0.10, 0.75 * h, 0.50 * w, 0.12 * w),
        ];
        Self { waves, blobs }
    }

    fn eval(&self, y: f64, x: f64) -> f64 {
        let mut v = 0.5;
        for &(a, ky, kx, ph) in &self.waves {
            v += a * (ky * y + kx * x + ph).sin();
        }
        for &(a, cy, cx, r) in &self.blobs {
            let d2 = ((y - cy).powi(2) + (x - cx).powi(2)) / (r * r);
            v += a * (-d2 / 2.0).exp();
        }
        v.clamp(0.0, 1.0)
    }
}

/// A generated dataset together with its per-clip ground truth (same order
/// as `dataset.sequences`).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: CompositeDataset,
    pub truth: Vec<ClipTruth>,
}

fn quantize(v: f64) -> f64 {
    f64::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0
}

/// Renders clip `t` of a sequence by backward-warping the analytic texture.
fn render_frame(
    texture: &Texture,
    truth: &ClipTruth,
    scale: f64,
    height: usize,
    width: usize,
) -> Grid2 {
    Grid2::from_fn(height, width, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let (u, v) = truth.displacement(yf, xf);
        quantize(texture.eval(yf - scale * v, xf - scale * u) + truth.crease(yf, xf, scale))
    })
}

/// Generates a deterministic synthetic corpus. Every clip spans the whole
/// sequence (onset = first frame, offset = last frame); the apex annotation
/// is left empty so clips go through spotting, and the true apex is kept in
/// [`SynthOutput::truth`]. Labels cycle Negative, Positive, Surprise within
/// each subject. Frames are quantised to 8 bits so that a saved and reloaded
/// corpus is bit-identical to the in-memory one.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthOutput, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut sequences = Vec::new();
    let mut truth = Vec::new();
    for s in 0..spec.subjects {
        let subject = format!("s{:02}", s + 1);
        let texture = Texture::random(&mut rng, spec.height, spec.width);
        for c in 0..spec.clips_per_subject {
            let label = EmotionClass::ALL[c % EmotionClass::COUNT];
            let lo = spec.frames / 3;
            let hi = (2 * spec.frames / 3).max(lo + 1);
            let clip = ClipTruth {
                subject: subject.clone(),
                video: format!("{subject}_c{:02}", c + 1),
                apex: rng.random_range(lo..hi),
                amplitude: rng.random_range(1.6..2.4),
                center: (
                    0.75 * h + rng.random_range(-0.03..0.03) * h,
                    0.5 * w + rng.random_range(-0.03..0.03) * w,
                ),
                sigma: MOTION_SPREAD * h.min(w) * rng.random_range(0.9..1.1),
                label,
            };
            let frames = (0..spec.frames)
                .map(|t| {
                    render_frame(
                        &texture,
                        &clip,
                        clip.envelope(t, spec.frames),
                        spec.height,
                        spec.width,
                    )
                })
                .collect();
            sequences.push(FrameSequence {
                dataset: DatasetId::Synth,
                subject: subject.clone(),
                video: clip.video.clone(),
                frames,
                onset: 0,
                apex: None,
                offset: spec.frames - 1,
                label,
            });
            truth.push(clip);
        }
    }
    Ok(SynthOutput {
        dataset: CompositeDataset { sequences },
        truth,
    })
}
