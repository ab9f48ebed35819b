//! Apex-frame spotting from LBP histogram correlation over three facial
//! regions, followed by a divide-and-conquer search over the difference-rate
//! series of the most active region.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::FrameSequence;
use crate::numerics::Grid2;

pub const LBP_BINS: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApexError {
    #[error("LBP needs at least a 3x3 region, got {height}x{width}")]
    RegionTooSmall { height: usize, width: usize },
    #[error("region {rect:?} lies outside a {height}x{width} frame")]
    RegionOutside {
        rect: Rect,
        height: usize,
        width: usize,
    },
    #[error("empty LBP histogram at frame {frame}: correlation undefined")]
    EmptyHistogram { frame: usize },
    #[error("spotting needs at least 3 frames between onset and offset, got {0}")]
    TooFewFrames(usize),
}

/// 8-neighbour radius-1 LBP codes for the interior pixels of a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbpCodes {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

// Clockwise from top-left; bit b belongs to NEIGHBORS[b].
const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// Bit `b` of a code is set when neighbour `b` (clockwise from the top-left)
/// is `>=` the centre pixel. The output covers the `(h-2) x (w-2)` interior.
pub fn lbp_code_map(frame: &Grid2) -> Result<LbpCodes, ApexError> {
    lbp_codes_in(frame, Rect::full(frame.height(), frame.width()))
}

fn lbp_codes_in(frame: &Grid2, rect: Rect) -> Result<LbpCodes, ApexError> {
    if rect.height < 3 || rect.width < 3 {
        return Err(ApexError::RegionTooSmall {
            height: rect.height,
            width: rect.width,
        });
    }
    if rect.top + rect.height > frame.height() || rect.left + rect.width > frame.width() {
        return Err(ApexError::RegionOutside {
            rect,
            height: frame.height(),
            width: frame.width(),
        });
    }
    let (h, w) = (rect.height - 2, rect.width - 2);
    let mut codes = Vec::with_capacity(h * w);
    for y in rect.top + 1..rect.top + rect.height - 1 {
        for x in rect.left + 1..rect.left + rect.width - 1 {
            let center = frame.get(y, x);
            let mut code = 0u8;
            for (bit, &(dy, dx)) in NEIGHBORS.iter().enumerate() {
                let n = frame.get((y as isize + dy) as usize, (x as isize + dx) as usize);
                if n >= center {
                    code |= 1 << bit;
                }
            }
            codes.push(code);
        }
    }
    Ok(LbpCodes {
        height: h,
        width: w,
        codes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbpHistogram {
    pub bins: [u64; LBP_BINS],
}

impl LbpHistogram {
    pub fn from_codes(codes: &LbpCodes) -> Self {
        let mut bins = [0u64; LBP_BINS];
        for &c in &codes.codes {
            bins[c as usize] += 1;
        }
        Self { bins }
    }

    /// Histogram of the LBP codes of the region's interior pixels; neighbours
    /// are taken from inside the region only.
    pub fn of_region(frame: &Grid2, rect: Rect) -> Result<Self, ApexError> {
        lbp_codes_in(frame, rect).map(|c| Self::from_codes(&c))
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }
}

/// Cosine similarity of two count vectors, in `[0, 1]`.
pub fn histogram_correlation(h1: &LbpHistogram, h2: &LbpHistogram) -> Option<f64> {
    correlation(&h1.bins, &h2.bins)
}

fn correlation(a: &[u64], b: &[u64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    /// Rectangle from fractional row/column bounds of a `height x width` box.
    pub fn from_fractions(height: usize, width: usize, rows: (f64, f64), cols: (f64, f64)) -> Self {
        let top = (rows.0 * height as f64).round() as usize;
        let bottom = ((rows.1 * height as f64).round() as usize).min(height);
        let left = (cols.0 * width as f64).round() as usize;
        let right = ((cols.1 * width as f64).round() as usize).min(width);
        Self {
            top,
            left,
            height: bottom.saturating_sub(top),
            width: right.saturating_sub(left),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiKind {
    LeftEye,
    RightEye,
    Mouth,
}

impl fmt::Display for RoiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoiKind::LeftEye => "left_eye",
            RoiKind::RightEye => "right_eye",
            RoiKind::Mouth => "mouth",
        })
    }
}

/// Left eye + brow, right eye + brow, mouth; in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiSet {
    pub regions: [(RoiKind, Rect); 3],
}

impl RoiSet {
    /// Fixed fractional rectangles of a pre-cropped face.
    pub fn for_face(height: usize, width: usize) -> Self {
        Self {
            regions: [
                (
                    RoiKind::LeftEye,
                    Rect::from_fractions(height, width, (0.15, 0.45), (0.10, 0.45)),
                ),
                (
                    RoiKind::RightEye,
                    Rect::from_fractions(height, width, (0.15, 0.45), (0.55, 0.90)),
                ),
                (
                    RoiKind::Mouth,
                    Rect::from_fractions(height, width, (0.60, 0.90), (0.25, 0.75)),
                ),
            ],
        }
    }
}

/// Difference-rate series `1 - d(first, frame)` per region, over the frames
/// `onset..=offset`. Index 0 is the onset frame and is always 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceRates {
    pub rates: [(RoiKind, Vec<f64>); 3],
}

impl DifferenceRates {
    pub fn mean(&self, roi: usize) -> f64 {
        let r = &self.rates[roi].1;
        r.iter().sum::<f64>() / r.len() as f64
    }
}

pub fn difference_rates(seq: &FrameSequence, rois: &RoiSet) -> Result<DifferenceRates, ApexError> {
    let span = &seq.frames[seq.onset..=seq.offset];
    if span.len() < 2 {
        return Err(ApexError::TooFewFrames(span.len()));
    }
    let mut out: Vec<(RoiKind, Vec<f64>)> = Vec::with_capacity(3);
    for &(kind, rect) in &rois.regions {
        let first = LbpHistogram::of_region(&span[0], rect)?;
        let mut series = Vec::with_capacity(span.len());
        series.push(0.0);
        for (j, frame) in span.iter().enumerate().skip(1) {
            let h = LbpHistogram::of_region(frame, rect)?;
            let d = histogram_correlation(&first, &h).ok_or(ApexError::EmptyHistogram {
                frame: seq.onset + j,
            })?;
            series.push(1.0 - d);
        }
        out.push((kind, series));
    }
    let rates: [(RoiKind, Vec<f64>); 3] = out.try_into().expect("three regions");
    Ok(DifferenceRates { rates })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotResult {
    /// 0-based frame index into the sequence, within `[onset, offset]`.
    pub apex: usize,
    pub roi: RoiKind,
    /// Every difference rate of the chosen region was zero.
    pub no_motion: bool,
    /// Rate series of the chosen region (index 0 = onset).
    pub rates: Vec<f64>,
}

/// Index of the first maximum.
pub fn argmax_first(series: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in series.iter().enumerate() {
        if v > series[best] {
            best = i;
        }
    }
    best
}

/// Divide-and-conquer peak search: halve the interval, keeping the half on
/// the rising side of the split point (the left half on ties), until at most
/// three frames remain; then take the first maximum of what is left.
/// Exact for unimodal series.
pub fn divide_and_conquer_peak(series: &[f64]) -> usize {
    assert!(!series.is_empty(), "empty series");
    let (mut lo, mut hi) = (0usize, series.len() - 1);
    while hi - lo + 1 > 3 {
        let mid = lo + (hi - lo) / 2;
        if series[mid + 1] > series[mid] {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo + argmax_first(&series[lo..=hi])
}

/// Picks the region with the largest mean difference rate (earliest region
/// on ties) and searches its series for the apex.
pub fn spot_apex(seq: &FrameSequence, rois: &RoiSet) -> Result<SpotResult, ApexError> {
    let span_len = seq.offset + 1 - seq.onset;
    if span_len < 3 {
        return Err(ApexError::TooFewFrames(span_len));
    }
    let rates = difference_rates(seq, rois)?;
    let mut best = 0;
    for r in 1..3 {
        if rates.mean(r) > rates.mean(best) {
            best = r;
        }
    }
    let (roi, series) = rates.rates[best].clone();
    let no_motion = series.iter().all(|&v| v == 0.0);
    let local = divide_and_conquer_peak(&series);
    Ok(SpotResult {
        apex: seq.onset + local,
        roi,
        no_motion,
        rates: series,
    })
}
