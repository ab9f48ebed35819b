//! Dense optical flow between the onset and apex frames (TV-L1, solved with
//! the primal-dual scheme over a coarse-to-fine pyramid), the optical strain
//! tensor of that flow, and the 28x28x3 `{u, v, |strain|}` network input.
//!
//! Flow convention: `apex(x + u, y + v) ≈ onset(x, y)`, so content moving
//! right gives positive `u` and content moving down gives positive `v`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DatasetId, EmotionClass, FrameSequence, SubjectKey};
use crate::numerics::{resample_bilinear, Grid2, Grid3};

pub const CUBE_SIDE: usize = 28;
pub const CUBE_CHANNELS: usize = 3;
pub const CUBE_LEN: usize = CUBE_SIDE * CUBE_SIDE * CUBE_CHANNELS;

pub const CACHE_MAGIC: &[u8; 4] = b"STST";
pub const CACHE_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame extents differ: {0:?} vs {1:?}")]
    ExtentMismatch((usize, usize), (usize, usize)),
    #[error("flow field must be at least 2x2, got {0:?}")]
    TooSmall((usize, usize)),
    #[error("{key}: apex equals onset (frame {frame}); zero flow carries no class signal")]
    Degenerate { key: String, frame: usize },
    #[error("{key}: frame index {index} outside sequence of {len} frames")]
    FrameIndex {
        key: String,
        index: usize,
        len: usize,
    },
    #[error("invalid flow parameters: {0}")]
    Params(String),
    #[error("cube cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Data-term weight.
    pub lambda: f64,
    /// Coupling between the primal variable and its thresholded copy.
    pub theta: f64,
    /// Dual step size.
    pub tau: f64,
    pub warps: usize,
    /// Inner primal-dual iterations per warp.
    pub iterations: usize,
    pub levels: usize,
    /// Pyramid downscale factor per level, in (0, 1).
    pub scale: f64,
    /// Inner loop stops once the mean squared update drops below epsilon².
    pub epsilon: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            warps: 5,
            iterations: 50,
            levels: 3,
            scale: 0.5,
            epsilon: 0.01,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::Params(m.into()));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad("theta must be positive");
        }
        if !(self.tau > 0.0 && self.tau <= 0.25) {
            return bad("tau must be in (0, 0.25]");
        }
        if self.warps == 0 || self.iterations == 0 || self.levels == 0 {
            return bad("warps, iterations and levels must be positive");
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return bad("scale must be in (0, 1)");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Grid2,
    pub v: Grid2,
    /// False when the last inner loop at full resolution hit its iteration
    /// cap before the update fell below epsilon.
    pub converged: bool,
}

/// Joint min-max normalisation of both frames to [0, 255]; this is what
/// makes the estimate invariant to a common intensity scale.
fn normalize_pair(a: &Grid2, b: &Grid2) -> (Grid2, Grid2) {
    let (lo_a, hi_a) = a.min_max();
    let (lo_b, hi_b) = b.min_max();
    let lo = lo_a.min(lo_b);
    let range = hi_a.max(hi_b) - lo;
    if range <= 0.0 {
        return (a.map(|_| 0.0), b.map(|_| 0.0));
    }
    let f = |v: f64| 255.0 * (v - lo) / range;
    (a.map(f), b.map(f))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn gaussian_blur(g: &Grid2, sigma: f64) -> Grid2 {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = g.extent();
    let tmp = Grid2::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * g.get_clamped(y as isize, x as isize + i as isize - r))
            .sum()
    });
    Grid2::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp.get_clamped(y as isize + i as isize - r, x as isize))
            .sum()
    })
}

/// Resamples with pixel-centre alignment (used between pyramid levels).
fn zoom(g: &Grid2, height: usize, width: usize) -> Grid2 {
    let sy = g.height() as f64 / height as f64;
    let sx = g.width() as f64 / width as f64;
    Grid2::from_fn(height, width, |y, x| {
        g.sample_bilinear((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5)
    })
}

fn build_pyramid(base: &Grid2, params: &FlowParams) -> Vec<Grid2> {
    let sigma = 0.6 * (1.0 / (params.scale * params.scale) - 1.0).sqrt();
    let mut levels = vec![base.clone()];
    for _ in 1..params.levels {
        let prev = levels.last().expect("non-empty");
        let h = (prev.height() as f64 * params.scale).round() as usize;
        let w = (prev.width() as f64 * params.scale).round() as usize;
        if h < 8 || w < 8 {
            break;
        }
        levels.push(zoom(&gaussian_blur(prev, sigma), h, w));
    }
    levels
}

fn centered_gradient(g: &Grid2) -> (Grid2, Grid2) {
    let (h, w) = g.extent();
    let gx = Grid2::from_fn(h, w, |y, x| {
        let (y, x) = (y as isize, x as isize);
        0.5 * (g.get_clamped(y, x + 1) - g.get_clamped(y, x - 1))
    });
    let gy = Grid2::from_fn(h, w, |y, x| {
        let (y, x) = (y as isize, x as isize);
        0.5 * (g.get_clamped(y + 1, x) - g.get_clamped(y - 1, x))
    });
    (gx, gy)
}

/// Forward differences; zero on the last column / row.
fn forward_gradient(g: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x + 1 < w { g[i + 1] - g[i] } else { 0.0 };
            gy[i] = if y + 1 < h { g[i + w] - g[i] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`forward_gradient`].
fn divergence(px: &[f64], py: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = (if x + 1 < w { px[i] } else { 0.0 }) - (if x > 0 { px[i - 1] } else { 0.0 });
            let dy = (if y + 1 < h { py[i] } else { 0.0 }) - (if y > 0 { py[i - w] } else { 0.0 });
            out[i] = dx + dy;
        }
    }
}

struct LevelState {
    u: Vec<f64>,
    v: Vec<f64>,
    // Dual variables for u (pu) and v (pv), x and y components.
    pu: [Vec<f64>; 2],
    pv: [Vec<f64>; 2],
}

impl LevelState {
    fn zeros(n: usize) -> Self {
        Self {
            u: vec![0.0; n],
            v: vec![0.0; n],
            pu: [vec![0.0; n], vec![0.0; n]],
            pv: [vec![0.0; n], vec![0.0; n]],
        }
    }

    fn upsample(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let up = |d: &Vec<f64>, factor: f64| -> Vec<f64> {
            let g = Grid2::new(from.0, from.1, d.clone()).expect("level extent");
            let mut z = zoom(&g, to.0, to.1).into_data();
            z.iter_mut().for_each(|v| *v *= factor);
            z
        };
        let fx = to.1 as f64 / from.1 as f64;
        let fy = to.0 as f64 / from.0 as f64;
        Self {
            u: up(&self.u, fx),
            v: up(&self.v, fy),
            pu: [up(&self.pu[0], 1.0), up(&self.pu[1], 1.0)],
            pv: [up(&self.pv[0], 1.0), up(&self.pv[1], 1.0)],
        }
    }
}

/// Runs all warps at one pyramid level; returns whether the final inner
/// loop converged.
fn solve_level(i0: &Grid2, i1: &Grid2, st: &mut LevelState, params: &FlowParams) -> bool {
    let (h, w) = i0.extent();
    let n = h * w;
    let (i1x, i1y) = centered_gradient(i1);
    let lt = params.lambda * params.theta;
    let taut = params.tau / params.theta;
    let stop = params.epsilon * params.epsilon;

    let mut i1w = vec![0.0; n];
    let mut i1wx = vec![0.0; n];
    let mut i1wy = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut rho_c = vec![0.0; n];
    let mut wu = vec![0.0; n];
    let mut wv = vec![0.0; n];
    let mut div_u = vec![0.0; n];
    let mut div_v = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut converged = false;

    for _ in 0..params.warps {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sy, sx) = (y as f64 + st.v[i], x as f64 + st.u[i]);
                i1w[i] = i1.sample_bilinear(sy, sx);
                i1wx[i] = i1x.sample_bilinear(sy, sx);
                i1wy[i] = i1y.sample_bilinear(sy, sx);
                grad[i] = i1wx[i] * i1wx[i] + i1wy[i] * i1wy[i];
                rho_c[i] = i1w[i] - i1wx[i] * st.u[i] - i1wy[i] * st.v[i] - i0.data()[i];
            }
        }
        converged = false;
        for _ in 0..params.iterations {
            // Pointwise thresholding of the data term.
            for i in 0..n {
                let rho = rho_c[i] + i1wx[i] * st.u[i] + i1wy[i] * st.v[i];
                let (du, dv) = if rho < -lt * grad[i] {
                    (lt * i1wx[i], lt * i1wy[i])
                } else if rho > lt * grad[i] {
                    (-lt * i1wx[i], -lt * i1wy[i])
                } else if grad[i] > 1e-10 {
                    let f = -rho / grad[i];
                    (f * i1wx[i], f * i1wy[i])
                } else {
                    (0.0, 0.0)
                };
                wu[i] = st.u[i] + du;
                wv[i] = st.v[i] + dv;
            }
            divergence(&st.pu[0], &st.pu[1], h, w, &mut div_u);
            divergence(&st.pv[0], &st.pv[1], h, w, &mut div_v);
            let mut err = 0.0;
            for i in 0..n {
                let nu = wu[i] + params.theta * div_u[i];
                let nv = wv[i] + params.theta * div_v[i];
                err += (nu - st.u[i]).powi(2) + (nv - st.v[i]).powi(2);
                st.u[i] = nu;
                st.v[i] = nv;
            }
            // Dual ascent with reprojection onto the unit ball.
            forward_gradient(&st.u, h, w, &mut gx, &mut gy);
            for i in 0..n {
                let ng = 1.0 + taut * (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
                st.pu[0][i] = (st.pu[0][i] + taut * gx[i]) / ng;
                st.pu[1][i] = (st.pu[1][i] + taut * gy[i]) / ng;
            }
            forward_gradient(&st.v, h, w, &mut gx, &mut gy);
            for i in 0..n {
                let ng = 1.0 + taut * (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
                st.pv[0][i] = (st.pv[0][i] + taut * gx[i]) / ng;
                st.pv[1][i] = (st.pv[1][i] + taut * gy[i]) / ng;
            }
            if err / n as f64 <= stop {
                converged = true;
                break;
            }
        }
    }
    converged
}

/// TV-L1 optical flow from `onset` to `apex`.
pub fn estimate_flow(
    onset: &Grid2,
    apex: &Grid2,
    params: &FlowParams,
) -> Result<FlowField, FlowError> {
    params.validate()?;
    if onset.extent() != apex.extent() {
        return Err(FlowError::ExtentMismatch(onset.extent(), apex.extent()));
    }
    let (i0, i1) = normalize_pair(onset, apex);
    let p0 = build_pyramid(&i0, params);
    let p1 = build_pyramid(&i1, params);
    let coarsest = p0.len() - 1;
    let mut state = LevelState::zeros(p0[coarsest].data().len());
    let mut converged = false;
    for level in (0..=coarsest).rev() {
        if level < coarsest {
            state = state.upsample(p0[level + 1].extent(), p0[level].extent());
        }
        converged = solve_level(&p0[level], &p1[level], &mut state, params);
    }
    let (h, w) = onset.extent();
    Ok(FlowField {
        u: Grid2::new(h, w, state.u).expect("level 0 extent"),
        v: Grid2::new(h, w, state.v).expect("level 0 extent"),
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrainField {
    pub exx: Grid2,
    pub eyy: Grid2,
    pub exy: Grid2,
    pub eyx: Grid2,
    pub magnitude: Grid2,
}

/// Central differences inside, one-sided on the borders.
fn derivative_x(g: &Grid2) -> Grid2 {
    let w = g.width();
    Grid2::from_fn(g.height(), w, |y, x| {
        if x == 0 {
            g.get(y, 1) - g.get(y, 0)
        } else if x == w - 1 {
            g.get(y, x) - g.get(y, x - 1)
        } else {
            0.5 * (g.get(y, x + 1) - g.get(y, x - 1))
        }
    })
}

fn derivative_y(g: &Grid2) -> Grid2 {
    let h = g.height();
    Grid2::from_fn(h, g.width(), |y, x| {
        if y == 0 {
            g.get(1, x) - g.get(0, x)
        } else if y == h - 1 {
            g.get(y, x) - g.get(y - 1, x)
        } else {
            0.5 * (g.get(y + 1, x) - g.get(y - 1, x))
        }
    })
}

/// Strain tensor `½(∇u + ∇uᵀ)` of the flow and its per-pixel magnitude
/// `sqrt(exx² + eyy² + exy² + eyx²)`.
pub fn optical_strain(flow: &FlowField) -> Result<StrainField, FlowError> {
    let ext = flow.u.extent();
    if flow.v.extent() != ext {
        return Err(FlowError::ExtentMismatch(ext, flow.v.extent()));
    }
    if ext.0 < 2 || ext.1 < 2 {
        return Err(FlowError::TooSmall(ext));
    }
    let ux = derivative_x(&flow.u);
    let uy = derivative_y(&flow.u);
    let vx = derivative_x(&flow.v);
    let vy = derivative_y(&flow.v);
    let shear = Grid2::from_fn(ext.0, ext.1, |y, x| 0.5 * (uy.get(y, x) + vx.get(y, x)));
    let magnitude = Grid2::from_fn(ext.0, ext.1, |y, x| {
        let (a, b, s) = (ux.get(y, x), vy.get(y, x), shear.get(y, x));
        (a * a + b * b + 2.0 * s * s).sqrt()
    });
    Ok(StrainField {
        exx: ux,
        eyy: vy,
        eyx: shear.clone(),
        exy: shear,
        magnitude,
    })
}

/// Identity of one clip: its subject plus the video name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub dataset: DatasetId,
    pub subject: String,
    pub video: String,
}

impl SampleKey {
    pub fn of(seq: &FrameSequence) -> Self {
        Self {
            dataset: seq.dataset,
            subject: seq.subject.clone(),
            video: seq.video.clone(),
        }
    }

    pub fn subject_key(&self) -> SubjectKey {
        SubjectKey::new(self.dataset, self.subject.clone())
    }

    /// `DATASET/subject/video`
    pub fn encode(&self) -> String {
        format!("{}/{}/{}", self.dataset, self.subject, self.video)
    }

    pub fn decode(s: &str) -> Option<Self> {
        let (dataset, rest) = s.split_once('/')?;
        let (subject, video) = rest.split_once('/')?;
        if subject.is_empty() || video.is_empty() || video.contains('/') {
            return None;
        }
        Some(Self {
            dataset: dataset.parse().ok()?,
            subject: subject.into(),
            video: video.into(),
        })
    }
}

/// The 28x28x3 network input: channels `(u, v, |strain|)`, each min-max
/// normalised to [0, 1] with its original range kept in `ranges`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCube {
    pub key: SampleKey,
    pub label: EmotionClass,
    pub data: Grid3,
    pub ranges: [(f64, f64); CUBE_CHANNELS],
}

impl FlowCube {
    /// Undoes the normalisation of one channel.
    pub fn denormalized_channel(&self, c: usize) -> Grid2 {
        let (lo, hi) = self.ranges[c];
        let ch = self.data.channel(c).expect("channel index < 3");
        if hi > lo {
            ch.map(|v| lo + v * (hi - lo))
        } else {
            ch.map(|_| lo)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CubeWarnings {
    /// Channels whose resampled values were constant (filled with 0.5).
    pub constant_channels: Vec<usize>,
    pub flow_not_converged: bool,
}

fn normalize_channel(g: &Grid2) -> (Grid2, (f64, f64), bool) {
    let (lo, hi) = g.min_max();
    if hi > lo {
        (g.map(|v| (v - lo) / (hi - lo)), (lo, hi), false)
    } else {
        (g.map(|_| 0.5), (lo, hi), true)
    }
}

/// Flow between onset and `apex` → strain → each channel resampled to
/// 28x28 → per-channel min-max normalisation.
pub fn build_flow_cube(
    seq: &FrameSequence,
    apex: usize,
    params: &FlowParams,
) -> Result<(FlowCube, CubeWarnings), FlowError> {
    let key = SampleKey::of(seq);
    let len = seq.frames.len();
    for index in [seq.onset, apex] {
        if index >= len {
            return Err(FlowError::FrameIndex {
                key: key.encode(),
                index,
                len,
            });
        }
    }
    if apex == seq.onset {
        return Err(FlowError::Degenerate {
            key: key.encode(),
            frame: apex + 1,
        });
    }
    let flow = estimate_flow(&seq.frames[seq.onset], &seq.frames[apex], params)?;
    let strain = optical_strain(&flow)?;
    let mut warnings = CubeWarnings {
        flow_not_converged: !flow.converged,
        ..Default::default()
    };
    let mut channels = Vec::with_capacity(CUBE_CHANNELS);
    let mut ranges = [(0.0, 0.0); CUBE_CHANNELS];
    for (c, g) in [&flow.u, &flow.v, &strain.magnitude]
        .into_iter()
        .enumerate()
    {
        let resampled = resample_bilinear(g, CUBE_SIDE, CUBE_SIDE);
        let (norm, range, constant) = normalize_channel(&resampled);
        if constant {
            warnings.constant_channels.push(c);
        }
        ranges[c] = range;
        channels.push(norm);
    }
    let data = Grid3::from_channels(&channels).expect("equal extents");
    Ok((
        FlowCube {
            key,
            label: seq.label,
            data,
            ranges,
        },
        warnings,
    ))
}

// ---------------------------------------------------------------------------
// Binary cube cache: "STST", version byte, then records of
//   u32 LE key length, key bytes (UTF-8 `DATASET/subject/video`), label byte,
//   3 x (f64 LE min, f64 LE max), 28*28*3 f64 LE (row-major, channel-last)
// until end of file.

pub fn write_cube_cache<W: Write>(mut w: W, cubes: &[FlowCube]) -> Result<(), FlowError> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&[CACHE_VERSION])?;
    for cube in cubes {
        let key = cube.key.encode();
        let len = u32::try_from(key.len()).map_err(|_| FlowError::Cache("key too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        w.write_all(&[cube.label.index() as u8])?;
        for (lo, hi) in cube.ranges {
            w.write_all(&lo.to_le_bytes())?;
            w.write_all(&hi.to_le_bytes())?;
        }
        if cube.data.shape() != (CUBE_SIDE, CUBE_SIDE, CUBE_CHANNELS) {
            return Err(FlowError::Cache(format!(
                "cube has shape {:?}",
                cube.data.shape()
            )));
        }
        for v in cube.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FlowError> {
        if self.bytes.len() - self.pos < n {
            return Err(FlowError::Cache(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self, what: &str) -> Result<f64, FlowError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Decodes a complete cube cache held in memory.
pub fn parse_cube_cache(bytes: &[u8]) -> Result<Vec<FlowCube>, FlowError> {
    let mut cur = ByteCursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CACHE_MAGIC {
        return Err(FlowError::Cache("bad magic bytes".into()));
    }
    let version = cur.take(1, "version")?[0];
    if version != CACHE_VERSION {
        return Err(FlowError::Cache(format!(
            "unsupported version {version} (expected {CACHE_VERSION})"
        )));
    }
    let mut cubes = Vec::new();
    while !cur.done() {
        let len =
            u32::from_le_bytes(cur.take(4, "key length")?.try_into().expect("4 bytes")) as usize;
        let key_bytes = cur.take(len, "key")?;
        let key_str = std::str::from_utf8(key_bytes)
            .map_err(|_| FlowError::Cache("key is not UTF-8".into()))?;
        let key = SampleKey::decode(key_str)
            .ok_or_else(|| FlowError::Cache(format!("malformed sample key `{key_str}`")))?;
        let label_byte = cur.take(1, "label")?[0];
        let label = EmotionClass::from_index(label_byte as usize)
            .ok_or_else(|| FlowError::Cache(format!("invalid label byte {label_byte}")))?;
        let mut ranges = [(0.0, 0.0); CUBE_CHANNELS];
        for r in &mut ranges {
            *r = (cur.f64("range")?, cur.f64("range")?);
        }
        let raw = cur.take(CUBE_LEN * 8, "cube data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data
            .iter()
            .chain(ranges.iter().flat_map(|(a, b)| [a, b]))
            .any(|v| !v.is_finite())
        {
            return Err(FlowError::Cache(format!(
                "non-finite value in record `{key_str}`"
            )));
        }
        cubes.push(FlowCube {
            key,
            label,
            data: Grid3::new(CUBE_SIDE, CUBE_SIDE, CUBE_CHANNELS, data).expect("fixed length"),
            ranges,
        });
    }
    Ok(cubes)
}

pub fn read_cube_cache<R: Read>(mut r: R) -> Result<Vec<FlowCube>, FlowError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_cube_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthSpec};
    use proptest::prelude::*;

    /// Periodic texture with integer-period components, evaluated at a
    /// shifted position: `shifted(x, y) = base(x - dx, y - dy)`.
    fn periodic(h: usize, w: usize, dx: f64, dy: f64) -> Grid2 {
        use std::f64::consts::TAU;
        Grid2::from_fn(h, w, |y, x| {
            let (x, y) = (x as f64 - dx, y as f64 - dy);
            0.5 + 0.15 * (TAU * x / 16.0).sin() * (TAU * y / 32.0).cos()
                + 0.12 * (TAU * (x + y) / 32.0 + 0.7).sin()
                + 0.1 * (TAU * y / 16.0 + 1.3).sin()
                + 0.08 * (TAU * (2.0 * x - y) / 64.0).cos()
        })
    }

    fn interior_mean(g: &Grid2, border: usize, f: impl Fn(f64) -> f64) -> f64 {
        let mut s = 0.0;
        let mut n = 0;
        for y in border..g.height() - border {
            for x in border..g.width() - border {
                s += f(g.get(y, x));
                n += 1;
            }
        }
        s / n as f64
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = periodic(32, 32, 0.0, 0.0);
        let flow = estimate_flow(&f, &f, &FlowParams::default()).unwrap();
        assert!(flow.u.data().iter().chain(flow.v.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn one_pixel_right_shift() {
        let a = periodic(48, 48, 0.0, 0.0);
        let b = periodic(48, 48, 1.0, 0.0);
        let flow = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let mu = interior_mean(&flow.u, 4, |v| v);
        let mv = interior_mean(&flow.v, 4, f64::abs);
        assert!((0.8..=1.2).contains(&mu), "mean u {mu}");
        assert!(mv <= 0.1, "mean |v| {mv}");
    }

    #[test]
    fn diagonal_shift() {
        let a = periodic(64, 64, 0.0, 0.0);
        let b = periodic(64, 64, 2.0, -1.0);
        let flow = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let mu = interior_mean(&flow.u, 4, |v| v);
        let mv = interior_mean(&flow.v, 4, |v| v);
        assert!((mu - 2.0).abs() < 0.2, "mean u {mu}");
        assert!((mv + 1.0).abs() < 0.2, "mean v {mv}");
    }

    #[test]
    fn intensity_scale_equivariance() {
        let a = periodic(40, 40, 0.0, 0.0);
        let b = periodic(40, 40, 1.0, 1.0);
        let p = FlowParams::default();
        let f1 = estimate_flow(&a, &b, &p).unwrap();
        let f2 = estimate_flow(&a.map(|v| v * 0.6), &b.map(|v| v * 0.6), &p).unwrap();
        let mad: f64 =
            f1.u.data()
                .iter()
                .zip(f2.u.data())
                .chain(f1.v.data().iter().zip(f2.v.data()))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / (2 * f1.u.data().len()) as f64;
        assert!(mad < 0.05, "{mad}");
    }

    fn field(
        h: usize,
        w: usize,
        u: impl Fn(f64, f64) -> f64,
        v: impl Fn(f64, f64) -> f64,
    ) -> FlowField {
        FlowField {
            u: Grid2::from_fn(h, w, |y, x| u(y as f64, x as f64)),
            v: Grid2::from_fn(h, w, |y, x| v(y as f64, x as f64)),
            converged: true,
        }
    }

    #[test]
    fn strain_of_translation_and_linear_fields() {
        let s = optical_strain(&field(6, 7, |_, _| 1.3, |_, _| -0.4)).unwrap();
        assert!(s.magnitude.data().iter().all(|&v| v == 0.0));

        let a = 0.37;
        let s = optical_strain(&field(6, 7, |_, x| a * x, |_, _| 0.0)).unwrap();
        for i in 0..42 {
            assert!((s.exx.data()[i] - a).abs() < 1e-12);
            assert!(s.eyy.data()[i].abs() < 1e-12 && s.exy.data()[i].abs() < 1e-12);
            assert!((s.magnitude.data()[i] - a).abs() < 1e-12);
        }
        assert!(optical_strain(&field(1, 5, |_, _| 0.0, |_, _| 0.0)).is_err());
    }

    #[test]
    fn strain_of_simple_shear_matches_finite_difference_oracle() {
        let a = 0.8;
        let u = |y: f64, _x: f64| a * y;
        let s = optical_strain(&field(9, 9, u, |_, _| 0.0)).unwrap();
        // Oracle: symmetric difference quotient of the analytic field.
        let h = 1e-3;
        for y in 1..8 {
            for x in 1..8 {
                let (yf, xf) = (y as f64, x as f64);
                let du_dy = (u(yf + h, xf) - u(yf - h, xf)) / (2.0 * h);
                let exy = 0.5 * du_dy;
                assert!((s.exy.get(y, x) - exy).abs() < 1e-10);
                assert!((s.magnitude.get(y, x) - a / 2f64.sqrt()).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn strain_is_linear(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
            let mut s = seed;
            let mut r = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(11); (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
            let f = FlowField { u: Grid2::from_fn(7, 6, |_, _| r()), v: Grid2::from_fn(7, 6, |_, _| r()), converged: true };
            let g = FlowField { u: Grid2::from_fn(7, 6, |_, _| r()), v: Grid2::from_fn(7, 6, |_, _| r()), converged: true };
            let combo = FlowField {
                u: Grid2::new(7, 6, f.u.data().iter().zip(g.u.data()).map(|(p, q)| a * p + b * q).collect()).unwrap(),
                v: Grid2::new(7, 6, f.v.data().iter().zip(g.v.data()).map(|(p, q)| a * p + b * q).collect()).unwrap(),
                converged: true,
            };
            let (sf, sg, sc) = (optical_strain(&f).unwrap(), optical_strain(&g).unwrap(), optical_strain(&combo).unwrap());
            for (c, (x, y)) in [(&sc.exx, (&sf.exx, &sg.exx)), (&sc.eyy, (&sf.eyy, &sg.eyy)), (&sc.exy, (&sf.exy, &sg.exy))] {
                for i in 0..42 {
                    prop_assert!((c.data()[i] - (a * x.data()[i] + b * y.data()[i])).abs() < 1e-12);
                }
            }
            prop_assert_eq!(&sc.exy, &sc.eyx);
        }

        #[test]
        fn strain_magnitude_transpose_symmetry(seed in any::<u64>()) {
            let mut s = seed;
            let mut r = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(5); (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
            let f = FlowField { u: Grid2::from_fn(6, 8, |_, _| r()), v: Grid2::from_fn(6, 8, |_, _| r()), converged: true };
            // Swap axes: u' = v transposed, v' = u transposed.
            let t = FlowField {
                u: Grid2::from_fn(8, 6, |y, x| f.v.get(x, y)),
                v: Grid2::from_fn(8, 6, |y, x| f.u.get(x, y)),
                converged: true,
            };
            let (a, b) = (optical_strain(&f).unwrap(), optical_strain(&t).unwrap());
            for y in 0..6 { for x in 0..8 {
                prop_assert!((a.magnitude.get(y, x) - b.magnitude.get(x, y)).abs() < 1e-12);
            }}
        }
    }

    fn small_synth() -> crate::dataio::SynthOutput {
        generate_synthetic(&SynthSpec {
            seed: 5,
            subjects: 1,
            clips_per_subject: 3,
            frames: 12,
            height: 60,
            width: 50,
        })
        .unwrap()
    }

    #[test]
    fn cube_shape_and_degenerate_rejection() {
        let out = small_synth();
        let seq = &out.dataset.sequences[0];
        let (cube, _) = build_flow_cube(seq, out.truth[0].apex, &FlowParams::default()).unwrap();
        assert_eq!(cube.data.shape(), (28, 28, 3));
        assert!(cube.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(
            build_flow_cube(seq, seq.onset, &FlowParams::default()),
            Err(FlowError::Degenerate { .. })
        ));
    }

    #[test]
    fn positive_and_negative_cubes_separate_on_v() {
        let out = small_synth();
        let p = FlowParams::default();
        let mean_v = |i: usize| {
            let (cube, _) =
                build_flow_cube(&out.dataset.sequences[i], out.truth[i].apex, &p).unwrap();
            interior_mean(&cube.data.channel(1).unwrap(), 2, |v| v)
        };
        // Clips cycle Negative, Positive, Surprise.
        let (neg, pos) = (mean_v(0), mean_v(1));
        assert!(
            pos - neg >= crate::dataio::V_MEAN_SEPARATION,
            "pos {pos} neg {neg}"
        );
    }

    #[test]
    fn cache_round_trip_and_rejections() {
        let cube = FlowCube {
            key: SampleKey {
                dataset: DatasetId::Casme2,
                subject: "sub01".into(),
                video: "EP02_01f".into(),
            },
            label: EmotionClass::Surprise,
            data: Grid3::from_fn(28, 28, 3, |y, x, c| (y * 84 + x * 3 + c) as f64 / 2352.0),
            ranges: [(-1.0, 2.0), (-0.5, 0.25), (0.0, 0.125)],
        };
        let mut buf = Vec::new();
        write_cube_cache(&mut buf, &[cube.clone(), cube.clone()]).unwrap();
        let back = parse_cube_cache(&buf).unwrap();
        assert_eq!(back, vec![cube.clone(), cube]);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(parse_cube_cache(&bad).is_err());
        let mut newer = buf.clone();
        newer[4] = 9;
        assert!(parse_cube_cache(&newer)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(parse_cube_cache(&buf[..buf.len() - 3]).is_err());
        assert_eq!(parse_cube_cache(b"STST\x01").unwrap(), vec![]);
    }
}
