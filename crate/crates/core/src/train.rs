//! Desk-scale dual-encoder training engine.
//!
//! Two small perceptron towers (affine, tanh, affine, L2-normalize) map image
//! and text feature rows into a shared d-dimensional space. Three contrastive
//! objectives drive them:
//!
//! * intra-level: symmetric InfoNCE between paired image/text embeddings at
//!   one granularity (figure M, panel P, region R);
//! * inter-level: InfoNCE between a coarse item's embedding and the
//!   average-pooled embeddings of its children, separately for images and
//!   texts;
//! * fine-grained: InfoNCE between region crop embeddings and their texts,
//!   plus a consistency term tying projected ROI-pooled panel-map features to
//!   the same crop embeddings.
//!
//! Level identity enters through two small linear heads: the M and P pathways
//! apply a dedicated d x d head to the pre-normalization tower output, while
//! the R pathway uses the tower output directly. Heads start at identity, so
//! at initialization all three pathways coincide.
//!
//! Every gradient is hand-derived; central finite differences are the oracle
//! the test suite holds them to. Training alternates granularities on a
//! configurable cycle and optimizes with decoupled-weight-decay Adam under a
//! linear-warmup cosine learning-rate schedule with per-branch base rates.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Unit};

pub const LOG_SCALE_INIT: f64 = 2.6592600369327783; // ln(1/0.07)
pub const LOG_SCALE_MIN: f64 = -4.605170185988091; // ln(1/100)
pub const LOG_SCALE_MAX: f64 = 4.605170185988092; // ln(100)
/// Rows with a pre-normalization norm below this are degenerate and map to
/// the first canonical basis vector with zero gradient.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{tower} tower expects feature width {expected}, got {got}")]
    WidthMismatch { tower: Tower, expected: usize, got: usize },
    #[error("contrastive batch must contain at least one pair")]
    EmptyBatch,
    #[error("embedding batches must have equal lengths, got {left} and {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("aggregation group {group} is empty")]
    EmptyGroup { group: usize },
    #[error("index {index} out of range for {what} of length {len}")]
    DanglingIndex { what: &'static str, index: usize, len: usize },
    #[error("scheduler expected a {expected} batch, got {got}")]
    LevelMismatch { expected: Level, got: Level },
    #[error("step {step} produced a non-finite loss; parameters unchanged")]
    NonFiniteLoss { step: u64 },
    #[error("invalid cycle spec {0:?}: expected colon-separated counts like 1:1:1 with a positive total")]
    BadCycle(String),
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint malformed: {0}")]
    BadCheckpoint(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode image: {0}")]
    ImageDecode(String),
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Width configuration of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Image tower input width.
    pub d_in_v: usize,
    /// Text tower input width.
    pub d_in_t: usize,
    /// Hidden width of both towers.
    pub hidden: usize,
    /// Embedding dimension.
    pub d: usize,
    /// ROI pooling grid side.
    pub g: usize,
    /// Panel feature-map channels.
    pub c: usize,
}

/// Byte layout of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Segments {
    pub v_w1: Range<usize>,
    pub v_b1: Range<usize>,
    pub v_w2: Range<usize>,
    pub v_b2: Range<usize>,
    pub t_w1: Range<usize>,
    pub t_b1: Range<usize>,
    pub t_w2: Range<usize>,
    pub t_b2: Range<usize>,
    pub roi_w: Range<usize>,
    pub roi_b: Range<usize>,
    pub m_w: Range<usize>,
    pub m_b: Range<usize>,
    pub p_w: Range<usize>,
    pub p_b: Range<usize>,
    pub log_scale: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.d < 2 {
            return Err(TrainError::BadConfig(format!(
                "embedding dimension must be at least 2, got {}",
                self.d
            )));
        }
        for (name, v) in [
            ("d_in_v", self.d_in_v),
            ("d_in_t", self.d_in_t),
            ("hidden", self.hidden),
            ("g", self.g),
            ("c", self.c),
        ] {
            if v == 0 {
                return Err(TrainError::BadConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> Segments {
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let range = cursor..cursor + len;
            cursor += len;
            range
        };
        let (h, d) = (self.hidden, self.d);
        Segments {
            v_w1: take(self.d_in_v * h),
            v_b1: take(h),
            v_w2: take(h * d),
            v_b2: take(d),
            t_w1: take(self.d_in_t * h),
            t_b1: take(h),
            t_w2: take(h * d),
            t_b2: take(d),
            roi_w: take(self.g * self.g * self.c * d),
            roi_b: take(d),
            m_w: take(d * d),
            m_b: take(d),
            p_w: take(d * d),
            p_b: take(d),
            log_scale: {
                let r = take(1);
                r.start
            },
        }
    }

    pub fn n_params(&self) -> usize {
        self.segments().log_scale + 1
    }
}

/// Optimizer branch a coordinate belongs to; each has its own base rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Both towers plus the logit scale.
    Shared,
    /// ROI projection head used by the fine-grained consistency term.
    RoiHead,
    /// Panel-level linear head.
    PHead,
    /// Figure-level linear head.
    MHead,
}

/// Embedding pathway: which level head is applied after the tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    M,
    P,
    R,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::M => "M",
            Level::P => "P",
            Level::R => "R",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tower {
    Image,
    Text,
}

impl std::fmt::Display for Tower {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tower::Image => "image",
            Tower::Text => "text",
        })
    }
}

/// All trainable parameters in one flat vector with a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: ModelDims,
    pub theta: Vec<f64>,
}

impl EncoderParams {
    /// Seeded initialization: uniform Xavier fan-based weights for the
    /// towers and ROI head, identity level heads, small nonzero output
    /// biases (keeps encode well-defined at the origin), scale at its
    /// documented starting temperature.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, TrainError> {
        dims.validate()?;
        let seg = dims.segments();
        let mut theta = vec![0.0; dims.n_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |theta: &mut Vec<f64>, range: &Range<usize>, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for i in range.clone() {
                theta[i] = rng.gen_range(-bound..=bound);
            }
        };
        xavier(&mut theta, &seg.v_w1, dims.d_in_v, dims.hidden);
        xavier(&mut theta, &seg.v_w2, dims.hidden, dims.d);
        xavier(&mut theta, &seg.t_w1, dims.d_in_t, dims.hidden);
        xavier(&mut theta, &seg.t_w2, dims.hidden, dims.d);
        xavier(&mut theta, &seg.roi_w, dims.g * dims.g * dims.c, dims.d);
        for i in seg.v_b2.clone().chain(seg.t_b2.clone()) {
            theta[i] = 0.01;
        }
        for head in [&seg.m_w, &seg.p_w] {
            for row in 0..dims.d {
                theta[head.start + row * dims.d + row] = 1.0;
            }
        }
        theta[seg.log_scale] = LOG_SCALE_INIT;
        Ok(EncoderParams { dims, theta })
    }

    pub fn log_scale(&self) -> f64 {
        self.theta[self.dims.segments().log_scale]
    }

    /// Branch of every coordinate, aligned with `theta`.
    pub fn branch_of(&self, index: usize) -> Branch {
        let seg = self.dims.segments();
        if seg.roi_w.contains(&index) || seg.roi_b.contains(&index) {
            Branch::RoiHead
        } else if seg.m_w.contains(&index) || seg.m_b.contains(&index) {
            Branch::MHead
        } else if seg.p_w.contains(&index) || seg.p_b.contains(&index) {
            Branch::PHead
        } else {
            Branch::Shared
        }
    }
}

// ---------------------------------------------------------------------------
// Dense row-major matrices (internal)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged feature rows");
            data.extend_from_slice(row);
        }
        Mat { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

/// out[n,q] += x[n,p] * w[p,q], with w taken from a flat slice.
fn affine_forward(x: &Mat, w: &[f64], b: &[f64], q: usize) -> Mat {
    let p = x.cols;
    assert_eq!(w.len(), p * q, "weight slice shape mismatch");
    assert_eq!(b.len(), q, "bias slice shape mismatch");
    let mut out = Mat::zeros(x.rows, q);
    for n in 0..x.rows {
        for j in 0..q {
            let mut acc = b[j];
            for k in 0..p {
                acc += x.at(n, k) * w[k * q + j];
            }
            *out.at_mut(n, j) = acc;
        }
    }
    out
}

/// Backward of y = x w + b: accumulates dw += x^T dy and db += sum_rows dy,
/// returns dx = dy w^T.
fn affine_backward(
    x: &Mat,
    w: &[f64],
    dy: &Mat,
    dw: &mut [f64],
    db: &mut [f64],
) -> Mat {
    let (p, q) = (x.cols, dy.cols);
    let mut dx = Mat::zeros(x.rows, p);
    for n in 0..x.rows {
        for j in 0..q {
            let g = dy.at(n, j);
            if g == 0.0 {
                continue;
            }
            db[j] += g;
            for k in 0..p {
                dw[k * q + j] += x.at(n, k) * g;
                *dx.at_mut(n, k) += g * w[k * q + j];
            }
        }
    }
    dx
}

/// Row-wise L2 normalization with the degenerate-row rule: norms below
/// `NORM_EPS` map to the first canonical basis vector and block gradient.
fn normalize_rows(z: &Mat) -> (Mat, Vec<f64>) {
    let mut out = Mat::zeros(z.rows, z.cols);
    let mut norms = vec![0.0; z.rows];
    for n in 0..z.rows {
        let norm = z.row(n).iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[n] = norm;
        if norm < NORM_EPS {
            *out.at_mut(n, 0) = 1.0;
        } else {
            for j in 0..z.cols {
                *out.at_mut(n, j) = z.at(n, j) / norm;
            }
        }
    }
    (out, norms)
}

/// Backward of e = z/|z|: dz = (de - e (e . de)) / |z|; degenerate rows get
/// zero gradient.
fn normalize_backward(e: &Mat, norms: &[f64], de: &Mat) -> Mat {
    let mut dz = Mat::zeros(e.rows, e.cols);
    for n in 0..e.rows {
        if norms[n] < NORM_EPS {
            continue;
        }
        let dot: f64 = (0..e.cols).map(|j| e.at(n, j) * de.at(n, j)).sum();
        for j in 0..e.cols {
            *dz.at_mut(n, j) = (de.at(n, j) - e.at(n, j) * dot) / norms[n];
        }
    }
    dz
}

// ---------------------------------------------------------------------------
// Encoder forward/backward
// ---------------------------------------------------------------------------

struct TowerSegments {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    d_in: usize,
}

fn tower_segments(params: &EncoderParams, tower: Tower) -> TowerSegments {
    let seg = params.dims.segments();
    match tower {
        Tower::Image => TowerSegments {
            w1: seg.v_w1,
            b1: seg.v_b1,
            w2: seg.v_w2,
            b2: seg.v_b2,
            d_in: params.dims.d_in_v,
        },
        Tower::Text => TowerSegments {
            w1: seg.t_w1,
            b1: seg.t_b1,
            w2: seg.t_w2,
            b2: seg.t_b2,
            d_in: params.dims.d_in_t,
        },
    }
}

fn head_segments(params: &EncoderParams, level: Level) -> Option<(Range<usize>, Range<usize>)> {
    let seg = params.dims.segments();
    match level {
        Level::M => Some((seg.m_w, seg.m_b)),
        Level::P => Some((seg.p_w, seg.p_b)),
        Level::R => None,
    }
}

/// Cached activations of one encode pass, enough to backpropagate.
pub struct EncodeCache {
    tower: Tower,
    level: Level,
    x: Mat,
    a: Mat,
    /// Norms of the pre-normalization rows.
    pre_norms: Vec<f64>,
    /// Tower output, kept only when a level head consumed it.
    head_in: Option<Mat>,
    pub e: Mat,
}

/// Forward pass through one tower with the given level head.
pub fn encode_forward(
    params: &EncoderParams,
    rows: &Mat,
    tower: Tower,
    level: Level,
) -> Result<EncodeCache, TrainError> {
    let ts = tower_segments(params, tower);
    if rows.cols != ts.d_in {
        return Err(TrainError::WidthMismatch { tower, expected: ts.d_in, got: rows.cols });
    }
    let theta = &params.theta;
    let z1 = affine_forward(rows, &theta[ts.w1.clone()], &theta[ts.b1.clone()], params.dims.hidden);
    let mut a = z1;
    for v in a.data.iter_mut() {
        *v = v.tanh();
    }
    let u = affine_forward(&a, &theta[ts.w2.clone()], &theta[ts.b2.clone()], params.dims.d);
    let (pre_norm, head_in) = match head_segments(params, level) {
        Some((hw, hb)) => {
            let v = affine_forward(&u, &theta[hw], &theta[hb], params.dims.d);
            (v, Some(u))
        }
        None => (u, None),
    };
    let (e, pre_norms) = normalize_rows(&pre_norm);
    Ok(EncodeCache { tower, level, x: rows.clone(), a, pre_norms, head_in, e })
}

/// Backward pass: accumulates parameter gradients for upstream `de`.
pub fn encode_backward(params: &EncoderParams, cache: &EncodeCache, de: &Mat, grad: &mut [f64]) {
    let dv = normalize_backward(&cache.e, &cache.pre_norms, de);
    let theta = &params.theta;
    let du = match (head_segments(params, cache.level), &cache.head_in) {
        (Some((hw, hb)), Some(head_in)) => {
            let (dw_range, db_range) = (hw.clone(), hb.clone());
            let mut dw = vec![0.0; dw_range.len()];
            let mut db = vec![0.0; db_range.len()];
            let du = affine_backward(head_in, &theta[hw], &dv, &mut dw, &mut db);
            for (i, v) in dw_range.zip(dw) {
                grad[i] += v;
            }
            for (i, v) in db_range.zip(db) {
                grad[i] += v;
            }
            du
        }
        _ => dv,
    };
    let ts = tower_segments(params, cache.tower);
    // u = a W2 + b2
    let mut dw2 = vec![0.0; ts.w2.len()];
    let mut db2 = vec![0.0; ts.b2.len()];
    let mut da = affine_backward(&cache.a, &theta[ts.w2.clone()], &du, &mut dw2, &mut db2);
    for (i, v) in ts.w2.clone().zip(dw2) {
        grad[i] += v;
    }
    for (i, v) in ts.b2.clone().zip(db2) {
        grad[i] += v;
    }
    // a = tanh(z1): dz1 = da (1 - a^2)
    for n in 0..da.rows {
        for j in 0..da.cols {
            let t = cache.a.at(n, j);
            *da.at_mut(n, j) *= 1.0 - t * t;
        }
    }
    let mut dw1 = vec![0.0; ts.w1.len()];
    let mut db1 = vec![0.0; ts.b1.len()];
    let _dx = affine_backward(&cache.x, &theta[ts.w1.clone()], &da, &mut dw1, &mut db1);
    for (i, v) in ts.w1.clone().zip(dw1) {
        grad[i] += v;
    }
    for (i, v) in ts.b1.clone().zip(db1) {
        grad[i] += v;
    }
}

/// Public encoder: the plain (region-level) pathway, as row vectors.
pub fn encode(
    params: &EncoderParams,
    rows: &[Vec<f64>],
    tower: Tower,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let cache = encode_forward(params, &Mat::from_rows(rows), tower, Level::R)?;
    Ok(cache.e.to_rows())
}

// ---------------------------------------------------------------------------
// CLIP loss
// ---------------------------------------------------------------------------

/// Loss and exact gradients of the symmetric InfoNCE objective.
pub struct ClipOutput {
    pub loss: f64,
    pub d_a: Mat,
    pub d_b: Mat,
    pub d_log_scale: f64,
}

/// Symmetric InfoNCE with matched pairs on the diagonal.
///
/// logits = exp(s) A B^T; loss = (row cross-entropy + column cross-entropy)/2
/// with each direction averaged over N. Gradients:
/// d logits = ((P_row - I) + (P_col - I)) / (2N), dA = exp(s) dlogits B,
/// dB = exp(s) dlogits^T A, ds = sum(dlogits * logits).
pub fn clip_loss_mat(a: &Mat, b: &Mat, log_scale: f64, weight: f64) -> Result<ClipOutput, TrainError> {
    if a.rows == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if a.rows != b.rows {
        return Err(TrainError::LengthMismatch { left: a.rows, right: b.rows });
    }
    assert_eq!(a.cols, b.cols, "embedding widths must agree");
    let n = a.rows;
    let scale = log_scale.exp();
    let mut logits = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..a.cols).map(|k| a.at(i, k) * b.at(j, k)).sum();
            *logits.at_mut(i, j) = scale * dot;
        }
    }
    // Row and column softmaxes with max-subtraction for stability.
    let mut p_row = Mat::zeros(n, n);
    let mut loss_rows = 0.0;
    for i in 0..n {
        let m = logits.row(i).iter().cloned().fold(f64::MIN, f64::max);
        let mut z = 0.0;
        for j in 0..n {
            let e = (logits.at(i, j) - m).exp();
            *p_row.at_mut(i, j) = e;
            z += e;
        }
        for j in 0..n {
            *p_row.at_mut(i, j) /= z;
        }
        loss_rows += z.ln() + m - logits.at(i, i);
    }
    let mut p_col = Mat::zeros(n, n);
    let mut loss_cols = 0.0;
    for j in 0..n {
        let m = (0..n).map(|i| logits.at(i, j)).fold(f64::MIN, f64::max);
        let mut z = 0.0;
        for i in 0..n {
            let e = (logits.at(i, j) - m).exp();
            *p_col.at_mut(i, j) = e;
            z += e;
        }
        for i in 0..n {
            *p_col.at_mut(i, j) /= z;
        }
        loss_cols += z.ln() + m - logits.at(j, j);
    }
    let nf = n as f64;
    let loss = weight * (loss_rows / nf + loss_cols / nf) / 2.0;

    let mut d_logits = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            *d_logits.at_mut(i, j) = weight
                * ((p_row.at(i, j) - target) + (p_col.at(i, j) - target))
                / (2.0 * nf);
        }
    }
    let mut d_a = Mat::zeros(n, a.cols);
    let mut d_b = Mat::zeros(n, b.cols);
    let mut d_log_scale = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = d_logits.at(i, j);
            if g == 0.0 {
                continue;
            }
            d_log_scale += g * logits.at(i, j);
            for k in 0..a.cols {
                *d_a.at_mut(i, k) += scale * g * b.at(j, k);
                *d_b.at_mut(j, k) += scale * g * a.at(i, k);
            }
        }
    }
    Ok(ClipOutput { loss, d_a, d_b, d_log_scale })
}

/// Row-vector wrapper around [`clip_loss_mat`].
pub fn clip_loss(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    log_scale: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, f64), TrainError> {
    let out = clip_loss_mat(&Mat::from_rows(a), &Mat::from_rows(b), log_scale, 1.0)?;
    Ok((out.loss, out.d_a.to_rows(), out.d_b.to_rows(), out.d_log_scale))
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

pub struct AggregateCache {
    groups: Vec<Vec<usize>>,
    means: Mat,
    mean_norms: Vec<f64>,
    renormalize: bool,
    pub out: Mat,
    /// Groups whose mean collapsed below the norm floor; such a group's
    /// output is its first child verbatim.
    pub degenerate: Vec<bool>,
}

/// Mean-pool child embeddings per group, then (optionally) renormalize onto
/// the unit sphere. Antipodal children can cancel to a zero mean; that group
/// falls back to its first child and is flagged.
pub fn aggregate_forward(
    children: &Mat,
    groups: &[Vec<usize>],
    renormalize: bool,
) -> Result<AggregateCache, TrainError> {
    let d = children.cols;
    let mut means = Mat::zeros(groups.len(), d);
    for (gi, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(TrainError::EmptyGroup { group: gi });
        }
        for &ci in group {
            if ci >= children.rows {
                return Err(TrainError::DanglingIndex {
                    what: "aggregation child",
                    index: ci,
                    len: children.rows,
                });
            }
            for k in 0..d {
                *means.at_mut(gi, k) += children.at(ci, k) / group.len() as f64;
            }
        }
    }
    let mut degenerate = vec![false; groups.len()];
    let mut mean_norms = vec![0.0; groups.len()];
    let mut out = Mat::zeros(groups.len(), d);
    for gi in 0..groups.len() {
        let norm = means.row(gi).iter().map(|v| v * v).sum::<f64>().sqrt();
        mean_norms[gi] = norm;
        if norm < NORM_EPS {
            degenerate[gi] = true;
            let first = groups[gi][0];
            for k in 0..d {
                *out.at_mut(gi, k) = children.at(first, k);
            }
        } else if renormalize {
            for k in 0..d {
                *out.at_mut(gi, k) = means.at(gi, k) / norm;
            }
        } else {
            for k in 0..d {
                *out.at_mut(gi, k) = means.at(gi, k);
            }
        }
    }
    Ok(AggregateCache {
        groups: groups.to_vec(),
        means,
        mean_norms,
        renormalize,
        out,
        degenerate,
    })
}

/// Backward of aggregation: gradient splits evenly over group members;
/// degenerate groups route identity gradient to their first child.
pub fn aggregate_backward(cache: &AggregateCache, d_out: &Mat, d_children: &mut Mat) {
    let d = d_out.cols;
    for (gi, group) in cache.groups.iter().enumerate() {
        if cache.degenerate[gi] {
            let first = group[0];
            for k in 0..d {
                *d_children.at_mut(first, k) += d_out.at(gi, k);
            }
            continue;
        }
        let share = 1.0 / group.len() as f64;
        if cache.renormalize {
            let norm = cache.mean_norms[gi];
            let dot: f64 = (0..d).map(|k| cache.out.at(gi, k) * d_out.at(gi, k)).sum();
            for &ci in group {
                for k in 0..d {
                    let dm = (d_out.at(gi, k) - cache.out.at(gi, k) * dot) / norm;
                    *d_children.at_mut(ci, k) += dm * share;
                }
            }
        } else {
            for &ci in group {
                for k in 0..d {
                    *d_children.at_mut(ci, k) += d_out.at(gi, k) * share;
                }
            }
        }
    }
    let _ = &cache.means;
}

/// Row-vector wrapper: aggregated embeddings plus per-group degeneracy flags.
pub fn aggregate(
    children: &[Vec<f64>],
    groups: &[Vec<usize>],
    renormalize: bool,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), TrainError> {
    let cache = aggregate_forward(&Mat::from_rows(children), groups, renormalize)?;
    Ok((cache.out.to_rows(), cache.degenerate))
}

// ---------------------------------------------------------------------------
// ROI pooling
// ---------------------------------------------------------------------------

/// Dense H x W x c feature grid, row-major by (y, x, channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "feature map data length mismatch");
        FeatureMap { h, w, c, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Bilinear sample at fractional pixel coordinates with border clamping.
fn bilinear(map: &FeatureMap, py: f64, px: f64, ch: usize) -> f64 {
    let x0 = px.floor();
    let y0 = py.floor();
    let wx = px - x0;
    let wy = py - y0;
    let clamp_x = |v: f64| (v.max(0.0) as usize).min(map.w - 1);
    let clamp_y = |v: f64| (v.max(0.0) as usize).min(map.h - 1);
    let (ix0, ix1) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (iy0, iy1) = (clamp_y(y0), clamp_y(y0 + 1.0));
    (1.0 - wy) * ((1.0 - wx) * map.at(iy0, ix0, ch) + wx * map.at(iy0, ix1, ch))
        + wy * ((1.0 - wx) * map.at(iy1, ix0, ch) + wx * map.at(iy1, ix1, ch))
}

/// Pool a normalized sub-box of a feature map onto a g x g grid, one bilinear
/// sample per bin center, align-corners-false convention. Output is
/// (gy, gx, channel) row-major, length g*g*c.
pub fn roi_pool(map: &FeatureMap, bbox: &BBox, g: usize) -> Vec<f64> {
    assert!(g >= 1, "pooling grid must be at least 1x1");
    assert!(
        bbox.unit == Unit::Normalized,
        "roi_pool expects a normalized box, got {:?}",
        bbox.unit
    );
    let mut out = Vec::with_capacity(g * g * map.c);
    for gy in 0..g {
        for gx in 0..g {
            let cx = bbox.x_min + (gx as f64 + 0.5) / g as f64 * bbox.width();
            let cy = bbox.y_min + (gy as f64 + 0.5) / g as f64 * bbox.height();
            let px = cx * map.w as f64 - 0.5;
            let py = cy * map.h as f64 - 0.5;
            for ch in 0..map.c {
                out.push(bilinear(map, py, px, ch));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Inter-level loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelPair {
    /// Figure embeddings against aggregated panel embeddings.
    MP,
    /// Panel embeddings against aggregated region embeddings.
    PR,
}

impl LevelPair {
    fn coarse_level(self) -> Level {
        match self {
            LevelPair::MP => Level::M,
            LevelPair::PR => Level::P,
        }
    }

    fn child_level(self) -> Level {
        match self {
            LevelPair::MP => Level::P,
            LevelPair::PR => Level::R,
        }
    }
}

/// Raw feature tables for one inter-level pairing. Only coarse items that
/// have at least one child belong here; the assembler counts exclusions.
#[derive(Debug, Clone)]
pub struct InterBatch {
    pub coarse_images: Vec<Vec<f64>>,
    pub coarse_texts: Vec<Vec<f64>>,
    pub child_images: Vec<Vec<f64>>,
    pub child_texts: Vec<Vec<f64>>,
    /// Per coarse item, indices into the child tables.
    pub groups: Vec<Vec<usize>>,
    pub excluded_childless: usize,
}

/// Visual plus textual inter-level InfoNCE: coarse embeddings against
/// aggregated child embeddings, each modality scored separately and summed.
pub fn inter_level_loss(
    params: &EncoderParams,
    pair: LevelPair,
    batch: &InterBatch,
    renormalize: bool,
    weight: f64,
    grad: Option<&mut Vec<f64>>,
) -> Result<f64, TrainError> {
    if batch.coarse_images.is_empty() {
        return Ok(0.0);
    }
    if batch.coarse_images.len() != batch.groups.len() {
        return Err(TrainError::LengthMismatch {
            left: batch.coarse_images.len(),
            right: batch.groups.len(),
        });
    }
    let seg = params.dims.segments();
    let s = params.log_scale();
    let mut total = 0.0;
    let mut sinks: Vec<(EncodeCache, Mat)> = Vec::new();
    let mut agg_sinks: Vec<(EncodeCache, AggregateCache, Mat)> = Vec::new();
    let mut d_s = 0.0;
    for (coarse_rows, child_rows, tower) in [
        (&batch.coarse_images, &batch.child_images, Tower::Image),
        (&batch.coarse_texts, &batch.child_texts, Tower::Text),
    ] {
        let coarse =
            encode_forward(params, &Mat::from_rows(coarse_rows), tower, pair.coarse_level())?;
        let children =
            encode_forward(params, &Mat::from_rows(child_rows), tower, pair.child_level())?;
        let agg = aggregate_forward(&children.e, &batch.groups, renormalize)?;
        let clip = clip_loss_mat(&coarse.e, &agg.out, s, weight)?;
        total += clip.loss;
        d_s += clip.d_log_scale;
        sinks.push((coarse, clip.d_a));
        agg_sinks.push((children, agg, clip.d_b));
    }
    if let Some(grad) = grad {
        for (cache, de) in &sinks {
            encode_backward(params, cache, de, grad);
        }
        for (children, agg, d_agg) in &agg_sinks {
            let mut d_children = Mat::zeros(children.e.rows, children.e.cols);
            aggregate_backward(agg, d_agg, &mut d_children);
            encode_backward(params, children, &d_children, grad);
        }
        grad[seg.log_scale] += d_s;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Fine-grained loss
// ---------------------------------------------------------------------------

/// One region in a fine-grained batch.
#[derive(Debug, Clone)]
pub struct FineRegion {
    /// Index into the batch's panel map list.
    pub map_index: usize,
    /// Region box in normalized panel coordinates.
    pub bbox: BBox,
    /// Image features of the cropped region pixels.
    pub crop_features: Vec<f64>,
    /// Features of the sampled region text.
    pub text_features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FineBatch {
    pub maps: Vec<FeatureMap>,
    pub regions: Vec<FineRegion>,
}

pub struct FineLossParts {
    /// Crop embeddings against region texts.
    pub crop_text: f64,
    /// Projected ROI features against crop embeddings.
    pub roi_consistency: f64,
}

/// Fine-grained objective: (a) InfoNCE between region crop embeddings and
/// their texts, plus (b) InfoNCE between projected ROI-pooled panel features
/// and the same crop embeddings. Gradients flow through the full chain of
/// both terms; the panel maps themselves are data.
pub fn fine_grained_loss(
    params: &EncoderParams,
    batch: &FineBatch,
    weight: f64,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<(f64, FineLossParts), TrainError> {
    if batch.regions.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let dims = params.dims;
    let seg = dims.segments();
    for (i, region) in batch.regions.iter().enumerate() {
        if region.map_index >= batch.maps.len() {
            return Err(TrainError::DanglingIndex {
                what: "fine-grained panel map",
                index: region.map_index,
                len: batch.maps.len(),
            });
        }
        let map = &batch.maps[region.map_index];
        assert_eq!(map.c, dims.c, "panel map {i} channel count differs from model");
    }
    let s = params.log_scale();

    let crop_rows: Vec<Vec<f64>> =
        batch.regions.iter().map(|r| r.crop_features.clone()).collect();
    let text_rows: Vec<Vec<f64>> =
        batch.regions.iter().map(|r| r.text_features.clone()).collect();
    let crops = encode_forward(params, &Mat::from_rows(&crop_rows), Tower::Image, Level::R)?;
    let texts = encode_forward(params, &Mat::from_rows(&text_rows), Tower::Text, Level::R)?;

    // Pooled panel features -> linear ROI head -> normalize.
    let pooled_rows: Vec<Vec<f64>> = batch
        .regions
        .iter()
        .map(|r| roi_pool(&batch.maps[r.map_index], &r.bbox, dims.g))
        .collect();
    let pooled = Mat::from_rows(&pooled_rows);
    let q_pre = affine_forward(
        &pooled,
        &params.theta[seg.roi_w.clone()],
        &params.theta[seg.roi_b.clone()],
        dims.d,
    );
    let (q, q_norms) = normalize_rows(&q_pre);

    let term_a = clip_loss_mat(&crops.e, &texts.e, s, weight)?;
    let term_b = clip_loss_mat(&q, &crops.e, s, weight)?;
    let parts = FineLossParts { crop_text: term_a.loss, roi_consistency: term_b.loss };
    let total = term_a.loss + term_b.loss;

    if let Some(grad) = grad.as_deref_mut() {
        // Crop embeddings collect gradient from both terms.
        let mut d_crops = term_a.d_a;
        for (dst, src) in d_crops.data.iter_mut().zip(&term_b.d_b.data) {
            *dst += src;
        }
        encode_backward(params, &crops, &d_crops, grad);
        encode_backward(params, &texts, &term_a.d_b, grad);
        let dq_pre = normalize_backward(&q, &q_norms, &term_b.d_a);
        let mut d_roi_w = vec![0.0; seg.roi_w.len()];
        let mut d_roi_b = vec![0.0; seg.roi_b.len()];
        let _d_pooled = affine_backward(
            &pooled,
            &params.theta[seg.roi_w.clone()],
            &dq_pre,
            &mut d_roi_w,
            &mut d_roi_b,
        );
        for (i, v) in seg.roi_w.clone().zip(d_roi_w) {
            grad[i] += v;
        }
        for (i, v) in seg.roi_b.clone().zip(d_roi_b) {
            grad[i] += v;
        }
        grad[seg.log_scale] += term_a.d_log_scale + term_b.d_log_scale;
    }
    Ok((total, parts))
}

// ---------------------------------------------------------------------------
// Per-level step objectives
// ---------------------------------------------------------------------------

/// Loss-term weights within a step; unit weights by default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub intra: f64,
    pub inter: f64,
    pub fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { intra: 1.0, inter: 1.0, fine: 1.0 }
    }
}

/// Figure-level step: intra-M InfoNCE over the figure batch plus the
/// figure-to-panel inter-level term over figures with panels present.
#[derive(Debug, Clone)]
pub struct MBatch {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
    pub inter: InterBatch,
}

/// Panel-level step: intra-P plus the panel-to-region inter-level term.
#[derive(Debug, Clone)]
pub struct PBatch {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
    pub inter: InterBatch,
}

/// Region-level step: intra-R over crop/text pairs plus the fine-grained
/// objective on the same regions.
#[derive(Debug, Clone)]
pub struct RBatch {
    pub fine: FineBatch,
}

#[derive(Debug, Clone)]
pub enum StepBatch {
    M(MBatch),
    P(PBatch),
    R(RBatch),
}

impl StepBatch {
    pub fn level(&self) -> Level {
        match self {
            StepBatch::M(_) => Level::M,
            StepBatch::P(_) => Level::P,
            StepBatch::R(_) => Level::R,
        }
    }
}

/// Per-step loss readout. Fields for inactive terms stay empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub level: Level,
    pub lr_shared: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intra_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intra_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intra_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inter_mp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inter_pr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fine: Option<f64>,
    pub total: f64,
    pub grad_max_norm: f64,
    pub excluded_childless: usize,
}

fn intra_loss(
    params: &EncoderParams,
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    level: Level,
    weight: f64,
    grad: Option<&mut Vec<f64>>,
) -> Result<f64, TrainError> {
    let v = encode_forward(params, &Mat::from_rows(images), Tower::Image, level)?;
    let t = encode_forward(params, &Mat::from_rows(texts), Tower::Text, level)?;
    let clip = clip_loss_mat(&v.e, &t.e, params.log_scale(), weight)?;
    if let Some(grad) = grad {
        encode_backward(params, &v, &clip.d_a, grad);
        encode_backward(params, &t, &clip.d_b, grad);
        grad[params.dims.segments().log_scale] += clip.d_log_scale;
    }
    Ok(clip.loss)
}

/// Evaluate one step's composite objective, accumulating gradients when a
/// buffer is given. Returns the filled loss report (step and lr fields are
/// stamped by the caller).
pub fn step_objective(
    params: &EncoderParams,
    batch: &StepBatch,
    weights: &LossWeights,
    renormalize: bool,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<LossReport, TrainError> {
    let mut report = LossReport {
        step: 0,
        level: batch.level(),
        lr_shared: 0.0,
        intra_m: None,
        intra_p: None,
        intra_r: None,
        inter_mp: None,
        inter_pr: None,
        fine: None,
        total: 0.0,
        grad_max_norm: 0.0,
        excluded_childless: 0,
    };
    match batch {
        StepBatch::M(b) => {
            let intra = intra_loss(
                params,
                &b.images,
                &b.texts,
                Level::M,
                weights.intra,
                grad.as_deref_mut(),
            )?;
            let inter = inter_level_loss(
                params,
                LevelPair::MP,
                &b.inter,
                renormalize,
                weights.inter,
                grad.as_deref_mut(),
            )?;
            report.intra_m = Some(intra);
            report.inter_mp = Some(inter);
            report.excluded_childless = b.inter.excluded_childless;
            report.total = intra + inter;
        }
        StepBatch::P(b) => {
            let intra = intra_loss(
                params,
                &b.images,
                &b.texts,
                Level::P,
                weights.intra,
                grad.as_deref_mut(),
            )?;
            let inter = inter_level_loss(
                params,
                LevelPair::PR,
                &b.inter,
                renormalize,
                weights.inter,
                grad.as_deref_mut(),
            )?;
            report.intra_p = Some(intra);
            report.inter_pr = Some(inter);
            report.excluded_childless = b.inter.excluded_childless;
            report.total = intra + inter;
        }
        StepBatch::R(b) => {
            let crop_rows: Vec<Vec<f64>> =
                b.fine.regions.iter().map(|r| r.crop_features.clone()).collect();
            let text_rows: Vec<Vec<f64>> =
                b.fine.regions.iter().map(|r| r.text_features.clone()).collect();
            let intra = intra_loss(
                params,
                &crop_rows,
                &text_rows,
                Level::R,
                weights.intra,
                grad.as_deref_mut(),
            )?;
            let (fine, _) = fine_grained_loss(params, &b.fine, weights.fine, grad)?;
            report.intra_r = Some(intra);
            report.fine = Some(fine);
            report.total = intra + fine;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr_shared: f64,
    pub lr_roi_head: f64,
    pub lr_p_head: f64,
    pub lr_m_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Cosine floor as an absolute rate; the schedule ends here.
    pub lr_floor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_shared: 1e-5,
            lr_roi_head: 5e-6,
            lr_p_head: 1e-5,
            lr_m_head: 1e-5,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            eps: 1e-8,
            warmup_steps: 1000,
            total_steps: 10_000,
            lr_floor: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn base_lr(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Shared => self.lr_shared,
            Branch::RoiHead => self.lr_roi_head,
            Branch::PHead => self.lr_p_head,
            Branch::MHead => self.lr_m_head,
        }
    }
}

/// Linear-warmup, cosine-decay learning rate: 0 at step 0, `base` at the end
/// of warmup, `floor` at `total_steps`.
pub fn lr_at(cfg: &OptimizerConfig, base: f64, step: u64) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return base * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.total_steps <= cfg.warmup_steps {
        return base;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = progress.min(1.0);
    cfg.lr_floor + (base - cfg.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams,
    pub opt: AdamState,
}

impl TrainState {
    pub fn new(params: EncoderParams) -> Self {
        let n = params.theta.len();
        TrainState { params, opt: AdamState::new(n) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Renormalize aggregated child means onto the unit sphere (deliberate
    /// deviation from a raw-mean aggregate, toggleable).
    pub renormalize_aggregates: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            renormalize_aggregates: true,
            weights: LossWeights::default(),
        }
    }
}

/// Decoupled-weight-decay adaptive-moment update over every coordinate, with
/// per-branch learning rates: theta -= lr (mhat / (sqrt(vhat) + eps) + wd theta).
/// A zero-gradient step from fresh moments therefore scales parameters by
/// exactly (1 - lr wd).
fn adamw_apply(params: &mut EncoderParams, opt: &mut AdamState, cfg: &OptimizerConfig, grad: &[f64]) {
    let t = opt.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let seg = params.dims.segments();
    for i in 0..params.theta.len() {
        let lr = lr_at(cfg, cfg.base_lr(params.branch_of(i)), opt.step);
        let g = grad[i];
        opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * g;
        opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        // Factored so a zero-gradient step is exactly theta * (1 - lr wd).
        params.theta[i] = params.theta[i] * (1.0 - lr * cfg.weight_decay)
            - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    params.theta[seg.log_scale] = params.theta[seg.log_scale].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
    opt.step = t;
}

/// One optimizer step on one level batch. The scheduler names the level it
/// expects; a mismatched batch is an error. A non-finite loss or gradient
/// rejects the step and leaves the state untouched.
pub fn train_step(
    state: &mut TrainState,
    expected_level: Level,
    batch: &StepBatch,
    cfg: &TrainConfig,
) -> Result<LossReport, TrainError> {
    if batch.level() != expected_level {
        return Err(TrainError::LevelMismatch { expected: expected_level, got: batch.level() });
    }
    let mut grad = vec![0.0; state.params.theta.len()];
    let mut report = step_objective(
        &state.params,
        batch,
        &cfg.weights,
        cfg.renormalize_aggregates,
        Some(&mut grad),
    )?;
    if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteLoss { step: state.opt.step });
    }
    report.step = state.opt.step;
    report.lr_shared = lr_at(&cfg.optimizer, cfg.optimizer.lr_shared, state.opt.step);
    report.grad_max_norm = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
    adamw_apply(&mut state.params, &mut state.opt, &cfg.optimizer, &grad);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Training set and schedule runner
// ---------------------------------------------------------------------------

/// Featurized hierarchical corpus, index-aligned per level.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingSet {
    pub figure_images: Vec<Vec<f64>>,
    pub figure_texts: Vec<Vec<f64>>,
    pub panel_images: Vec<Vec<f64>>,
    pub panel_texts: Vec<Vec<f64>>,
    /// Figure index of each panel.
    pub panel_parent: Vec<usize>,
    pub panel_maps: Vec<FeatureMap>,
    /// Crop-pixel features of each region.
    pub region_images: Vec<Vec<f64>>,
    pub region_text_lvlm: Vec<Option<Vec<f64>>>,
    pub region_text_sub: Vec<Option<Vec<f64>>>,
    /// Panel index of each region.
    pub region_parent: Vec<usize>,
    /// Region boxes in normalized panel coordinates.
    pub region_boxes: Vec<BBox>,
}

impl TrainingSet {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.figure_images.len(), self.panel_images.len(), self.region_images.len())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let check = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(TrainError::BadConfig(format!(
                    "{name} has {got} rows, expected {want}"
                )))
            } else {
                Ok(())
            }
        };
        let (n_fig, n_panel, n_region) = self.counts();
        check("figure_texts", self.figure_texts.len(), n_fig)?;
        check("panel_texts", self.panel_texts.len(), n_panel)?;
        check("panel_parent", self.panel_parent.len(), n_panel)?;
        check("panel_maps", self.panel_maps.len(), n_panel)?;
        check("region_text_lvlm", self.region_text_lvlm.len(), n_region)?;
        check("region_text_sub", self.region_text_sub.len(), n_region)?;
        check("region_parent", self.region_parent.len(), n_region)?;
        check("region_boxes", self.region_boxes.len(), n_region)?;
        for (i, &p) in self.panel_parent.iter().enumerate() {
            if p >= n_fig {
                return Err(TrainError::DanglingIndex { what: "panel parent", index: p, len: n_fig })
                    .map_err(|e| {
                        let _ = i;
                        e
                    });
            }
        }
        for &p in &self.region_parent {
            if p >= n_panel {
                return Err(TrainError::DanglingIndex {
                    what: "region parent",
                    index: p,
                    len: n_panel,
                });
            }
        }
        for (i, (l, s)) in self.region_text_lvlm.iter().zip(&self.region_text_sub).enumerate() {
            if l.is_none() && s.is_none() {
                return Err(TrainError::BadConfig(format!("region {i} has no text features")));
            }
        }
        Ok(())
    }
}

/// Cycle spec "a:b:c": a M-steps, then b P-steps, then c R-steps, repeated.
pub fn parse_cycle(spec: &str) -> Result<Vec<Level>, TrainError> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(TrainError::BadCycle(spec.to_string()));
    }
    let mut counts = [0u32; 3];
    for (slot, part) in counts.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<u32>()
            .map_err(|_| TrainError::BadCycle(spec.to_string()))?;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(TrainError::BadCycle(spec.to_string()));
    }
    let mut pattern = Vec::new();
    for (level, &count) in [Level::M, Level::P, Level::R].iter().zip(&counts) {
        for _ in 0..count {
            pattern.push(*level);
        }
    }
    Ok(pattern)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunScheduleConfig {
    pub steps: u64,
    pub cycle: String,
    pub batch_m: usize,
    pub batch_p: usize,
    pub batch_r: usize,
    pub seed: u64,
}

impl Default for RunScheduleConfig {
    fn default() -> Self {
        RunScheduleConfig {
            steps: 100,
            cycle: "1:1:1".to_string(),
            batch_m: 8,
            batch_p: 8,
            batch_r: 8,
            seed: 0,
        }
    }
}

/// Deterministic sample of `amount` distinct indices from `0..n`.
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, amount.min(n)).into_vec()
}

/// Region text row for one step: uniform over the sources present.
fn sample_region_text(set: &TrainingSet, region: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match (&set.region_text_lvlm[region], &set.region_text_sub[region]) {
        (Some(l), Some(s)) => {
            if rng.gen_bool(0.5) {
                l.clone()
            } else {
                s.clone()
            }
        }
        (Some(l), None) => l.clone(),
        (None, Some(s)) => s.clone(),
        (None, None) => unreachable!("validated: every region has at least one text"),
    }
}

fn assemble_m_batch(set: &TrainingSet, figures: &[usize], rng: &mut ChaCha8Rng) -> MBatch {
    let _ = rng;
    let images: Vec<Vec<f64>> = figures.iter().map(|&f| set.figure_images[f].clone()).collect();
    let texts: Vec<Vec<f64>> = figures.iter().map(|&f| set.figure_texts[f].clone()).collect();
    let mut inter = InterBatch {
        coarse_images: Vec::new(),
        coarse_texts: Vec::new(),
        child_images: Vec::new(),
        child_texts: Vec::new(),
        groups: Vec::new(),
        excluded_childless: 0,
    };
    for &f in figures {
        let children: Vec<usize> = set
            .panel_parent
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == f)
            .map(|(i, _)| i)
            .collect();
        if children.is_empty() {
            inter.excluded_childless += 1;
            continue;
        }
        let mut group = Vec::with_capacity(children.len());
        for child in children {
            group.push(inter.child_images.len());
            inter.child_images.push(set.panel_images[child].clone());
            inter.child_texts.push(set.panel_texts[child].clone());
        }
        inter.coarse_images.push(set.figure_images[f].clone());
        inter.coarse_texts.push(set.figure_texts[f].clone());
        inter.groups.push(group);
    }
    MBatch { images, texts, inter }
}

fn assemble_p_batch(set: &TrainingSet, panels: &[usize], rng: &mut ChaCha8Rng) -> PBatch {
    let images: Vec<Vec<f64>> = panels.iter().map(|&p| set.panel_images[p].clone()).collect();
    let texts: Vec<Vec<f64>> = panels.iter().map(|&p| set.panel_texts[p].clone()).collect();
    let mut inter = InterBatch {
        coarse_images: Vec::new(),
        coarse_texts: Vec::new(),
        child_images: Vec::new(),
        child_texts: Vec::new(),
        groups: Vec::new(),
        excluded_childless: 0,
    };
    for &p in panels {
        let children: Vec<usize> = set
            .region_parent
            .iter()
            .enumerate()
            .filter(|(_, &parent)| parent == p)
            .map(|(i, _)| i)
            .collect();
        if children.is_empty() {
            inter.excluded_childless += 1;
            continue;
        }
        let mut group = Vec::with_capacity(children.len());
        for child in children {
            group.push(inter.child_images.len());
            inter.child_images.push(set.region_images[child].clone());
            inter.child_texts.push(sample_region_text(set, child, rng));
        }
        inter.coarse_images.push(set.panel_images[p].clone());
        inter.coarse_texts.push(set.panel_texts[p].clone());
        inter.groups.push(group);
    }
    PBatch { images, texts, inter }
}

fn assemble_r_batch(set: &TrainingSet, regions: &[usize], rng: &mut ChaCha8Rng) -> RBatch {
    let mut maps = Vec::new();
    let mut map_of_panel: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    let mut fine_regions = Vec::with_capacity(regions.len());
    for &r in regions {
        let panel = set.region_parent[r];
        let map_index = *map_of_panel.entry(panel).or_insert_with(|| {
            maps.push(set.panel_maps[panel].clone());
            maps.len() - 1
        });
        fine_regions.push(FineRegion {
            map_index,
            bbox: set.region_boxes[r].clone(),
            crop_features: set.region_images[r].clone(),
            text_features: sample_region_text(set, r, rng),
        });
    }
    RBatch { fine: FineBatch { maps, regions: fine_regions } }
}

/// Run the alternating schedule: cycle levels per the spec, sample batches
/// with a seeded generator, and step the optimizer. Loss reports come back
/// one per step; the final state is the checkpoint payload.
pub fn run_schedule(
    params: EncoderParams,
    set: &TrainingSet,
    cfg: &TrainConfig,
    sched: &RunScheduleConfig,
) -> Result<(TrainState, Vec<LossReport>), TrainError> {
    set.validate()?;
    let pattern = parse_cycle(&sched.cycle)?;
    let (n_fig, n_panel, n_region) = set.counts();
    for level in &pattern {
        let available = match level {
            Level::M => n_fig,
            Level::P => n_panel,
            Level::R => n_region,
        };
        if available == 0 {
            return Err(TrainError::BadConfig(format!(
                "cycle {} includes {level} steps but the corpus has no {level}-level items",
                sched.cycle
            )));
        }
    }
    let mut cfg = cfg.clone();
    cfg.optimizer.total_steps = sched.steps;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut state = TrainState::new(params);
    let mut history = Vec::with_capacity(sched.steps as usize);
    for step in 0..sched.steps {
        let level = pattern[(step as usize) % pattern.len()];
        let batch = match level {
            Level::M => {
                let figs = sample_indices(&mut rng, n_fig, sched.batch_m);
                StepBatch::M(assemble_m_batch(set, &figs, &mut rng))
            }
            Level::P => {
                let panels = sample_indices(&mut rng, n_panel, sched.batch_p);
                StepBatch::P(assemble_p_batch(set, &panels, &mut rng))
            }
            Level::R => {
                let regions = sample_indices(&mut rng, n_region, sched.batch_r);
                StepBatch::R(assemble_r_batch(set, &regions, &mut rng))
            }
        };
        let report = train_step(&mut state, level, &batch, &cfg)?;
        history.push(report);
    }
    Ok((state, history))
}

/// Loss history as CSV, one row per step, empty cells for inactive terms.
pub fn loss_history_csv(reports: &[LossReport]) -> String {
    let mut out = String::from(
        "step,level,lr_shared,total,intra_m,intra_p,intra_r,inter_mp,inter_pr,fine,grad_max_norm,excluded_childless\n",
    );
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.17e},{:.17e},{},{},{},{},{},{},{:.17e},{}\n",
            r.step,
            r.level,
            r.lr_shared,
            r.total,
            cell(r.intra_m),
            cell(r.intra_p),
            cell(r.intra_r),
            cell(r.inter_mp),
            cell(r.inter_pr),
            cell(r.fine),
            r.grad_max_norm,
            r.excluded_childless,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"FMCKPT01";

/// Serialize parameters, optimizer moments, and the step counter. Fixed
/// little-endian layout; byte-stable across runs.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<(), TrainError> {
    let io_err = |source| TrainError::Io { path: path.to_path_buf(), source };
    let d = &state.params.dims;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [d.d_in_v, d.d_in_t, d.hidden, d.d, d.g, d.c] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&state.opt.step.to_le_bytes());
    buf.extend_from_slice(&(state.params.theta.len() as u64).to_le_bytes());
    for arr in [&state.params.theta, &state.opt.m, &state.opt.v] {
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let io_err = |source| TrainError::Io { path: path.to_path_buf(), source };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(io_err)?;
    let bad = |msg: &str| TrainError::BadCheckpoint(msg.to_string());
    if buf.len() < 8 + 24 + 16 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing or wrong magic header"));
    }
    let mut cursor = 8usize;
    let mut read_u32 = || {
        let v = u32::from_le_bytes(buf[cursor..cursor + 4].try_into().expect("4 bytes"));
        cursor += 4;
        v as usize
    };
    let dims = ModelDims {
        d_in_v: read_u32(),
        d_in_t: read_u32(),
        hidden: read_u32(),
        d: read_u32(),
        g: read_u32(),
        c: read_u32(),
    };
    let step = u64::from_le_bytes(buf[cursor..cursor + 8].try_into().expect("8 bytes"));
    cursor += 8;
    let len = u64::from_le_bytes(buf[cursor..cursor + 8].try_into().expect("8 bytes")) as usize;
    cursor += 8;
    if len != dims.n_params() {
        return Err(bad("parameter count does not match dimensions"));
    }
    if buf.len() != cursor + 3 * len * 8 {
        return Err(bad("unexpected file length"));
    }
    let read_arr = |cursor: &mut usize| {
        let mut arr = Vec::with_capacity(len);
        for _ in 0..len {
            arr.push(f64::from_le_bytes(buf[*cursor..*cursor + 8].try_into().expect("8 bytes")));
            *cursor += 8;
        }
        arr
    };
    let theta = read_arr(&mut cursor);
    let m = read_arr(&mut cursor);
    let v = read_arr(&mut cursor);
    Ok(TrainState {
        params: EncoderParams { dims, theta },
        opt: AdamState { m, v, step },
    })
}

// ---------------------------------------------------------------------------
// Toy featurization
// ---------------------------------------------------------------------------

/// Side of the downsampled luminance grid in the image feature vector.
pub const LUMA_GRID: usize = 8;
/// Histogram bins per color channel in the image feature vector.
pub const HIST_BINS: usize = 4;
/// Image feature width: luminance grid plus per-channel histograms.
pub const IMAGE_FEATURE_WIDTH: usize = LUMA_GRID * LUMA_GRID + 3 * HIST_BINS;
/// Text feature width: folded trigram counts.
pub const TEXT_FEATURE_WIDTH: usize = 64;
/// Panel feature map side.
pub const MAP_SIZE: usize = 6;
/// Panel feature map channels (RGB cell means).
pub const MAP_CHANNELS: usize = 3;

/// Deterministic image features: an 8x8 grid of mean luminance (0..1) plus a
/// 4-bin mass histogram per RGB channel.
pub fn image_features(img: &image::RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    assert!(w > 0 && h > 0, "cannot featurize an empty image");
    let mut out = vec![0.0; IMAGE_FEATURE_WIDTH];
    for gy in 0..LUMA_GRID {
        for gx in 0..LUMA_GRID {
            let y0 = gy * h / LUMA_GRID;
            let y1 = ((gy + 1) * h / LUMA_GRID).max(y0 + 1).min(h);
            let x0 = gx * w / LUMA_GRID;
            let x1 = ((gx + 1) * w / LUMA_GRID).max(x0 + 1).min(w);
            let mut acc = 0.0;
            let mut count = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(x as u32, y as u32);
                    acc += 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                    count += 1.0;
                }
            }
            out[gy * LUMA_GRID + gx] = acc / count / 255.0;
        }
    }
    let total = (w * h) as f64;
    for pixel in img.pixels() {
        for ch in 0..3 {
            let bin = (pixel[ch] as usize * HIST_BINS / 256).min(HIST_BINS - 1);
            out[LUMA_GRID * LUMA_GRID + ch * HIST_BINS + bin] += 1.0 / total;
        }
    }
    out
}

/// Deterministic text features: hashed character-trigram counts (the same
/// vectorizer the box-similarity merge uses) folded into a fixed width and
/// L2-normalized.
pub fn text_features(text: &str) -> Vec<f64> {
    let mut out = vec![0.0; TEXT_FEATURE_WIDTH];
    for (hash, count) in crate::postprocess::trigram_counts(text) {
        out[(hash % TEXT_FEATURE_WIDTH as u64) as usize] += count;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in out.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// Panel feature map: RGB cell means on a fixed MAP_SIZE grid, 0..1.
pub fn panel_feature_map(img: &image::RgbImage) -> FeatureMap {
    let (w, h) = (img.width() as usize, img.height() as usize);
    assert!(w > 0 && h > 0, "cannot featurize an empty image");
    let mut data = vec![0.0; MAP_SIZE * MAP_SIZE * MAP_CHANNELS];
    for gy in 0..MAP_SIZE {
        for gx in 0..MAP_SIZE {
            let y0 = gy * h / MAP_SIZE;
            let y1 = ((gy + 1) * h / MAP_SIZE).max(y0 + 1).min(h);
            let x0 = gx * w / MAP_SIZE;
            let x1 = ((gx + 1) * w / MAP_SIZE).max(x0 + 1).min(w);
            let mut acc = [0.0f64; 3];
            let mut count = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(x as u32, y as u32);
                    for ch in 0..3 {
                        acc[ch] += f64::from(p[ch]);
                    }
                    count += 1.0;
                }
            }
            for ch in 0..3 {
                data[(gy * MAP_SIZE + gx) * MAP_CHANNELS + ch] = acc[ch] / count / 255.0;
            }
        }
    }
    FeatureMap::new(MAP_SIZE, MAP_SIZE, MAP_CHANNELS, data)
}

/// Crop an image by a pixel box (clamped to bounds).
pub fn crop_image(img: &image::RgbImage, bbox: &BBox) -> Result<image::RgbImage, TrainError> {
    let (w, h) = (img.width(), img.height());
    let px = match bbox.unit {
        Unit::Pixel => bbox.clone(),
        Unit::Normalized => bbox
            .to_pixels(f64::from(w), f64::from(h))
            .map_err(|e| TrainError::BadConfig(e.to_string()))?,
    };
    let x = px.x_min.floor().clamp(0.0, f64::from(w - 1)) as u32;
    let y = px.y_min.floor().clamp(0.0, f64::from(h - 1)) as u32;
    let cw = (px.width().ceil() as u32).clamp(1, w - x);
    let ch = (px.height().ceil() as u32).clamp(1, h - y);
    Ok(image::imageops::crop_imm(img, x, y, cw, ch).to_image())
}

/// Decode an image file into RGB.
pub fn load_rgb(path: &Path) -> Result<image::RgbImage, TrainError> {
    Ok(image::open(path)
        .map_err(|e| TrainError::ImageDecode(format!("{}: {e}", path.display())))?
        .to_rgb8())
}
