//! CTC loss, the blank penalty, greedy paths and boundary detection.
//!
//! Labels are class indices; the blank class is always the last column of a
//! posterior grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Real};

/// Per-frame label distributions over `V ∪ {blank}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosteriorGrid {
    frames: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl CtcPosteriorGrid {
    /// Wraps probabilities, checking each row is a distribution.
    pub fn from_probs(frames: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("posterior grid needs at least one label plus blank"));
        }
        if probs.len() != frames * classes {
            return Err(Error::Shape {
                op: "posterior grid",
                lhs: vec![frames, classes],
                rhs: vec![probs.len()],
            });
        }
        for (t, row) in probs.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "row {t} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self {
            frames,
            classes,
            probs,
        })
    }

    /// Softmax over each row of `logits`.
    pub fn from_logits<F: Real>(frames: usize, classes: usize, logits: &[F]) -> Result<Self> {
        if logits.len() != frames * classes {
            return Err(Error::Shape {
                op: "posterior grid",
                lhs: vec![frames, classes],
                rhs: vec![logits.len()],
            });
        }
        let mut probs: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
        for row in probs.chunks_mut(classes) {
            kernels::softmax_row(row);
        }
        Self::from_probs(frames, classes, probs)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn blank_probs(&self) -> Vec<f64> {
        (0..self.frames).map(|t| self.row(t)[self.blank()]).collect()
    }
}

/// Which frames the blank penalty sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlankPenaltyMode {
    /// Frames whose greedy label is blank.
    #[default]
    ArgmaxBlankFrames,
    /// Every frame.
    AllFrames,
}

impl std::str::FromStr for BlankPenaltyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax_blank_frames" => Ok(Self::ArgmaxBlankFrames),
            "all_frames" => Ok(Self::AllFrames),
            _ => Err(Error::Config(format!("unknown blank penalty mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for BlankPenaltyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ArgmaxBlankFrames => "argmax_blank_frames",
            Self::AllFrames => "all_frames",
        })
    }
}

#[inline]
fn log_add<F: Real>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frames a label sequence needs: one per label plus a blank
/// between each pair of equal neighbours.
pub fn required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-space forward-backward. Returns the negative log-likelihood and the
/// per-frame state occupancy `γ[t][c]`, which is minus the gradient of the
/// NLL with respect to `log_probs`.
pub fn forward_backward<F: Real>(
    log_probs: &[F],
    frames: usize,
    classes: usize,
    labels: &[usize],
) -> Result<(F, Vec<F>)> {
    let blank = classes - 1;
    if labels.is_empty() {
        return Err(Error::Empty("CTC label sequence"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= blank) {
        return Err(Error::invalid(format!(
            "label {bad} is blank or out of range for {classes} classes"
        )));
    }
    let required = required_frames(labels);
    if frames < required {
        return Err(Error::InfeasibleAlignment {
            frames,
            labels: labels.len(),
            required,
        });
    }
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| if s.is_multiple_of(2) { blank } else { labels[s / 2] };
    // a skip from s-2 to s is allowed onto a label that differs from the previous label
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && ext(s) != ext(s - 2);
    let lp = |t: usize, c: usize| log_probs[t * classes + c];
    let ninf = F::neg_infinity();

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, blank);
    alpha[1] = lp(0, ext(1));
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext(s)) };
        }
    }

    // beta[t][s]: log-probability of finishing from state s at frame t, excluding frame t
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = F::zero();
    beta[(frames - 1) * s_len + s_len - 2] = F::zero();
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, ext(s2));
            let mut b = next(s);
            if s + 1 < s_len {
                b = log_add(b, next(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let last = (frames - 1) * s_len;
    let log_p = log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if log_p == ninf {
        return Ok((F::infinity(), vec![F::zero(); frames * classes]));
    }
    let mut occupancy = vec![F::zero(); frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != ninf {
                occupancy[t * classes + ext(s)] += (ab - log_p).exp();
            }
        }
    }
    Ok((-log_p, occupancy))
}

/// `−ln Σ_{π ∈ B⁻¹(labels)} p(π)`.
pub fn ctc_nll(grid: &CtcPosteriorGrid, labels: &[usize]) -> Result<f64> {
    let log_probs: Vec<f64> = grid.probs.iter().map(|p| p.ln()).collect();
    forward_backward(&log_probs, grid.frames, grid.classes, labels).map(|(nll, _)| nll)
}

/// Removes repeats, then blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Per-frame argmax; ties resolve to the lowest class, so a token beats blank.
pub fn greedy_path(grid: &CtcPosteriorGrid) -> Vec<usize> {
    (0..grid.frames).map(|t| kernels::argmax(grid.row(t))).collect()
}

/// Frames contributing to the blank penalty under `mode`.
pub fn penalty_frames(path: &[usize], blank: usize, mode: BlankPenaltyMode) -> Vec<usize> {
    match mode {
        BlankPenaltyMode::ArgmaxBlankFrames => path
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == blank)
            .map(|(t, _)| t)
            .collect(),
        BlankPenaltyMode::AllFrames => (0..path.len()).collect(),
    }
}

pub fn blank_penalty(grid: &CtcPosteriorGrid, mode: BlankPenaltyMode) -> f64 {
    let path = greedy_path(grid);
    penalty_frames(&path, grid.blank(), mode)
        .into_iter()
        .map(|t| grid.row(t)[grid.blank()])
        .sum()
}

/// CTC NLL plus `lambda` times the blank penalty.
pub fn blank_limited_ctc_loss(
    grid: &CtcPosteriorGrid,
    labels: &[usize],
    lambda: f64,
    mode: BlankPenaltyMode,
) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let nll = ctc_nll(grid, labels)?;
    if lambda == 0.0 {
        return Ok(nll);
    }
    Ok(nll + lambda * blank_penalty(grid, mode))
}

/// Half-open frame intervals partitioning `[0, frames)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSet {
    frames: usize,
    intervals: Vec<(usize, usize)>,
}

impl SegmentSet {
    pub fn new(frames: usize, intervals: Vec<(usize, usize)>) -> Result<Self> {
        let mut expect = 0;
        for &(s, e) in &intervals {
            if s != expect || e <= s {
                return Err(Error::invalid(format!(
                    "segments {intervals:?} do not partition [0, {frames})"
                )));
            }
            expect = e;
        }
        if expect != frames || intervals.is_empty() {
            return Err(Error::invalid(format!(
                "segments {intervals:?} do not partition [0, {frames})"
            )));
        }
        Ok(Self { frames, intervals })
    }

    /// One segment covering every frame.
    pub fn whole(frames: usize) -> Result<Self> {
        Self::new(frames, vec![(0, frames)])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }
}

/// Online boundary detector: a boundary falls between frames `t` and `t+1`
/// when `path[t]` is not blank and `path[t+1]` differs from it.
#[derive(Debug, Clone, Default)]
pub struct BoundaryDetector {
    blank: usize,
    prev: Option<usize>,
    start: usize,
    frames: usize,
}

impl BoundaryDetector {
    pub fn new(blank: usize) -> Self {
        Self {
            blank,
            prev: None,
            start: 0,
            frames: 0,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Feeds the next frame's label; returns the segment it closes, if any.
    pub fn push(&mut self, label: usize) -> Option<(usize, usize)> {
        let t = self.frames;
        self.frames += 1;
        let closed = match self.prev {
            Some(p) if p != self.blank && label != p => {
                let seg = (self.start, t);
                self.start = t;
                Some(seg)
            }
            _ => None,
        };
        self.prev = Some(label);
        closed
    }

    /// Closes the trailing segment at end of stream.
    pub fn finish(&mut self) -> Option<(usize, usize)> {
        if self.frames > self.start {
            let seg = (self.start, self.frames);
            self.start = self.frames;
            Some(seg)
        } else {
            None
        }
    }
}

/// Segments delimited by the boundary rule; leading blanks join the first
/// segment and an all-blank path is a single segment.
pub fn detect_boundaries(path: &[usize], blank: usize) -> Result<SegmentSet> {
    if path.is_empty() {
        return Err(Error::Empty("path"));
    }
    let mut det = BoundaryDetector::new(blank);
    let mut segs: Vec<(usize, usize)> = path.iter().filter_map(|&l| det.push(l)).collect();
    segs.extend(det.finish());
    SegmentSet::new(path.len(), segs)
}

/// Distribution of `|#segments − |z||` over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkQuality {
    pub utterances: usize,
    /// Percentage of utterances with difference ≤ 2, ≤ 4 and ≤ 6.
    pub within_2: f64,
    pub within_4: f64,
    pub within_6: f64,
    pub histogram: BTreeMap<usize, usize>,
}

/// `pairs` holds `(segment count, transcript length)` per utterance.
pub fn shrink_quality(pairs: &[(usize, usize)]) -> Result<ShrinkQuality> {
    if pairs.is_empty() {
        return Err(Error::Empty("shrink-quality corpus"));
    }
    let mut histogram = BTreeMap::new();
    for &(s, z) in pairs {
        *histogram.entry(s.abs_diff(z)).or_insert(0) += 1;
    }
    let pct = |n: usize| {
        let hits = pairs.iter().filter(|&&(s, z)| s.abs_diff(z) <= n).count();
        100.0 * hits as f64 / pairs.len() as f64
    };
    Ok(ShrinkQuality {
        utterances: pairs.len(),
        within_2: pct(2),
        within_4: pct(4),
        within_6: pct(6),
        histogram,
    })
}
