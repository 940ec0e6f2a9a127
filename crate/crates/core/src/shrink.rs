//! Weighted shrinking: collapse each detected segment of acoustic frames to
//! one vector, weighting frames by how unlikely they are to be blank.

use serde::{Deserialize, Serialize};

use crate::ctc::SegmentSet;
use crate::error::{Error, Result};
use crate::numerics::{kernels, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkMode {
    /// Softmax over `mu · (1 − p_blank)` within the segment.
    #[default]
    Weighted,
    /// Plain mean (`mu = 0`).
    Average,
    /// Mean over frames whose greedy label is not blank.
    DropBlank,
    /// The single frame with the lowest blank probability (`mu → ∞`).
    ArgmaxFrame,
}

impl std::str::FromStr for ShrinkMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::Weighted),
            "average" => Ok(Self::Average),
            "drop_blank" => Ok(Self::DropBlank),
            "argmax_frame" => Ok(Self::ArgmaxFrame),
            _ => Err(Error::Config(format!("unknown shrink mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for ShrinkMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Weighted => "weighted",
            Self::Average => "average",
            Self::DropBlank => "drop_blank",
            Self::ArgmaxFrame => "argmax_frame",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkConfig {
    pub mu: f64,
    pub mode: ShrinkMode,
}

impl Default for ShrinkConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            mode: ShrinkMode::Weighted,
        }
    }
}

impl ShrinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(Error::Config(format!("shrink mu must be finite and >= 0, got {}", self.mu)));
        }
        Ok(())
    }

    /// Temperature actually applied in weighted pooling.
    pub fn effective_mu(&self) -> f64 {
        match self.mode {
            ShrinkMode::Average => 0.0,
            _ => self.mu,
        }
    }

    /// Whether gradients flow into the blank probabilities.
    pub fn differentiable_weights(&self) -> bool {
        matches!(self.mode, ShrinkMode::Weighted | ShrinkMode::Average)
    }
}

/// Per-frame weights: within each segment, `softmax(mu · (1 − p_blank))`.
pub fn segment_weights<F: Real>(blank: &[F], segments: &[(usize, usize)], mu: F) -> Vec<F> {
    let mut w = vec![F::zero(); blank.len()];
    for &(a, b) in segments {
        let seg = &mut w[a..b];
        for (x, &p) in seg.iter_mut().zip(&blank[a..b]) {
            *x = mu * (F::one() - p);
        }
        kernels::softmax_row(seg);
    }
    w
}

/// One-hot weights on the lowest-blank frame of each segment (earliest on ties).
pub fn argmax_frame_weights<F: Real>(blank: &[F], segments: &[(usize, usize)]) -> Vec<F> {
    let mut w = vec![F::zero(); blank.len()];
    for &(a, b) in segments {
        let mut best = a;
        for t in a + 1..b {
            if blank[t] < blank[best] {
                best = t;
            }
        }
        w[best] = F::one();
    }
    w
}

/// Uniform weights over non-blank frames; all-blank segments fall back to a plain mean.
pub fn drop_blank_weights<F: Real>(path: &[usize], blank_label: usize, segments: &[(usize, usize)]) -> Vec<F> {
    let mut w = vec![F::zero(); path.len()];
    for &(a, b) in segments {
        let keep: Vec<usize> = (a..b).filter(|&t| path[t] != blank_label).collect();
        let keep = if keep.is_empty() { (a..b).collect() } else { keep };
        let share = F::one() / F::of(keep.len() as f64);
        for t in keep {
            w[t] = share;
        }
    }
    w
}

/// Frame weights for `cfg`. `path` is only consulted in drop-blank mode.
pub fn frame_weights<F: Real>(
    cfg: &ShrinkConfig,
    blank: &[F],
    path: &[usize],
    blank_label: usize,
    segments: &[(usize, usize)],
) -> Vec<F> {
    match cfg.mode {
        ShrinkMode::Weighted | ShrinkMode::Average => {
            segment_weights(blank, segments, F::of(cfg.effective_mu()))
        }
        ShrinkMode::ArgmaxFrame => argmax_frame_weights(blank, segments),
        ShrinkMode::DropBlank => drop_blank_weights(path, blank_label, segments),
    }
}

/// `Σ_t w_t · h_t` per segment, accumulated in frame order.
pub fn pool_rows<F: Real>(states: &[F], d: usize, segments: &[(usize, usize)], weights: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); segments.len() * d];
    for (si, &(a, b)) in segments.iter().enumerate() {
        let o = &mut out[si * d..(si + 1) * d];
        for t in a..b {
            let w = weights[t];
            for (x, &h) in o.iter_mut().zip(&states[t * d..(t + 1) * d]) {
                *x += w * h;
            }
        }
    }
    out
}

fn check_inputs<F: Real>(states: &Tensor<F>, n: usize, segments: &SegmentSet) -> Result<()> {
    if states.shape().len() != 2 || states.shape()[0] != n || segments.frames() != n {
        return Err(Error::Shape {
            op: "shrink",
            lhs: states.shape().to_vec(),
            rhs: vec![n, segments.frames()],
        });
    }
    Ok(())
}

/// Shrinks `states[T′×d]` to one row per segment.
pub fn weighted_shrink<F: Real>(
    states: &Tensor<F>,
    blank_probs: &[F],
    segments: &SegmentSet,
    cfg: &ShrinkConfig,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    check_inputs(states, blank_probs.len(), segments)?;
    if blank_probs.iter().any(|&p| !(p >= F::zero() && p <= F::one())) {
        return Err(Error::invalid("blank probabilities must lie in [0, 1]"));
    }
    if cfg.mode == ShrinkMode::DropBlank {
        return Err(Error::invalid("drop-blank shrinking needs a greedy path; use drop_blank_shrink"));
    }
    let w = frame_weights(cfg, blank_probs, &[], 0, segments.intervals());
    let d = states.cols();
    Tensor::new(
        vec![segments.len(), d],
        pool_rows(states.data(), d, segments.intervals(), &w),
    )
}

/// Averages only the non-blank frames of each segment.
pub fn drop_blank_shrink<F: Real>(
    states: &Tensor<F>,
    path: &[usize],
    blank_label: usize,
    segments: &SegmentSet,
) -> Result<Tensor<F>> {
    check_inputs(states, path.len(), segments)?;
    let w: Vec<F> = drop_blank_weights(path, blank_label, segments.intervals());
    let d = states.cols();
    Tensor::new(
        vec![segments.len(), d],
        pool_rows(states.data(), d, segments.intervals(), &w),
    )
}
