use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::BlankPenaltyMode;
use crate::error::{Error, Result};
use crate::shrink::{ShrinkConfig, ShrinkMode};

/// Milliseconds per input feature frame.
pub const FRAME_MS: f64 = 10.0;

/// `k` value meaning "wait for the whole source".
pub const WAIT_ALL: usize = usize::MAX;

/// Network shape and the loss and policy settings that travel with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub n_blocks: usize,
    pub convs_per_block: usize,
    pub conv_width: usize,
    /// Look-ahead of each conv inside a block, in that conv's input frames.
    pub conv_lookahead: Vec<usize>,
    pub transformer_layers_per_block: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub semantic_layers: usize,
    pub decoder_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub mu: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
    pub n: usize,
    pub unidirectional: bool,
    pub gradual_downsampling: bool,
    pub use_shrink: bool,
    pub shrink_mode: ShrinkMode,
    pub blank_penalty_mode: BlankPenaltyMode,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 16,
            n_blocks: 3,
            convs_per_block: 3,
            conv_width: 3,
            conv_lookahead: vec![0, 0, 1],
            transformer_layers_per_block: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            semantic_layers: 2,
            decoder_layers: 2,
            src_vocab: 23,
            tgt_vocab: 23,
            mu: 1.0,
            lambda: 0.5,
            alpha: 1.0,
            k: 3,
            n: 2,
            unidirectional: true,
            gradual_downsampling: true,
            use_shrink: true,
            shrink_mode: ShrinkMode::Weighted,
            blank_penalty_mode: BlankPenaltyMode::ArgmaxBlankFrames,
            dropout: 0.1,
        }
    }
}

/// Fields that decide parameter shapes and the computation graph.
#[derive(Serialize)]
struct Architecture<'a> {
    d_feat: usize,
    n_blocks: usize,
    convs_per_block: usize,
    conv_width: usize,
    conv_lookahead: &'a [usize],
    transformer_layers_per_block: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    semantic_layers: usize,
    decoder_layers: usize,
    src_vocab: usize,
    tgt_vocab: usize,
    unidirectional: bool,
    gradual_downsampling: bool,
    use_shrink: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_feat == 0 || self.d_model < 2 || self.d_ff == 0 {
            return fail("d_feat, d_model (>= 2) and d_ff must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.convs_per_block < 2 {
            return fail("convs_per_block must be at least 2 (the second conv downsamples)".into());
        }
        if self.conv_lookahead.len() != self.convs_per_block {
            return fail(format!(
                "conv_lookahead lists {} values for {} convs per block",
                self.conv_lookahead.len(),
                self.convs_per_block
            ));
        }
        if let Some(&l) = self.conv_lookahead.iter().find(|&&l| l >= self.conv_width) {
            return fail(format!("conv lookahead {l} must be below conv_width {}", self.conv_width));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return fail("vocabularies need at least one token beyond the reserved ids".into());
        }
        if self.k == 0 || self.n == 0 {
            return fail("k and n must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.alpha >= 0.0 && self.lambda.is_finite() && self.alpha.is_finite()) {
            return fail("lambda and alpha must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)".into());
        }
        self.shrink().validate()
    }

    pub fn shrink(&self) -> ShrinkConfig {
        ShrinkConfig { mu: self.mu, mode: self.shrink_mode }
    }

    /// Stable digest of the architecture fields.
    pub fn fingerprint(&self) -> String {
        let arch = Architecture {
            d_feat: self.d_feat,
            n_blocks: self.n_blocks,
            convs_per_block: self.convs_per_block,
            conv_width: self.conv_width,
            conv_lookahead: &self.conv_lookahead,
            transformer_layers_per_block: self.transformer_layers_per_block,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            semantic_layers: self.semantic_layers,
            decoder_layers: self.decoder_layers,
            src_vocab: self.src_vocab,
            tgt_vocab: self.tgt_vocab,
            unidirectional: self.unidirectional,
            gradual_downsampling: self.gradual_downsampling,
            use_shrink: self.use_shrink,
        };
        let json = serde_json::to_vec(&arch).expect("architecture serialises");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Total downsampling factor of the acoustic encoder.
    pub fn downsample(&self) -> usize {
        1 << self.n_blocks
    }

    /// Milliseconds of audio per encoder output frame.
    pub fn frame_shift_ms(&self) -> f64 {
        FRAME_MS * self.downsample() as f64
    }

    /// Encoder output length for `t_x` input frames.
    pub fn encoded_len(&self, t_x: usize) -> usize {
        let mut t = t_x;
        for _ in 0..self.n_blocks {
            t = t.div_ceil(2);
        }
        t
    }

    /// CTC classes: source vocabulary plus the trailing blank.
    pub fn ctc_classes(&self) -> usize {
        self.src_vocab + 1
    }

    pub fn blank(&self) -> usize {
        self.src_vocab
    }

    /// Right context of the conv stack in milliseconds.
    pub fn effective_lookahead_ms(&self) -> f64 {
        effective_lookahead_ms(self.n_blocks, &self.conv_lookahead)
    }
}

/// Right context, in milliseconds, of `n_blocks` blocks whose convs use the
/// per-conv look-ahead `lookahead`; the second conv of each block has
/// stride 2. Look-ahead of a conv counts in its own input frames.
pub fn effective_lookahead_ms(n_blocks: usize, lookahead: &[usize]) -> f64 {
    let mut rate = 1;
    let mut frames = 0;
    for _ in 0..n_blocks {
        for (c, &l) in lookahead.iter().enumerate() {
            frames += l * rate;
            if c == 1 {
                rate *= 2;
            }
        }
    }
    frames as f64 * FRAME_MS
}

/// Number of source segments target position `t` (1-based) may attend:
/// `min(n·⌊(t−1)/n⌋ + k, s)`.
pub fn visible_segments(k: usize, n: usize, t: usize, s: usize) -> usize {
    if k == WAIT_ALL {
        return s;
    }
    (n * ((t - 1) / n)).saturating_add(k).min(s)
}

/// Wait-K-Stride-N cross-attention mask, `t_y × s`, row-major.
pub fn build_cross_attention_mask(k: usize, n: usize, t_y: usize, s: usize) -> Result<Vec<bool>> {
    if s == 0 {
        return Err(Error::Empty("cross-attention mask over zero segments"));
    }
    if k == 0 || n == 0 {
        return Err(Error::invalid("k and n must be at least 1"));
    }
    let mut mask = vec![false; t_y * s];
    for t in 1..=t_y {
        let c = visible_segments(k, n, t, s);
        mask[(t - 1) * s..(t - 1) * s + c].fill(true);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(k: usize, n: usize, t_y: usize, s: usize) -> Vec<usize> {
        let m = build_cross_attention_mask(k, n, t_y, s).unwrap();
        m.chunks(s).map(|r| r.iter().filter(|&&b| b).count()).collect()
    }

    #[test]
    fn mask_examples() {
        assert_eq!(counts(3, 2, 1, 9), vec![3]);
        assert_eq!(counts(2, 2, 5, 6), vec![2, 2, 4, 4, 6]);
        assert_eq!(counts(1, 1, 4, 9), vec![1, 2, 3, 4]);
        assert_eq!(counts(WAIT_ALL, 1, 3, 4), vec![4, 4, 4]);
        assert!(build_cross_attention_mask(1, 1, 3, 0).is_err());
    }

    #[test]
    fn lookahead_examples() {
        assert_eq!(effective_lookahead_ms(3, &[0, 0, 0]), 0.0);
        assert_eq!(ModelConfig::default().effective_lookahead_ms(), 140.0);
        assert_eq!(effective_lookahead_ms(1, &[2]), 20.0);
        assert_eq!(ModelConfig::default().frame_shift_ms(), 80.0);
    }

    #[test]
    fn fingerprint_ignores_policy() {
        let a = ModelConfig::default();
        let b = ModelConfig { k: 7, lambda: 0.0, ..a.clone() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ModelConfig { d_model: 32, ..a.clone() };
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
