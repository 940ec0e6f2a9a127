//! The network: acoustic encoder, CTC head, weighted shrinking, semantic
//! encoder and Wait-K-Stride-N decoder.
//!
//! Every component has two forward paths. The taped path builds a graph for
//! training. The row path runs the same kernels over rows appended to
//! key/value caches and is what the streaming engine uses; run over a whole
//! sequence at once it is the offline encoder.

mod config;
mod layers;
mod stream;

use log::warn;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{
    build_cross_attention_mask, effective_lookahead_ms, visible_segments, ModelConfig, FRAME_MS, WAIT_ALL,
};
pub use stream::{AcousticStream, EncodedFrame};

use crate::ctc::{self, CtcPosteriorGrid};
use crate::data::{FeatureSequence, Utterance, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::shrink::{self, ShrinkMode};
use layers::{ConvLayer, DecoderLayer, EncoderLayer, Fwd, KvCache, Linear, Norm};

#[derive(Debug, Clone)]
enum Stage {
    Conv(ConvLayer),
    Layer(EncoderLayer),
}

/// What a training forward pass optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Blank-limited CTC on the acoustic encoder only.
    Ctc,
    /// `L_ST + α · L′_CTC`.
    Joint,
}

/// Per-utterance losses and diagnostics from one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UttStats {
    pub total: f64,
    pub l_st: Option<f64>,
    pub l_ctc: Option<f64>,
    pub ctc_nll: Option<f64>,
    pub penalty: Option<f64>,
    pub frames: usize,
    pub blank_frames: usize,
    pub segments: usize,
    pub transcript_len: usize,
    pub tokens: usize,
    pub correct: usize,
}

/// Decoder self-attention caches for one hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    caches: Vec<KvCache>,
    pos: usize,
}

impl DecoderState {
    /// Tokens fed so far, including the start symbol.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

/// Cross-attention keys and values of the source rows seen so far.
#[derive(Debug, Clone)]
pub struct Memory {
    caches: Vec<KvCache>,
    rows: usize,
}

impl Memory {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Causal semantic-encoder caches.
#[derive(Debug, Clone)]
pub struct SemanticState {
    caches: Vec<KvCache>,
    pos: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    stages: Vec<Stage>,
    acoustic_norm: Norm,
    ctc_hidden: Linear,
    ctc_out: Linear,
    semantic: Vec<EncoderLayer>,
    semantic_norm: Option<Norm>,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    project: Linear,
}

impl Model {
    /// Freshly initialised model; parameters are a function of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d_model;
        let (h, ff) = (cfg.n_heads, cfg.d_ff);

        let mut convs = Vec::new();
        let mut blocks: Vec<Vec<EncoderLayer>> = Vec::new();
        let mut c_in = cfg.d_feat;
        for b in 0..cfg.n_blocks {
            for c in 0..cfg.convs_per_block {
                let geom = ConvGeom {
                    width: cfg.conv_width,
                    c_in,
                    c_out: d,
                    stride: if c == 1 { 2 } else { 1 },
                    lookahead: cfg.conv_lookahead[c],
                };
                convs.push(ConvLayer::new(&mut s, &format!("acoustic.block{b}.conv{c}"), geom, &mut rng));
                c_in = d;
            }
            blocks.push(
                (0..cfg.transformer_layers_per_block)
                    .map(|l| EncoderLayer::new(&mut s, &format!("acoustic.block{b}.layer{l}"), d, h, ff, &mut rng))
                    .collect(),
            );
        }
        let mut stages = Vec::new();
        if cfg.gradual_downsampling {
            let mut convs = convs.into_iter();
            for layers in blocks {
                stages.extend(convs.by_ref().take(cfg.convs_per_block).map(Stage::Conv));
                stages.extend(layers.into_iter().map(Stage::Layer));
            }
        } else {
            stages.extend(convs.into_iter().map(Stage::Conv));
            stages.extend(blocks.into_iter().flatten().map(Stage::Layer));
        }
        let acoustic_norm = Norm::new(&mut s, "acoustic.norm", d);
        let ctc_hidden = Linear::new(&mut s, "ctc.hidden", d, d, &mut rng);
        let ctc_out = Linear::new(&mut s, "ctc.out", d, cfg.ctc_classes(), &mut rng);

        let (semantic, semantic_norm) = if cfg.use_shrink {
            let layers = (0..cfg.semantic_layers)
                .map(|l| EncoderLayer::new(&mut s, &format!("semantic.layer{l}"), d, h, ff, &mut rng))
                .collect();
            (layers, Some(Norm::new(&mut s, "semantic.norm", d)))
        } else {
            (Vec::new(), None)
        };

        let embed = s.add("decoder.embed", Tensor::uniform_fan_in(vec![cfg.tgt_vocab, d], 1, &mut rng));
        let decoder = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer::new(&mut s, &format!("decoder.layer{l}"), d, h, ff, &mut rng))
            .collect();
        let decoder_norm = Norm::new(&mut s, "decoder.norm", d);
        let project = Linear::new(&mut s, "decoder.project", d, cfg.tgt_vocab, &mut rng);

        Ok(Self {
            cfg,
            params: s,
            stages,
            acoustic_norm,
            ctc_hidden,
            ctc_out,
            semantic,
            semantic_norm,
            embed,
            decoder,
            decoder_norm,
            project,
        })
    }

    /// Model with the architecture of `cfg` and the values of `params`.
    pub fn with_params(cfg: ModelConfig, params: &ParamStore<f32>) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.params.load_values(params)?;
        Ok(m)
    }

    /// Parameter-name prefixes a forward pass with `objective` can reach.
    pub fn trainable_prefixes(&self, objective: Objective) -> Vec<&'static str> {
        match objective {
            Objective::Ctc => vec!["acoustic.", "ctc."],
            Objective::Joint => {
                let mut p = vec!["acoustic.", "semantic.", "decoder."];
                let via_shrink = self.cfg.use_shrink && self.cfg.shrink().differentiable_weights();
                if self.cfg.alpha > 0.0 || via_shrink {
                    p.push("ctc.");
                }
                p
            }
        }
    }

    /// Freezes every parameter `objective` cannot reach.
    pub fn set_objective(&mut self, objective: Objective) {
        self.params.set_trainable("", false);
        for p in self.trainable_prefixes(objective) {
            self.params.set_trainable(p, true);
        }
    }

    fn check_frames(&self, feats: &FeatureSequence) -> Result<()> {
        if feats.dim() != self.cfg.d_feat {
            return Err(Error::Shape {
                op: "acoustic input",
                lhs: vec![feats.frames(), feats.dim()],
                rhs: vec![self.cfg.d_feat],
            });
        }
        if feats.frames() < self.cfg.downsample() {
            return Err(Error::invalid(format!(
                "{} frames is shorter than the downsampling factor {}",
                feats.frames(),
                self.cfg.downsample()
            )));
        }
        Ok(())
    }

    // ---- offline row path ----

    /// Acoustic states `T′×d_model` and CTC posteriors for a whole utterance.
    pub fn acoustic_encode(&self, feats: &FeatureSequence) -> Result<(Tensor<f32>, CtcPosteriorGrid)> {
        self.check_frames(feats)?;
        let s = &self.params;
        let mut x = feats.data().to_vec();
        let mut t = feats.frames();
        for stage in &self.stages {
            match stage {
                Stage::Conv(c) => {
                    let out = c.geom.out_len(t);
                    x = c.rows(s, &x, t, 0, out);
                    t = out;
                }
                Stage::Layer(l) => {
                    x = l.rows(s, &mut KvCache::default(), &x, self.cfg.unidirectional);
                }
            }
        }
        let states = self.acoustic_norm.rows(s, &x);
        let probs = self.ctc_probs(&states);
        let grid = CtcPosteriorGrid::from_probs(t, self.cfg.ctc_classes(), probs.iter().map(|&p| p as f64).collect())?;
        Ok((Tensor::new(vec![t, self.cfg.d_model], states)?, grid))
    }

    /// Softmax CTC posteriors for rows of acoustic states.
    pub(crate) fn ctc_probs(&self, states: &[f32]) -> Vec<f32> {
        let s = &self.params;
        let mut h = self.ctc_hidden.rows(s, states);
        kernels::relu_in_place(&mut h);
        let mut logits = self.ctc_out.rows(s, &h);
        for row in logits.chunks_mut(self.cfg.ctc_classes()) {
            kernels::softmax_row(row);
        }
        logits
    }

    pub(crate) fn final_acoustic_rows(&self, x: &[f32]) -> Vec<f32> {
        self.acoustic_norm.rows(&self.params, x)
    }

    /// Semantic encoder over shrunk states `S×d_model`. Without shrinking
    /// the acoustic states pass through unchanged.
    pub fn semantic_encode(&self, shrunk: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.cfg.d_model;
        if shrunk.shape().len() != 2 || shrunk.cols() != d {
            return Err(Error::Shape { op: "semantic_encode", lhs: shrunk.shape().to_vec(), rhs: vec![d] });
        }
        if shrunk.rows() == 0 {
            return Err(Error::Empty("semantic encoder input"));
        }
        let mut st = self.semantic_start();
        let out = self.semantic_rows(&mut st, shrunk.data(), self.cfg.unidirectional);
        Tensor::new(shrunk.shape().to_vec(), out)
    }

    pub fn semantic_start(&self) -> SemanticState {
        SemanticState { caches: vec![KvCache::default(); self.semantic.len()], pos: 0 }
    }

    /// Encodes shrunk rows appended to the stream.
    pub fn semantic_push(&self, st: &mut SemanticState, rows: &[f32]) -> Vec<f32> {
        self.semantic_rows(st, rows, true)
    }

    fn semantic_rows(&self, st: &mut SemanticState, rows: &[f32], causal: bool) -> Vec<f32> {
        let Some(norm) = &self.semantic_norm else {
            return rows.to_vec();
        };
        let d = self.cfg.d_model;
        let m = rows.len() / d;
        let mut x = rows.to_vec();
        let pe: Vec<f32> = (st.pos..st.pos + m).flat_map(|p| kernels::position_encoding::<f32>(p, d)).collect();
        kernels::add_in_place(&mut x, &pe);
        st.pos += m;
        for (l, cache) in self.semantic.iter().zip(&mut st.caches) {
            x = l.rows(&self.params, cache, &x, causal);
        }
        norm.rows(&self.params, &x)
    }

    pub fn memory_start(&self) -> Memory {
        Memory { caches: vec![KvCache::default(); self.decoder.len()], rows: 0 }
    }

    /// Adds encoded source rows to the cross-attention memory.
    pub fn extend_memory(&self, mem: &mut Memory, rows: &[f32]) {
        for (l, cache) in self.decoder.iter().zip(&mut mem.caches) {
            l.extend_memory(&self.params, cache, rows);
        }
        mem.rows += rows.len() / self.cfg.d_model;
    }

    /// Decoder state after feeding the start symbol is produced by the
    /// first [`Model::decoder_step`] call.
    pub fn decoder_start(&self) -> DecoderState {
        DecoderState { caches: vec![KvCache::default(); self.decoder.len()], pos: 0 }
    }

    /// Feeds `token` and returns log-probabilities of the next token given
    /// the first `visible` memory rows.
    pub fn decoder_step(&self, st: &mut DecoderState, mem: &Memory, visible: usize, token: usize) -> Vec<f32> {
        let s = &self.params;
        let d = self.cfg.d_model;
        let e = &s.get(self.embed).data()[token * d..(token + 1) * d];
        let mut x = e.to_vec();
        kernels::add_in_place(&mut x, &kernels::position_encoding::<f32>(st.pos, d));
        st.pos += 1;
        let visible = visible.min(mem.rows);
        for (l, (cache, m)) in self.decoder.iter().zip(st.caches.iter_mut().zip(&mem.caches)) {
            x = l.step(s, cache, m, visible, &x);
        }
        let h = self.decoder_norm.rows(s, &x);
        let mut logits = self.project.rows(s, &h);
        kernels::log_softmax_row(&mut logits);
        logits
    }

    /// Streaming acoustic encoder over this model.
    pub fn acoustic_stream(&self) -> AcousticStream {
        AcousticStream::new(self)
    }

    // ---- taped training path ----

    fn tape_acoustic(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let mut x = x;
        for stage in &self.stages {
            x = match stage {
                Stage::Conv(c) => c.tape(f, x)?,
                Stage::Layer(l) => l.tape(f, x, self.cfg.unidirectional)?,
            };
        }
        self.acoustic_norm.tape(f, x)
    }

    fn tape_ctc_logits(&self, f: &mut Fwd, states: Var) -> Result<Var> {
        let h = self.ctc_hidden.tape(f, states)?;
        let h = f.tape.relu(h);
        self.ctc_out.tape(f, h)
    }

    /// Taped acoustic encoder and CTC logits; exposed for equivalence tests.
    pub fn tape_encode(&self, feats: &FeatureSequence) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_frames(feats)?;
        let mut f = Fwd::new(&self.params, 0.0, None);
        let x = f.tape.constant(vec![feats.frames(), feats.dim()], feats.data().to_vec())?;
        let states = self.tape_acoustic(&mut f, x)?;
        let logits = self.tape_ctc_logits(&mut f, states)?;
        Ok((f.tape.to_tensor(states), f.tape.to_tensor(logits)))
    }

    /// Builds the loss graph for one utterance. Returns `None` when CTC is
    /// part of the objective but the transcript cannot be aligned.
    pub fn forward_utterance(
        &self,
        utt: &Utterance,
        objective: Objective,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Option<(Tape<f32>, Var, UttStats)>> {
        let cfg = &self.cfg;
        self.check_frames(&utt.features)?;
        let t_enc = cfg.encoded_len(utt.features.frames());
        let with_ctc = objective == Objective::Ctc || cfg.alpha > 0.0;
        let required = ctc::required_frames(&utt.transcript);
        if with_ctc && required > t_enc {
            warn!(
                "skipping {}: {} encoder frames cannot align {} transcript labels",
                utt.id,
                t_enc,
                utt.transcript.len()
            );
            return Ok(None);
        }
        let mut f = Fwd::new(&self.params, cfg.dropout, rng);
        let feats = &utt.features;
        let x = f.tape.constant(vec![feats.frames(), feats.dim()], feats.data().to_vec())?;
        let states = self.tape_acoustic(&mut f, x)?;
        let logits = self.tape_ctc_logits(&mut f, states)?;
        let classes = cfg.ctc_classes();
        let blank = cfg.blank();
        let probs = f.tape.softmax(logits, 1)?;
        let path: Vec<usize> = f.tape.value(probs).chunks(classes).map(kernels::argmax).collect();

        let mut stats = UttStats {
            frames: t_enc,
            blank_frames: path.iter().filter(|&&l| l == blank).count(),
            transcript_len: utt.transcript.len(),
            ..Default::default()
        };

        let mut l_ctc = None;
        if with_ctc {
            let lp = f.tape.log_softmax(logits, 1)?;
            let nll = f.tape.ctc_nll(lp, &utt.transcript)?;
            let idx: Vec<usize> = ctc::penalty_frames(&path, blank, cfg.blank_penalty_mode)
                .into_iter()
                .map(|t| t * classes + blank)
                .collect();
            let pen = f.tape.select_sum(probs, &idx)?;
            stats.ctc_nll = Some(f.tape.scalar(nll) as f64);
            stats.penalty = Some(f.tape.scalar(pen) as f64);
            let weighted = f.tape.scale(pen, cfg.lambda as f32);
            let l = f.tape.add(nll, weighted)?;
            stats.l_ctc = Some(f.tape.scalar(l) as f64);
            l_ctc = Some(l);
        }

        let loss = match objective {
            Objective::Ctc => l_ctc.expect("ctc objective computes the ctc loss"),
            Objective::Joint => {
                let memory = if cfg.use_shrink {
                    let segs = ctc::detect_boundaries(&path, blank)?;
                    stats.segments = segs.len();
                    let shrunk = match cfg.shrink_mode {
                        ShrinkMode::Weighted | ShrinkMode::Average => {
                            let pb = f.tape.column(probs, blank)?;
                            f.tape.segment_pool(states, pb, segs.intervals(), cfg.shrink().effective_mu() as f32)?
                        }
                        ShrinkMode::ArgmaxFrame | ShrinkMode::DropBlank => {
                            let pb: Vec<f32> = f.tape.value(probs).chunks(classes).map(|r| r[blank]).collect();
                            let w = shrink::frame_weights(&cfg.shrink(), &pb, &path, blank, segs.intervals());
                            f.tape.segment_pool_fixed(states, segs.intervals(), w)?
                        }
                    };
                    self.tape_semantic(&mut f, shrunk)?
                } else {
                    stats.segments = t_enc;
                    states
                };
                let (l_st, tokens, correct) = self.tape_decoder(&mut f, memory, &utt.translation)?;
                stats.l_st = Some(f.tape.scalar(l_st) as f64);
                stats.tokens = tokens;
                stats.correct = correct;
                match l_ctc {
                    Some(l) if cfg.alpha > 0.0 => {
                        let w = f.tape.scale(l, cfg.alpha as f32);
                        f.tape.add(l_st, w)?
                    }
                    _ => l_st,
                }
            }
        };
        stats.total = f.tape.scalar(loss) as f64;
        if !stats.total.is_finite() {
            return Err(Error::NonFinite(format!("loss of utterance {}", utt.id)));
        }
        Ok(Some((f.tape, loss, stats)))
    }

    fn tape_semantic(&self, f: &mut Fwd, shrunk: Var) -> Result<Var> {
        let Some(norm) = &self.semantic_norm else {
            return Ok(shrunk);
        };
        let x = f.add_positions(shrunk)?;
        let mut x = f.dropout(x)?;
        for l in &self.semantic {
            x = l.tape(f, x, self.cfg.unidirectional)?;
        }
        norm.tape(f, x)
    }

    /// Teacher-forced mean token NLL under the Wait-K-Stride-N mask, plus
    /// the number of targets and of argmax hits.
    fn tape_decoder(&self, f: &mut Fwd, memory: Var, translation: &[usize]) -> Result<(Var, usize, usize)> {
        let cfg = &self.cfg;
        let s = f.tape.shape(memory)[0];
        let mut inputs = vec![EOS];
        inputs.extend_from_slice(translation);
        let mut targets = translation.to_vec();
        targets.push(EOS);
        let mask = build_cross_attention_mask(cfg.k, cfg.n, targets.len(), s)?;
        let table = f.p(self.embed);
        let x = f.tape.gather(table, &inputs)?;
        let x = f.add_positions(x)?;
        let mut x = f.dropout(x)?;
        for l in &self.decoder {
            x = l.tape(f, x, memory, &mask)?;
        }
        let h = self.decoder_norm.tape(f, x)?;
        let logits = self.project.tape(f, h)?;
        let correct = f
            .tape
            .value(logits)
            .chunks(cfg.tgt_vocab)
            .zip(&targets)
            .filter(|(row, &t)| kernels::argmax(row) == t)
            .count();
        let loss = f.tape.cross_entropy(logits, &targets, PAD)?;
        Ok((loss, targets.len(), correct))
    }

    /// Runs the forward pass for `utt` and accumulates `weight ·` gradient
    /// into the parameters. Returns `None` for skipped utterances.
    pub fn accumulate(
        &mut self,
        utt: &Utterance,
        objective: Objective,
        weight: f32,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Option<UttStats>> {
        let Some((mut tape, loss, stats)) = self.forward_utterance(utt, objective, rng)? else {
            return Ok(None);
        };
        let scaled = tape.scale(loss, weight);
        tape.backward_into(scaled, &mut self.params)?;
        Ok(Some(stats))
    }

    /// Loss diagnostics without dropout or gradients.
    pub fn evaluate_loss(&self, utt: &Utterance, objective: Objective) -> Result<Option<UttStats>> {
        Ok(self.forward_utterance(utt, objective, None)?.map(|(_, _, s)| s))
    }
}
