//! Streaming engine: consumes feature frames as they arrive, detects
//! source segments online and interleaves READ and WRITE actions under the
//! Wait-K-Stride-N policy.

use std::cmp::Ordering;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::ctc::BoundaryDetector;
use crate::data::{EOS, PAD};
use crate::error::{Error, Result};
use crate::metrics::{LatencyRecord, Trace, TraceAction, TraceEvent};
use crate::model::{visible_segments, AcousticStream, DecoderState, EncodedFrame, Memory, Model, SemanticState, WAIT_ALL};
use crate::numerics::kernels;
use crate::shrink;

/// Decoding policy of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Segments read before the first write; [`WAIT_ALL`] waits for the
    /// whole source.
    pub k: usize,
    /// Tokens written per stride, and segments read between strides.
    pub n: usize,
    /// Beam width within a stride.
    pub beam: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { k: 3, n: 2, beam: 5 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.beam == 0 {
            return Err(Error::invalid(format!(
                "policy needs k, n and beam of at least 1, got k={} n={} beam={}",
                self.k, self.n, self.beam
            )));
        }
        Ok(())
    }
}

/// Decision returned by [`StreamSession::step`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// One more segment was made visible to the decoder.
    Read(usize),
    /// A stride of target tokens was committed.
    Write(Vec<usize>),
    /// The hypothesis is complete.
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Reading,
    Writing,
    Finished,
}

/// A detected source segment, in encoder frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// Audio heard when the segment was closed.
    pub detected_ms: f64,
}

/// A partial continuation inside one stride.
#[derive(Debug, Clone)]
pub struct BeamHypothesis<S> {
    pub tokens: Vec<usize>,
    /// Sum of the per-token log-probabilities.
    pub score: f64,
    /// Decoder state after feeding every token but the last.
    pub state: S,
    pub done: bool,
}

fn rank<S>(a: &BeamHypothesis<S>, b: &BeamHypothesis<S>) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over at most `len` tokens continuing from `state`, whose
/// next input is `pending`. `step` feeds a token and returns next-token
/// log-probabilities. Ties are broken towards smaller token ids, so width
/// 1 is greedy decoding. `PAD` is never proposed.
pub fn beam_search_stride<S: Clone>(
    state: S,
    pending: usize,
    len: usize,
    width: usize,
    mut step: impl FnMut(&mut S, usize) -> Vec<f32>,
) -> BeamHypothesis<S> {
    let mut beam = vec![(BeamHypothesis { tokens: Vec::new(), score: 0.0, state, done: false }, pending)];
    for _ in 0..len {
        if beam.iter().all(|(h, _)| h.done) {
            break;
        }
        let mut next = Vec::new();
        for (mut h, input) in beam {
            if h.done {
                next.push((h, input));
                continue;
            }
            let logp = step(&mut h.state, input);
            let mut cands: Vec<(usize, f32)> = logp.iter().copied().enumerate().filter(|&(i, _)| i != PAD).collect();
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(tok, lp) in cands.iter().take(width) {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let child = BeamHypothesis { tokens, score: h.score + lp as f64, state: h.state.clone(), done: tok == EOS };
                next.push((child, tok));
            }
        }
        next.sort_by(|a, b| rank(&a.0, &b.0));
        next.truncate(width);
        beam = next;
    }
    beam.into_iter().map(|(h, _)| h).min_by(rank).expect("beam is never empty")
}

/// One utterance being translated online.
pub struct StreamSession<'m> {
    model: &'m Model,
    policy: PolicyConfig,
    encoder: AcousticStream,
    detector: BoundaryDetector,
    frames: Vec<EncodedFrame>,
    path: Vec<usize>,
    segments: Vec<Segment>,
    semantic: SemanticState,
    memory: Memory,
    read: usize,
    ended: bool,
    decoder: DecoderState,
    pending: usize,
    hypothesis: Vec<usize>,
    delays: Vec<f64>,
    visible: Vec<usize>,
    eos: bool,
    finished: bool,
    events: Vec<TraceEvent>,
}

impl<'m> StreamSession<'m> {
    pub fn new(model: &'m Model, policy: PolicyConfig) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            model,
            policy,
            encoder: model.acoustic_stream(),
            detector: BoundaryDetector::new(model.cfg.blank()),
            frames: Vec::new(),
            path: Vec::new(),
            segments: Vec::new(),
            semantic: model.semantic_start(),
            memory: model.memory_start(),
            read: 0,
            ended: false,
            decoder: model.decoder_start(),
            pending: EOS,
            hypothesis: Vec::new(),
            delays: Vec::new(),
            visible: Vec::new(),
            eos: false,
            finished: false,
            events: Vec::new(),
        })
    }

    fn frame_ms(&self) -> f64 {
        self.model.cfg.frame_shift_ms()
    }

    /// Feeds feature rows (`frames × d_feat`, flattened) and returns the
    /// segments they completed.
    pub fn push_frames(&mut self, frames: &[f32]) -> Result<Vec<Segment>> {
        if self.ended {
            return Err(Error::StreamEnded);
        }
        let out = self.encoder.push(self.model, frames)?;
        Ok(self.absorb(out))
    }

    /// Marks end of input, flushing the encoder and the open segment.
    pub fn end_stream(&mut self) -> Result<Vec<Segment>> {
        if self.ended {
            return Err(Error::StreamEnded);
        }
        let out = self.encoder.finish(self.model)?;
        let mut segs = self.absorb(out);
        if self.model.cfg.use_shrink {
            if let Some(seg) = self.detector.finish() {
                let total = self.total_ms();
                segs.push(self.close(seg, total));
            }
        }
        self.ended = true;
        Ok(segs)
    }

    fn absorb(&mut self, frames: Vec<EncodedFrame>) -> Vec<Segment> {
        let mut segs = Vec::new();
        for fr in frames {
            let label = kernels::argmax(&fr.probs);
            let t = self.frames.len();
            self.frames.push(fr);
            self.path.push(label);
            let detected = (t + 1) as f64 * self.frame_ms();
            let closed = if self.model.cfg.use_shrink {
                self.detector.push(label)
            } else {
                Some((t, t + 1))
            };
            if let Some(seg) = closed {
                segs.push(self.close(seg, detected));
            }
        }
        segs
    }

    fn close(&mut self, (a, b): (usize, usize), detected_ms: f64) -> Segment {
        let m = self.model;
        let d = m.cfg.d_model;
        let row: Vec<f32> = if m.cfg.use_shrink {
            let blank = m.cfg.blank();
            let states: Vec<f32> = self.frames[a..b].iter().flat_map(|f| f.state.iter().copied()).collect();
            let pb: Vec<f32> = self.frames[a..b].iter().map(|f| f.probs[blank]).collect();
            let local = [(0, b - a)];
            let w = shrink::frame_weights(&m.cfg.shrink(), &pb, &self.path[a..b], blank, &local);
            shrink::pool_rows(&states, d, &local, &w)
        } else {
            self.frames[a].state.clone()
        };
        let enc = m.semantic_push(&mut self.semantic, &row);
        m.extend_memory(&mut self.memory, &enc);
        let seg = Segment { start: a, end: b, detected_ms };
        debug!("segment {} = frames [{a}, {b}) at {detected_ms} ms", self.segments.len());
        self.segments.push(seg);
        seg
    }

    /// Segments the next stride is allowed to see.
    fn target_visible(&self) -> usize {
        let t = self.hypothesis.len() + 1;
        let need = visible_segments(self.policy.k, self.policy.n, t, usize::MAX);
        if self.ended {
            need.min(self.segments.len())
        } else {
            need
        }
    }

    fn length_cap(&self) -> Option<usize> {
        self.ended.then(|| 2 * self.segments.len() + 10)
    }

    pub fn phase(&self) -> Phase {
        if self.finished {
            Phase::Finished
        } else if self.read < self.target_visible() {
            Phase::Reading
        } else {
            Phase::Writing
        }
    }

    /// Takes the next action, or returns `None` when more input is needed.
    pub fn step(&mut self) -> Result<Option<Action>> {
        if self.finished {
            return Ok(Some(Action::Finish));
        }
        let cap_hit = self.length_cap().is_some_and(|c| self.hypothesis.len() >= c);
        if self.eos || cap_hit {
            return Ok(Some(self.finish_action()));
        }
        if self.read < self.target_visible() {
            if self.read < self.segments.len() {
                let ms = if self.ended { self.total_ms() } else { self.segments[self.read].detected_ms };
                self.events.push(TraceEvent { ms, action: TraceAction::Read(self.read) });
                self.read += 1;
                return Ok(Some(Action::Read(self.read - 1)));
            }
            return Ok(None);
        }
        let tokens = self.write_stride()?;
        if tokens.is_empty() {
            return Ok(Some(self.finish_action()));
        }
        Ok(Some(Action::Write(tokens)))
    }

    fn finish_action(&mut self) -> Action {
        if !self.finished {
            self.finished = true;
            let ms = self.stamp();
            self.events.push(TraceEvent { ms, action: TraceAction::Finish });
        }
        Action::Finish
    }

    /// Audio consumed when the current stride began: detection time of the
    /// last segment read, or the whole stream once it has ended.
    fn stamp(&self) -> f64 {
        if self.ended {
            return self.total_ms();
        }
        self.read.checked_sub(1).map_or(0.0, |i| self.segments[i].detected_ms)
    }

    fn total_ms(&self) -> f64 {
        self.frames.len() as f64 * self.frame_ms()
    }

    /// Beam-searches up to `n` tokens over the segments read so far and
    /// commits the best stride. Returns the committed non-EOS tokens.
    pub fn write_stride(&mut self) -> Result<Vec<usize>> {
        if self.finished {
            return Err(Error::StreamEnded);
        }
        if self.read == 0 {
            return Err(Error::invalid("cannot write before any segment is read"));
        }
        let mut len = self.policy.n;
        if let Some(c) = self.length_cap() {
            len = len.min(c.saturating_sub(self.hypothesis.len()));
        }
        let visible = self.read;
        let (model, memory) = (self.model, &self.memory);
        let best = beam_search_stride(self.decoder.clone(), self.pending, len, self.policy.beam, |st, tok| {
            model.decoder_step(st, memory, visible, tok)
        });
        let ms = self.stamp();
        self.decoder = best.state;
        self.pending = best.tokens.last().copied().unwrap_or(self.pending);
        self.eos = best.done;
        let tokens: Vec<usize> = best.tokens.into_iter().filter(|&t| t != EOS).collect();
        if !tokens.is_empty() {
            self.delays.extend(std::iter::repeat_n(ms, tokens.len()));
            self.visible.extend(std::iter::repeat_n(visible, tokens.len()));
            self.hypothesis.extend_from_slice(&tokens);
            self.events.push(TraceEvent { ms, action: TraceAction::Write(tokens.clone()) });
        }
        Ok(tokens)
    }

    /// Runs the policy to completion; the stream must have ended.
    pub fn finalize(&mut self, ref_len: usize) -> Result<(Vec<usize>, LatencyRecord)> {
        if !self.ended {
            return Err(Error::invalid("finalize before end_stream"));
        }
        loop {
            match self.step()? {
                Some(Action::Finish) => break,
                Some(_) => {}
                None => unreachable!("an ended stream never starves"),
            }
        }
        Ok((self.hypothesis.clone(), self.latency(ref_len)))
    }

    pub fn latency(&self, ref_len: usize) -> LatencyRecord {
        LatencyRecord {
            delays_ms: self.delays.clone(),
            source_frames: self.frames.len(),
            frame_ms: self.frame_ms(),
            ref_len,
            offset_ms: self.model.cfg.effective_lookahead_ms(),
        }
    }

    pub fn trace(&self, utt: &str, reference: &[usize]) -> Trace {
        Trace {
            utt: utt.to_string(),
            source_frames: self.frames.len(),
            frame_ms: self.frame_ms(),
            offset_ms: self.model.cfg.effective_lookahead_ms(),
            reference: reference.to_vec(),
            events: self.events.clone(),
        }
    }

    pub fn hypothesis(&self) -> &[usize] {
        &self.hypothesis
    }

    pub fn delays_ms(&self) -> &[f64] {
        &self.delays
    }

    /// Segments visible when each committed token was decoded.
    pub fn visibility(&self) -> &[usize] {
        &self.visible
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Encoder frames produced so far.
    pub fn encoded(&self) -> &[EncodedFrame] {
        &self.frames
    }

    pub fn greedy_path(&self) -> &[usize] {
        &self.path
    }

    pub fn segments_read(&self) -> usize {
        self.read
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn is_wait_all(&self) -> bool {
        self.policy.k == WAIT_ALL
    }
}

/// Feeds `frames` in chunks of `chunk` rows, stepping the policy after
/// every chunk, then ends the stream and finalises.
pub fn simulate<'m>(
    model: &'m Model,
    policy: PolicyConfig,
    feats: &crate::data::FeatureSequence,
    chunk: usize,
    ref_len: usize,
) -> Result<(StreamSession<'m>, Vec<usize>, LatencyRecord)> {
    if chunk == 0 {
        return Err(Error::invalid("chunk size must be positive"));
    }
    let mut s = StreamSession::new(model, policy)?;
    let d = feats.dim();
    for rows in feats.data().chunks(chunk * d) {
        s.push_frames(rows)?;
        while let Some(a) = s.step()? {
            if a == Action::Finish {
                break;
            }
        }
    }
    s.end_stream()?;
    let (hyp, rec) = s.finalize(ref_len)?;
    Ok((s, hyp, rec))
}
