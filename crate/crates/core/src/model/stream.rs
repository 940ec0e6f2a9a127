use super::layers::KvCache;
use super::{Model, Stage};
use crate::error::{Error, Result};

/// One acoustic encoder output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub state: Vec<f32>,
    /// CTC posteriors, blank last.
    pub probs: Vec<f32>,
}

/// Incremental acoustic encoder.
///
/// Each stage keeps every row it has produced. A conv stage emits an output
/// frame once its look-ahead is covered (or the input has ended, in which
/// case missing frames are the zero padding of the offline pass). A
/// Transformer stage attends through its key/value cache.
#[derive(Debug, Clone)]
pub struct AcousticStream {
    bufs: Vec<Vec<f32>>,
    counts: Vec<usize>,
    widths: Vec<usize>,
    caches: Vec<KvCache>,
    ended: bool,
    emitted: usize,
}

impl AcousticStream {
    pub(super) fn new(model: &Model) -> Self {
        let n = model.stages.len();
        let mut widths = vec![model.cfg.d_feat];
        widths.extend(std::iter::repeat_n(model.cfg.d_model, n));
        Self {
            bufs: vec![Vec::new(); n + 1],
            counts: vec![0; n + 1],
            widths,
            caches: vec![KvCache::default(); n],
            ended: false,
            emitted: 0,
        }
    }

    pub fn input_frames(&self) -> usize {
        self.counts[0]
    }

    /// Encoder frames emitted so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    /// Appends input rows (`frames × d_feat`, flattened) and returns the
    /// encoder frames that became computable.
    pub fn push(&mut self, model: &Model, frames: &[f32]) -> Result<Vec<EncodedFrame>> {
        if self.ended {
            return Err(Error::StreamEnded);
        }
        let d = self.widths[0];
        if !frames.len().is_multiple_of(d) {
            return Err(Error::Shape { op: "push_frames", lhs: vec![frames.len()], rhs: vec![d] });
        }
        self.bufs[0].extend_from_slice(frames);
        self.counts[0] += frames.len() / d;
        Ok(self.advance(model))
    }

    /// Marks end of input and flushes the remaining frames.
    pub fn finish(&mut self, model: &Model) -> Result<Vec<EncodedFrame>> {
        if self.ended {
            return Err(Error::StreamEnded);
        }
        if self.counts[0] == 0 {
            return Err(Error::Empty("stream ended before any frame"));
        }
        self.ended = true;
        Ok(self.advance(model))
    }

    fn advance(&mut self, model: &Model) -> Vec<EncodedFrame> {
        let s = &model.params;
        for (i, stage) in model.stages.iter().enumerate() {
            let (have, avail) = (self.counts[i + 1], self.counts[i]);
            let (lo, hi) = self.bufs.split_at_mut(i + 1);
            let input = &lo[i];
            let output = &mut hi[0];
            match stage {
                Stage::Conv(c) => {
                    let ready = c.ready(avail, self.ended);
                    if ready > have {
                        output.extend(c.rows(s, input, avail, have, ready));
                        self.counts[i + 1] = ready;
                    }
                }
                Stage::Layer(l) => {
                    if avail > have {
                        let w = self.widths[i];
                        let rows = l.rows(s, &mut self.caches[i], &input[have * w..avail * w], true);
                        output.extend(rows);
                        self.counts[i + 1] = avail;
                    }
                }
            }
        }
        let last = self.counts.len() - 1;
        let total = self.counts[last];
        if total == self.emitted {
            return Vec::new();
        }
        let d = model.cfg.d_model;
        let states = model.final_acoustic_rows(&self.bufs[last][self.emitted * d..total * d]);
        let probs = model.ctc_probs(&states);
        self.emitted = total;
        let c = model.cfg.ctc_classes();
        states
            .chunks(d)
            .zip(probs.chunks(c))
            .map(|(h, p)| EncodedFrame { state: h.to_vec(), probs: p.to_vec() })
            .collect()
    }
}
