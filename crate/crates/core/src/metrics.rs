//! Latency metrics adapted to speech input, corpus BLEU and the action
//! trace format they are computed from.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Listening durations of one hypothesis and the quantities needed to
/// normalise them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    /// `d(y_i)` in milliseconds, one per emitted token.
    pub delays_ms: Vec<f64>,
    /// Encoder frames of the source, `|x|`.
    pub source_frames: usize,
    /// Milliseconds per encoder frame, `T_s`.
    pub frame_ms: f64,
    /// Reference length `|y*|`.
    pub ref_len: usize,
    /// Look-ahead offset added to AL.
    pub offset_ms: f64,
}

impl LatencyRecord {
    pub fn total_ms(&self) -> f64 {
        self.source_frames as f64 * self.frame_ms
    }

    pub fn validate(&self) -> Result<()> {
        if self.delays_ms.is_empty() {
            return Err(Error::Empty("latency of an empty hypothesis"));
        }
        if self.source_frames == 0 || self.frame_ms.is_nan() || self.frame_ms <= 0.0 {
            return Err(Error::invalid("source duration must be positive"));
        }
        let total = self.total_ms();
        let mut prev = 0.0;
        for &d in &self.delays_ms {
            if !(d >= prev && d <= total) {
                return Err(Error::invalid(format!(
                    "delays must be non-decreasing within [0, {total}], got {:?}",
                    self.delays_ms
                )));
            }
            prev = d;
        }
        Ok(())
    }
}

/// Average proportion: `Σ_i (d_i / T_s) / (|x| · |y|)`.
pub fn average_proportion(rec: &LatencyRecord) -> Result<f64> {
    rec.validate()?;
    let frames: f64 = rec.delays_ms.iter().map(|d| d / rec.frame_ms).sum();
    Ok(frames / (rec.source_frames as f64 * rec.delays_ms.len() as f64))
}

/// Average lagging in milliseconds, including the look-ahead offset.
///
/// `τ` is the first token emitted after the whole source was heard (or the
/// last token if none was), and the ideal delay of token `i` is
/// `(i − 1) · |x| / |y*| · T_s`.
pub fn average_lagging(rec: &LatencyRecord) -> Result<f64> {
    if rec.ref_len == 0 {
        return Err(Error::invalid("average lagging needs a non-empty reference"));
    }
    rec.validate()?;
    let total = rec.total_ms();
    let tau = rec.delays_ms.iter().position(|&d| d == total).map_or(rec.delays_ms.len(), |i| i + 1);
    let rate = rec.source_frames as f64 / rec.ref_len as f64 * rec.frame_ms;
    let lag: f64 = rec.delays_ms[..tau]
        .iter()
        .enumerate()
        .map(|(i, &d)| d - rate * i as f64)
        .sum();
    Ok(lag / tau as f64 + rec.offset_ms)
}

/// Clipped n-gram matches and totals of one sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
}

fn ngrams<'t, 'a>(toks: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu_stats(hyp: &str, reference: &str, max_n: usize) -> BleuStats {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut matches = Vec::with_capacity(max_n);
    let mut totals = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let hc = ngrams(&h, n);
        let rc = ngrams(&r, n);
        matches.push(hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum());
        totals.push(h.len().saturating_sub(n - 1));
    }
    BleuStats { hyp_len: h.len(), ref_len: r.len(), matches, totals }
}

/// BLEU in `[0, 100]` from summed sentence statistics.
pub fn bleu_from_stats(stats: &[BleuStats], max_n: usize) -> f64 {
    let mut m = vec![0usize; max_n];
    let mut t = vec![0usize; max_n];
    let (mut hl, mut rl) = (0usize, 0usize);
    for s in stats {
        hl += s.hyp_len;
        rl += s.ref_len;
        for n in 0..max_n {
            m[n] += s.matches[n];
            t[n] += s.totals[n];
        }
    }
    if hl == 0 || m.iter().zip(&t).any(|(&mi, &ti)| mi == 0 || ti == 0) {
        return 0.0;
    }
    let log_p: f64 = m.iter().zip(&t).map(|(&mi, &ti)| (mi as f64 / ti as f64).ln()).sum::<f64>() / max_n as f64;
    let bp = if hl >= rl { 0.0 } else { 1.0 - rl as f64 / hl as f64 };
    100.0 * (log_p + bp).exp()
}

/// Corpus-level BLEU over whitespace tokens, case-sensitive.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() || max_n == 0 {
        return Err(Error::Empty("BLEU over an empty corpus"));
    }
    let stats: Vec<BleuStats> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| bleu_stats(h.as_ref(), r.as_ref(), max_n))
        .collect();
    Ok(bleu_from_stats(&stats, max_n))
}

/// Action recorded by the streaming engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceAction {
    Read(usize),
    Write(Vec<usize>),
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Audio heard when the action was taken.
    pub ms: f64,
    pub action: TraceAction,
}

/// Action trace of one utterance plus the header needed to score it.
///
/// On disk: `#key\tvalue` header lines, then one `ms\tACTION\tpayload`
/// line per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub utt: String,
    pub source_frames: usize,
    pub frame_ms: f64,
    pub offset_ms: f64,
    pub reference: Vec<usize>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn hypothesis(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match &e.action {
                TraceAction::Write(t) => Some(t.clone()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn latency(&self) -> LatencyRecord {
        let delays_ms = self
            .events
            .iter()
            .flat_map(|e| match &e.action {
                TraceAction::Write(t) => vec![e.ms; t.len()],
                _ => Vec::new(),
            })
            .collect();
        LatencyRecord {
            delays_ms,
            source_frames: self.source_frames,
            frame_ms: self.frame_ms,
            ref_len: self.reference.len(),
            offset_ms: self.offset_ms,
        }
    }

    pub fn to_tsv(&self) -> String {
        let ids = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "#utt\t{}", self.utt);
        let _ = writeln!(s, "#source_frames\t{}", self.source_frames);
        let _ = writeln!(s, "#frame_ms\t{}", self.frame_ms);
        let _ = writeln!(s, "#offset_ms\t{}", self.offset_ms);
        let _ = writeln!(s, "#ref_len\t{}", self.reference.len());
        let _ = writeln!(s, "#reference\t{}", ids(&self.reference));
        for e in &self.events {
            let (name, payload) = match &e.action {
                TraceAction::Read(i) => ("READ", i.to_string()),
                TraceAction::Write(t) => ("WRITE", ids(t)),
                TraceAction::Finish => ("FINISH", String::new()),
            };
            let _ = writeln!(s, "{}\t{name}\t{payload}", e.ms);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let num = |line: usize, v: &str| -> Result<f64> {
            v.trim().parse::<f64>().map_err(|_| err(line, format!("not a number: {v:?}")))
        };
        let ids = |line: usize, v: &str| -> Result<Vec<usize>> {
            v.split_whitespace()
                .map(|t| t.parse().map_err(|_| err(line, format!("bad token id {t:?}"))))
                .collect()
        };
        let mut utt = None;
        let (mut frames, mut frame_ms, mut offset, mut reference, mut ref_len) = (None, None, None, None, None);
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.splitn(3, '\t').collect();
            if let Some(key) = cols[0].strip_prefix('#') {
                let val = cols.get(1).copied().unwrap_or("");
                match key {
                    "utt" => utt = Some(val.to_string()),
                    "source_frames" => frames = Some(num(ln, val)? as usize),
                    "frame_ms" => frame_ms = Some(num(ln, val)?),
                    "offset_ms" => offset = Some(num(ln, val)?),
                    "ref_len" => ref_len = Some(num(ln, val)? as usize),
                    "reference" => reference = Some(ids(ln, val)?),
                    _ => {}
                }
                continue;
            }
            if cols.len() < 2 {
                return Err(err(ln, "expected ms<TAB>ACTION<TAB>payload".into()));
            }
            let ms = num(ln, cols[0])?;
            let payload = cols.get(2).copied().unwrap_or("");
            let action = match cols[1] {
                "READ" => TraceAction::Read(num(ln, payload)? as usize),
                "WRITE" => TraceAction::Write(ids(ln, payload)?),
                "FINISH" => TraceAction::Finish,
                other => return Err(err(ln, format!("unknown action {other:?}"))),
            };
            events.push(TraceEvent { ms, action });
        }
        let missing = |k: &str| err(0, format!("missing #{k} header"));
        let reference = reference.ok_or_else(|| missing("reference"))?;
        if let Some(n) = ref_len {
            if n != reference.len() {
                return Err(err(0, format!("#ref_len {n} disagrees with {} reference ids", reference.len())));
            }
        }
        Ok(Self {
            utt: utt.ok_or_else(|| missing("utt"))?,
            source_frames: frames.ok_or_else(|| missing("source_frames"))?,
            frame_ms: frame_ms.ok_or_else(|| missing("frame_ms"))?,
            offset_ms: offset.ok_or_else(|| missing("offset_ms"))?,
            reference,
            events,
        })
    }
}

/// Per-utterance metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub utt: String,
    pub bleu: BleuStats,
    pub ap: f64,
    pub al: f64,
}

pub fn score_trace(trace: &Trace) -> Result<ScoreRow> {
    let words = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let rec = trace.latency();
    Ok(ScoreRow {
        utt: trace.utt.clone(),
        bleu: bleu_stats(&words(&trace.hypothesis()), &words(&trace.reference), 4),
        ap: average_proportion(&rec)?,
        al: average_lagging(&rec)?,
    })
}

/// Tab-separated report: one row per utterance, then a corpus summary line.
pub fn report_tsv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("utt\thyp_len\tref_len\tmatch1\tmatch2\tmatch3\tmatch4\ttotal1\ttotal2\ttotal3\ttotal4\tAP\tAL\n");
    for r in rows {
        let j = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join("\t");
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.3}",
            r.utt,
            r.bleu.hyp_len,
            r.bleu.ref_len,
            j(&r.bleu.matches),
            j(&r.bleu.totals),
            r.ap,
            r.al
        );
    }
    if !rows.is_empty() {
        let stats: Vec<BleuStats> = rows.iter().map(|r| r.bleu.clone()).collect();
        let n = rows.len() as f64;
        let _ = writeln!(
            s,
            "#corpus\tBLEU={:.4}\tAP={:.6}\tAL={:.3}",
            bleu_from_stats(&stats, 4),
            rows.iter().map(|r| r.ap).sum::<f64>() / n,
            rows.iter().map(|r| r.al).sum::<f64>() / n
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(delays: Vec<f64>, frames: usize, ref_len: usize, offset: f64) -> LatencyRecord {
        LatencyRecord { delays_ms: delays, source_frames: frames, frame_ms: 80.0, ref_len, offset_ms: offset }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_proportion(&rec(vec![800.0; 3], 10, 3, 0.0)).unwrap(), 1.0);
        let r = rec(vec![200.0, 400.0, 600.0, 800.0], 10, 4, 0.0);
        assert_eq!(average_proportion(&r).unwrap(), 0.625);
        assert_eq!(average_proportion(&rec(vec![400.0], 10, 1, 0.0)).unwrap(), 0.5);
        assert!(average_proportion(&rec(vec![], 10, 1, 0.0)).is_err());
    }

    #[test]
    fn al_examples() {
        let r = rec(vec![160.0, 320.0, 480.0, 640.0, 800.0], 10, 5, 140.0);
        assert_eq!(average_lagging(&r).unwrap(), 300.0);
        let sync = rec((0..5).map(|i| i as f64 * 160.0).collect(), 10, 5, 140.0);
        assert_eq!(average_lagging(&sync).unwrap(), 140.0);
        assert_eq!(average_lagging(&rec(vec![800.0], 10, 1, 140.0)).unwrap(), 940.0);
        assert!(average_lagging(&rec(vec![800.0], 10, 0, 140.0)).is_err());
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(corpus_bleu(&["a b c d"], &["a b c d"], 4).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&["x y z w"], &["a b c d"], 4).unwrap(), 0.0);
        let b = corpus_bleu(&["a b c d"], &["a b c d e"], 4).unwrap();
        assert!((b - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!((b - 77.88).abs() < 0.01);
        assert!(corpus_bleu(&["a"], &["a", "b"], 4).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let t = Trace {
            utt: "u1".into(),
            source_frames: 10,
            frame_ms: 80.0,
            offset_ms: 140.0,
            reference: vec![3, 4, 5, 6, 7],
            events: vec![
                TraceEvent { ms: 160.0, action: TraceAction::Read(0) },
                TraceEvent { ms: 160.0, action: TraceAction::Write(vec![3]) },
                TraceEvent { ms: 320.0, action: TraceAction::Write(vec![4]) },
                TraceEvent { ms: 480.0, action: TraceAction::Write(vec![5]) },
                TraceEvent { ms: 640.0, action: TraceAction::Write(vec![6]) },
                TraceEvent { ms: 800.0, action: TraceAction::Write(vec![7]) },
                TraceEvent { ms: 800.0, action: TraceAction::Finish },
            ],
        };
        let back = Trace::parse(&t.to_tsv(), Path::new("t")).unwrap();
        assert_eq!(back, t);
        let row = score_trace(&back).unwrap();
        assert_eq!(row.al, 300.0);
        assert!(Trace::parse("#utt\tx\n10\tJUMP\t\n", Path::new("bad")).is_err());
    }
}
