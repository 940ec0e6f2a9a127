//! Two-stage training, checkpoints, checkpoint averaging and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{self, ShrinkQuality};
use crate::data::{make_batches, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{bleu_from_stats, score_trace, ScoreRow, Trace};
use crate::model::{Model, ModelConfig, Objective};
use crate::numerics::{adam_step, OptimizerState, ParamStore, Tensor};
use crate::simul::{simulate, PolicyConfig};

/// Optimisation settings shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: u64,
    /// Padded frame budget per batch.
    pub max_batch_frames: usize,
    pub seed: u64,
    /// Percentage of utterances held out for validation.
    pub valid_percent: u32,
    /// Directory receiving one checkpoint per epoch.
    pub save_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 2e-3, warmup: 100, max_batch_frames: 2500, seed: 1, valid_percent: 5, save_dir: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.warmup == 0 || self.max_batch_frames == 0 || self.valid_percent >= 100 {
            return Err(Error::Config(format!(
                "need lr > 0, warmup >= 1, max_batch_frames >= 1 and valid_percent < 100, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Pretrain,
    Finetune,
}

impl TrainStage {
    pub fn objective(self) -> Objective {
        match self {
            Self::Pretrain => Objective::Ctc,
            Self::Finetune => Objective::Joint,
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub stage: TrainStage,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

const MAGIC: &[u8; 8] = b"SSTCKPT1";

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    config: ModelConfig,
    stage: TrainStage,
    epoch: usize,
    rng: RngHeader,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    base_lr: f64,
    warmup: u64,
    tensors: Vec<TensorHeader>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok()).collect()
}

impl Checkpoint {
    /// Fresh model and optimizer for `stage`.
    pub fn init(cfg: ModelConfig, tcfg: &TrainConfig, stage: TrainStage) -> Result<Self> {
        tcfg.validate()?;
        let model = Model::new(cfg, tcfg.seed)?;
        let optimizer = OptimizerState::new(&model.params, tcfg.lr, tcfg.warmup);
        Ok(Self { model, optimizer, stage, epoch: 0, rng: ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7261_696e) })
    }

    pub fn fingerprint(&self) -> String {
        self.model.cfg.fingerprint()
    }

    /// Little-endian tensor container behind a JSON header: magic, header
    /// length (u64), header, then per tensor its values and both Adam
    /// moments as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self
            .model
            .params
            .iter()
            .map(|(_, name, t)| TensorHeader { name: name.to_string(), shape: t.shape().to_vec() })
            .collect();
        let o = &self.optimizer;
        let header = Header {
            fingerprint: self.fingerprint(),
            config: self.model.cfg.clone(),
            stage: self.stage,
            epoch: self.epoch,
            rng: RngHeader {
                seed: hex(&self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            base_lr: o.base_lr,
            warmup: o.warmup,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serialises");
        let mut out = Vec::with_capacity(json.len() + 16 + 12 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (i, (_, _, t)) in self.model.params.iter().enumerate() {
            for v in t.data().iter().chain(&o.first_moment[i]).chain(&o.second_moment[i]) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format { path: path.to_path_buf(), offset: offset as u64, msg };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt(0, "not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt(8, "header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| fmt(16, format!("bad header: {e}")))?;
        if header.fingerprint != header.config.fingerprint() {
            return Err(Error::Fingerprint { expected: header.config.fingerprint(), found: header.fingerprint });
        }
        let mut pos = body;
        let mut read = |n: usize| -> Result<Vec<f32>> {
            let end = pos + 4 * n;
            if end > bytes.len() {
                return Err(fmt(pos, format!("truncated tensor data: need {n} floats")));
            }
            let v = bytes[pos..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            pos = end;
            Ok(v)
        };
        let mut store = ParamStore::new();
        let (mut m1, mut m2) = (Vec::new(), Vec::new());
        for t in &header.tensors {
            let n = t.shape.iter().product();
            store.add(t.name.clone(), Tensor::new(t.shape.clone(), read(n)?)?);
            m1.push(read(n)?);
            m2.push(read(n)?);
        }
        if pos != bytes.len() {
            return Err(fmt(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        let model = Model::with_params(header.config, &store)?;
        let seed: [u8; 32] = unhex(&header.rng.seed)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| fmt(16, "bad rng seed".into()))?;
        let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| fmt(16, "bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(word_pos);
        let optimizer = OptimizerState {
            first_moment: m1,
            second_moment: m2,
            step: header.step,
            beta1: header.beta1,
            beta2: header.beta2,
            eps: header.eps,
            base_lr: header.base_lr,
            warmup: header.warmup,
        };
        Ok(Self { model, optimizer, stage: header.stage, epoch: header.epoch, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Averages of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub stage: TrainStage,
    pub epoch: usize,
    pub steps: u64,
    pub skipped: usize,
    pub loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_l_st: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Header of the per-step training log.
pub const LOG_HEADER: &str = "step\tlr\tL_ST\tL_CTC\tblank_fraction";

/// Utterances whose transcript the CTC head could align, given the
/// objective. The others are dropped with a warning.
fn trainable_subset(model: &Model, utts: &[Utterance], objective: Objective) -> (Vec<Utterance>, usize) {
    let cfg = &model.cfg;
    let needs_ctc = objective == Objective::Ctc || cfg.alpha > 0.0;
    let mut keep = Vec::with_capacity(utts.len());
    let mut skipped = 0;
    for u in utts {
        let ok = u.features.frames() >= cfg.downsample()
            && (!needs_ctc || ctc::required_frames(&u.transcript) <= cfg.encoded_len(u.features.frames()));
        if ok {
            keep.push(u.clone());
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        warn!("skipping {skipped} utterances whose transcripts cannot be aligned");
    }
    (keep, skipped)
}

/// Mean per-utterance loss and `L_ST` over `utts` without dropout.
pub fn validation_loss(model: &Model, utts: &[Utterance], objective: Objective) -> Result<(Option<f64>, Option<f64>)> {
    let (mut total, mut st, mut n) = (0.0, 0.0, 0usize);
    for u in utts {
        if let Some(s) = model.evaluate_loss(u, objective)? {
            total += s.total;
            st += s.l_st.unwrap_or(0.0);
            n += 1;
        }
    }
    if n == 0 {
        return Ok((None, None));
    }
    let st = (objective == Objective::Joint).then(|| st / n as f64);
    Ok((Some(total / n as f64), st))
}

/// Continues `ckpt` in its own stage for `epochs` epochs over `train`,
/// appending one row per optimizer step to `log`.
pub fn train_epochs(
    ckpt: &mut Checkpoint,
    train: &[Utterance],
    valid: &[Utterance],
    tcfg: &TrainConfig,
    epochs: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochSummary>> {
    tcfg.validate()?;
    let objective = ckpt.stage.objective();
    ckpt.model.set_objective(objective);
    let (utts, skipped) = trainable_subset(&ckpt.model, train, objective);
    if utts.is_empty() {
        return Err(Error::Empty("no trainable utterances"));
    }
    let batches = make_batches(&utts, tcfg.max_batch_frames)?;
    let mut out = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut order = batches.clone();
        order.shuffle(&mut ckpt.rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        let steps_before = ckpt.optimizer.step;
        for batch in &order {
            ckpt.model.params.zero_grads();
            let weight = 1.0 / batch.len() as f32;
            let (mut l_st, mut l_ctc, mut blank, mut frames) = (0.0, 0.0, 0usize, 0usize);
            let (mut n_st, mut n_ctc) = (0usize, 0usize);
            for &i in batch {
                let stats = ckpt
                    .model
                    .accumulate(&utts[i], objective, weight, Some(&mut ckpt.rng))?
                    .ok_or_else(|| Error::invalid(format!("utterance {} became infeasible", utts[i].id)))?;
                loss_sum += stats.total;
                count += 1;
                if let Some(v) = stats.l_st {
                    l_st += v;
                    n_st += 1;
                }
                if let Some(v) = stats.l_ctc {
                    l_ctc += v;
                    n_ctc += 1;
                }
                blank += stats.blank_frames;
                frames += stats.frames;
            }
            let lr = ckpt.optimizer.scheduled_lr();
            adam_step(&mut ckpt.model.params, &mut ckpt.optimizer, lr)?;
            if let Some(w) = log.as_deref_mut() {
                let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
                writeln!(
                    w,
                    "{}\t{lr:.6e}\t{}\t{}\t{:.6}",
                    ckpt.optimizer.step,
                    fmt_opt(avg(l_st, n_st)),
                    fmt_opt(avg(l_ctc, n_ctc)),
                    blank as f64 / frames.max(1) as f64
                )
                .map_err(|e| Error::io("training log", e))?;
            }
        }
        ckpt.epoch += 1;
        let (valid_loss, valid_l_st) = validation_loss(&ckpt.model, valid, objective)?;
        let summary = EpochSummary {
            stage: ckpt.stage,
            epoch: ckpt.epoch,
            steps: ckpt.optimizer.step - steps_before,
            skipped,
            loss: loss_sum / count.max(1) as f64,
            valid_loss,
            valid_l_st,
        };
        info!(
            "{:?} epoch {}: loss {:.4}, valid {}",
            summary.stage,
            summary.epoch,
            summary.loss,
            fmt_opt(summary.valid_loss)
        );
        if let Some(dir) = &tcfg.save_dir {
            ckpt.save(&epoch_path(dir, ckpt.stage, ckpt.epoch))?;
        }
        out.push(summary);
    }
    Ok(out)
}

/// File name of the checkpoint saved after `epoch`.
pub fn epoch_path(dir: &Path, stage: TrainStage, epoch: usize) -> PathBuf {
    let stage = match stage {
        TrainStage::Pretrain => "pretrain",
        TrainStage::Finetune => "finetune",
    };
    dir.join(format!("{stage}_epoch{epoch:03}.ckpt"))
}

/// CTC-only pre-training of the acoustic encoder from a fresh model.
pub fn pretrain_ctc(
    train: &[Utterance],
    valid: &[Utterance],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    epochs: usize,
    log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::init(cfg.clone(), tcfg, TrainStage::Pretrain)?;
    if epochs > 0 {
        train_epochs(&mut ckpt, train, valid, tcfg, epochs, log)?;
    }
    Ok(ckpt)
}

/// Starts joint fine-tuning from `start` with the loss and policy settings
/// of `cfg`, whose architecture must match. A fine-tuning checkpoint is
/// resumed as is; any other starts a fresh optimizer.
pub fn finetune(
    train: &[Utterance],
    valid: &[Utterance],
    start: &Checkpoint,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    epochs: usize,
    log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    if start.fingerprint() != cfg.fingerprint() {
        return Err(Error::Fingerprint { expected: cfg.fingerprint(), found: start.fingerprint() });
    }
    cfg.validate()?;
    let mut ckpt = start.clone();
    ckpt.model.cfg = cfg.clone();
    if ckpt.stage != TrainStage::Finetune {
        ckpt.stage = TrainStage::Finetune;
        ckpt.epoch = 0;
        ckpt.optimizer = OptimizerState::new(&ckpt.model.params, tcfg.lr, tcfg.warmup);
        ckpt.rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x6674_756e);
    }
    train_epochs(&mut ckpt, train, valid, tcfg, epochs, log)?;
    Ok(ckpt)
}

/// Mean of every parameter over the last `m` of `paths`; optimizer, RNG
/// and counters come from the last checkpoint.
pub fn average_checkpoints(paths: &[PathBuf], m: usize) -> Result<Checkpoint> {
    if m == 0 || m > paths.len() {
        return Err(Error::invalid(format!("cannot average {m} of {} checkpoints", paths.len())));
    }
    let ckpts = paths[paths.len() - m..].iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    average(&ckpts)
}

/// In-memory form of [`average_checkpoints`].
pub fn average(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let last = ckpts.last().ok_or(Error::Empty("checkpoint list"))?;
    let fp = last.fingerprint();
    let mut sums: Vec<Vec<f64>> = last.model.params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
    for c in ckpts {
        if c.fingerprint() != fp {
            return Err(Error::Fingerprint { expected: fp, found: c.fingerprint() });
        }
        for (i, (_, name, t)) in c.model.params.iter().enumerate() {
            if sums[i].len() != t.len() || last.model.params.name(crate::numerics::ParamId(i)) != name {
                return Err(Error::Shape { op: "average_checkpoints", lhs: t.shape().to_vec(), rhs: vec![sums[i].len()] });
            }
            for (s, &v) in sums[i].iter_mut().zip(t.data()) {
                *s += v as f64;
            }
        }
    }
    let mut out = last.clone();
    let m = ckpts.len() as f64;
    for (t, s) in out.model.params.tensors_mut().zip(&sums) {
        for (v, &x) in t.data_mut().iter_mut().zip(s) {
            *v = (x / m) as f32;
        }
    }
    Ok(out)
}

/// Greedy CTC segments against transcript lengths over `utts`.
pub fn shrink_quality_of(model: &Model, utts: &[Utterance]) -> Result<(ShrinkQuality, f64)> {
    let mut pairs = Vec::with_capacity(utts.len());
    let (mut blank, mut frames) = (0usize, 0usize);
    for u in utts {
        let (_, grid) = model.acoustic_encode(&u.features)?;
        let path = ctc::greedy_path(&grid);
        blank += path.iter().filter(|&&l| l == grid.blank()).count();
        frames += path.len();
        pairs.push((ctc::detect_boundaries(&path, grid.blank())?.len(), u.transcript.len()));
    }
    Ok((ctc::shrink_quality(&pairs)?, blank as f64 / frames.max(1) as f64))
}

/// Corpus-level results of streaming evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: PolicyConfig,
    pub bleu: f64,
    pub ap: f64,
    pub al: f64,
    /// Teacher-forced target-token accuracy under the policy's mask.
    pub token_accuracy: f64,
    /// Position-wise agreement of decoded hypotheses with references.
    pub decoded_accuracy: f64,
    pub blank_fraction: f64,
    pub shrink_quality: ShrinkQuality,
    pub rows: Vec<ScoreRow>,
    #[serde(skip)]
    pub traces: Vec<Trace>,
}

impl EvalReport {
    pub fn summary_tsv(&self) -> String {
        let k = if self.policy.k == crate::model::WAIT_ALL { "inf".to_string() } else { self.policy.k.to_string() };
        format!(
            "k\tn\tbeam\tBLEU\tAP\tAL\ttoken_acc\tdecoded_acc\tblank_fraction\tdiff_le2\tdiff_le4\tdiff_le6\n{k}\t{}\t{}\t{:.4}\t{:.6}\t{:.3}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{:.2}\t{:.2}\n",
            self.policy.n,
            self.policy.beam,
            self.bleu,
            self.ap,
            self.al,
            self.token_accuracy,
            self.decoded_accuracy,
            self.blank_fraction,
            self.shrink_quality.within_2,
            self.shrink_quality.within_4,
            self.shrink_quality.within_6
        )
    }
}

/// Runs the streaming engine over every utterance, feeding `chunk` frames
/// at a time, and aggregates BLEU, AP, AL and shrink quality.
pub fn evaluate(model: &Model, utts: &[Utterance], policy: PolicyConfig, chunk: usize) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let mut scoring = model.clone();
    scoring.cfg.k = policy.k;
    scoring.cfg.n = policy.n;
    let mut rows = Vec::with_capacity(utts.len());
    let mut traces = Vec::with_capacity(utts.len());
    let (mut tokens, mut correct) = (0usize, 0usize);
    let (mut positions, mut agree) = (0usize, 0usize);
    for u in utts {
        let (session, hyp, _) = simulate(model, policy, &u.features, chunk, u.translation.len())?;
        let trace = session.trace(&u.id, &u.translation);
        positions += hyp.len().max(u.translation.len());
        agree += hyp.iter().zip(&u.translation).filter(|(a, b)| a == b).count();
        rows.push(if hyp.is_empty() { empty_row(&trace) } else { score_trace(&trace)? });
        traces.push(trace);
        if let Some(s) = scoring.evaluate_loss(u, Objective::Joint)? {
            tokens += s.tokens;
            correct += s.correct;
        }
    }
    let (shrink_quality, blank_fraction) = shrink_quality_of(model, utts)?;
    let stats: Vec<_> = rows.iter().map(|r| r.bleu.clone()).collect();
    let n = rows.len() as f64;
    Ok(EvalReport {
        policy,
        bleu: bleu_from_stats(&stats, 4),
        ap: rows.iter().map(|r| r.ap).sum::<f64>() / n,
        al: rows.iter().map(|r| r.al).sum::<f64>() / n,
        token_accuracy: correct as f64 / tokens.max(1) as f64,
        decoded_accuracy: agree as f64 / positions.max(1) as f64,
        blank_fraction,
        shrink_quality,
        rows,
        traces,
    })
}

/// Row for a hypothesis that ended before any token: no BLEU matches and
/// the latency of waiting for the whole source.
fn empty_row(trace: &Trace) -> ScoreRow {
    let words: Vec<String> = trace.reference.iter().map(usize::to_string).collect();
    let mut row_bleu = crate::metrics::bleu_stats("", &words.join(" "), 4);
    row_bleu.ref_len = trace.reference.len();
    ScoreRow {
        utt: trace.utt.clone(),
        bleu: row_bleu,
        ap: 1.0,
        al: trace.source_frames as f64 * trace.frame_ms + trace.offset_ms,
    }
}
