//! Flat `key = value` run configuration with a fixed schema.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticTaskConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WAIT_ALL};
use crate::simul::PolicyConfig;
use crate::train::TrainConfig;

/// Every setting of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synthetic: SyntheticTaskConfig,
    /// Utterances written by `gen-data`.
    pub size: usize,
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Run CTC pre-training before fine-tuning.
    pub ctc_pretrain: bool,
    /// Checkpoints averaged into the final model.
    pub average_last: usize,
    pub beam: usize,
    /// Feature frames per push when simulating a stream.
    pub chunk_frames: usize,
    /// Policies to evaluate; empty means the training `k`/`n`.
    pub eval_k: Vec<usize>,
    pub eval_n: Vec<usize>,
    /// Permit evaluating with `k`/`n` other than those trained with.
    pub allow_policy_override: bool,
    /// Per-utterance mean/variance normalisation of loaded features.
    pub cmvn: bool,
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            synthetic: SyntheticTaskConfig::default(),
            size: 2000,
            train: TrainConfig::default(),
            pretrain_epochs: 2,
            finetune_epochs: 8,
            ctc_pretrain: true,
            average_last: 2,
            beam: PolicyConfig::default().beam,
            chunk_frames: 16,
            eval_k: Vec::new(),
            eval_n: Vec::new(),
            allow_policy_override: false,
            cmvn: false,
            data_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
        }
    }
}

trait Kind<T> {
    fn parse(key: &str, v: &str) -> Result<T>;
    fn show(v: &T) -> String;
}

fn bad(key: &str, v: &str, want: &str) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v:?}"))
}

struct Plain;
impl<T: FromStr + ToString> Kind<T> for Plain {
    fn parse(key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>()))
    }
    fn show(v: &T) -> String {
        v.to_string()
    }
}

/// `k`: a positive count or `inf`.
struct Wait;
fn parse_wait(key: &str, v: &str) -> Result<usize> {
    if v.eq_ignore_ascii_case("inf") {
        return Ok(WAIT_ALL);
    }
    v.parse().map_err(|_| bad(key, v, "a count or inf"))
}
fn show_wait(v: usize) -> String {
    if v == WAIT_ALL {
        "inf".into()
    } else {
        v.to_string()
    }
}
impl Kind<usize> for Wait {
    fn parse(key: &str, v: &str) -> Result<usize> {
        parse_wait(key, v)
    }
    fn show(v: &usize) -> String {
        show_wait(*v)
    }
}

/// Comma-separated counts; `inf` allowed.
struct List;
impl Kind<Vec<usize>> for List {
    fn parse(key: &str, v: &str) -> Result<Vec<usize>> {
        v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_wait(key, s)).collect()
    }
    fn show(v: &Vec<usize>) -> String {
        v.iter().map(|&x| show_wait(x)).collect::<Vec<_>>().join(",")
    }
}

struct Dir;
impl Kind<PathBuf> for Dir {
    fn parse(_: &str, v: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(v))
    }
    fn show(v: &PathBuf) -> String {
        v.display().to_string()
    }
}

struct OptDir;
impl Kind<Option<PathBuf>> for OptDir {
    fn parse(_: &str, v: &str) -> Result<Option<PathBuf>> {
        Ok((!v.is_empty() && v != "-").then(|| PathBuf::from(v)))
    }
    fn show(v: &Option<PathBuf>) -> String {
        v.as_ref().map_or_else(|| "-".into(), |p| p.display().to_string())
    }
}

struct Key {
    name: &'static str,
    help: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<()>,
}

macro_rules! keys {
    ($( $name:literal => $($path:tt).+ : $kind:ident, $help:literal; )*) => {
        vec![$(Key {
            name: $name,
            help: $help,
            get: |c| <$kind as Kind<_>>::show(&c.$($path).+),
            set: |c, v| {
                c.$($path).+ = <$kind as Kind<_>>::parse($name, v)?;
                Ok(())
            },
        }),*]
    };
}

fn schema() -> Vec<Key> {
    keys! {
        "d_feat" => model.d_feat: Plain, "feature dimension (taken from the data when training)";
        "n_blocks" => model.n_blocks: Plain, "acoustic encoder blocks; each halves the frame rate";
        "convs_per_block" => model.convs_per_block: Plain, "convolutions per block";
        "conv_width" => model.conv_width: Plain, "convolution kernel width";
        "conv_lookahead" => model.conv_lookahead: List, "look-ahead frames of each conv in a block";
        "transformer_layers_per_block" => model.transformer_layers_per_block: Plain, "Transformer layers per block";
        "d_model" => model.d_model: Plain, "model width";
        "n_heads" => model.n_heads: Plain, "attention heads";
        "d_ff" => model.d_ff: Plain, "feed-forward width";
        "semantic_layers" => model.semantic_layers: Plain, "semantic encoder layers";
        "decoder_layers" => model.decoder_layers: Plain, "decoder layers";
        "src_vocab" => model.src_vocab: Plain, "source vocabulary size (taken from the data when training)";
        "tgt_vocab" => model.tgt_vocab: Plain, "target vocabulary size (taken from the data when training)";
        "mu" => model.mu: Plain, "shrinking temperature";
        "lambda" => model.lambda: Plain, "blank penalty weight";
        "alpha" => model.alpha: Plain, "CTC loss weight during fine-tuning";
        "k" => model.k: Wait, "segments read before the first write (inf = full sentence)";
        "n" => model.n: Plain, "tokens per write stride";
        "unidirectional" => model.unidirectional: Plain, "causal encoders";
        "gradual_downsampling" => model.gradual_downsampling: Plain, "downsample inside each block instead of up front";
        "use_shrink" => model.use_shrink: Plain, "shrink CTC segments before the semantic encoder";
        "shrink_mode" => model.shrink_mode: Plain, "weighted | average | argmax_frame | drop_blank";
        "blank_penalty_mode" => model.blank_penalty_mode: Plain, "argmax_blank_frames | all_frames";
        "dropout" => model.dropout: Plain, "dropout rate";
        "vocab_size" => synthetic.vocab_size: Plain, "synthetic vocabulary size";
        "frames_per_token_min" => synthetic.frames_per_token.0: Plain, "shortest synthetic token, before repetition";
        "frames_per_token_max" => synthetic.frames_per_token.1: Plain, "longest synthetic token, before repetition";
        "frame_repeat" => synthetic.frame_repeat: Plain, "feature frames per synthetic token frame";
        "feat_dim" => synthetic.feat_dim: Plain, "synthetic feature dimension";
        "noise" => synthetic.noise: Plain, "synthetic feature noise";
        "reorder_window" => synthetic.reorder_window: Plain, "synthetic reordering window";
        "min_len" => synthetic.min_len: Plain, "shortest synthetic sentence";
        "max_len" => synthetic.max_len: Plain, "longest synthetic sentence";
        "data_seed" => synthetic.seed: Plain, "synthetic task seed";
        "size" => size: Plain, "utterances generated by gen-data";
        "lr" => train.lr: Plain, "peak learning rate";
        "warmup" => train.warmup: Plain, "warm-up steps";
        "max_batch_frames" => train.max_batch_frames: Plain, "padded feature frames per batch";
        "seed" => train.seed: Plain, "initialisation and shuffling seed";
        "valid_percent" => train.valid_percent: Plain, "held-out percentage (by id hash)";
        "save_dir" => train.save_dir: OptDir, "per-epoch checkpoint directory (- = work_dir)";
        "pretrain_epochs" => pretrain_epochs: Plain, "CTC pre-training epochs";
        "finetune_epochs" => finetune_epochs: Plain, "joint fine-tuning epochs";
        "ctc_pretrain" => ctc_pretrain: Plain, "start fine-tuning from the pre-trained encoder";
        "average_last" => average_last: Plain, "final checkpoints averaged";
        "beam" => beam: Plain, "beam width inside a stride";
        "chunk_frames" => chunk_frames: Plain, "feature frames per push when streaming";
        "eval_k" => eval_k: List, "k values to evaluate (empty = training k)";
        "eval_n" => eval_n: List, "n values to evaluate (empty = training n)";
        "allow_policy_override" => allow_policy_override: Plain, "allow evaluating with k/n other than training";
        "cmvn" => cmvn: Plain, "normalise each utterance's features when loading";
        "data_dir" => data_dir: Dir, "corpus directory (manifest.tsv, src.vocab, tgt.vocab)";
        "work_dir" => work_dir: Dir, "checkpoints, logs and reports";
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let k = schema()
            .into_iter()
            .find(|k| k.name == key)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        (k.set)(self, value.trim())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        schema().into_iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses a config file: `key = value` lines, `#` comments.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            c.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in schema() {
            let _ = writeln!(s, "{} = {}", k.name, (k.get)(self));
        }
        s
    }

    /// Key reference for `--help`: name, default and description.
    pub fn key_help() -> String {
        let d = Self::default();
        let keys = schema();
        let w = keys.iter().map(|k| k.name.len()).max().unwrap_or(0);
        let mut s = String::from("Config keys (key = default):\n");
        for k in keys {
            let _ = writeln!(s, "  {:w$} = {:<10} {}", k.name, (k.get)(&d), k.help);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synthetic.validate()?;
        self.train.validate()?;
        self.policy().validate()?;
        if self.average_last == 0 || self.chunk_frames == 0 {
            return Err(Error::Config("average_last and chunk_frames must be positive".into()));
        }
        Ok(())
    }

    /// Decoding policy with the training `k`/`n`.
    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig { k: self.model.k, n: self.model.n, beam: self.beam }
    }

    /// Policies to evaluate. Values differing from the training ones need
    /// `allow_policy_override`.
    pub fn eval_policies(&self) -> Result<Vec<PolicyConfig>> {
        let ks = if self.eval_k.is_empty() { vec![self.model.k] } else { self.eval_k.clone() };
        let ns = if self.eval_n.is_empty() { vec![self.model.n] } else { self.eval_n.clone() };
        let mut out = Vec::new();
        for &k in &ks {
            for &n in &ns {
                if (k != self.model.k || n != self.model.n) && !self.allow_policy_override {
                    return Err(Error::Config(format!(
                        "evaluating k={} n={} but trained with k={} n={}; set allow_policy_override=true",
                        show_wait(k),
                        n,
                        show_wait(self.model.k),
                        self.model.n
                    )));
                }
                out.push(PolicyConfig { k, n, beam: self.beam });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shrink::ShrinkMode;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_inf() {
        let mut c = RunConfig::parse("k = inf\n# comment\nlambda=0 # trailing\n", Path::new("x")).unwrap();
        assert_eq!(c.model.k, WAIT_ALL);
        assert_eq!(c.model.lambda, 0.0);
        c.apply_override("eval_k=1,3,inf").unwrap();
        assert_eq!(c.eval_k, vec![1, 3, WAIT_ALL]);
        c.apply_override("shrink_mode=drop_blank").unwrap();
        assert_eq!(c.model.shrink_mode, ShrinkMode::DropBlank);
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("k=-1").is_err());
        assert!(RunConfig::parse("bogus = 1", Path::new("x")).is_err());
    }

    #[test]
    fn policy_override_is_explicit() {
        let mut c = RunConfig::default();
        assert_eq!(c.eval_policies().unwrap().len(), 1);
        c.eval_k = vec![1, 5];
        assert!(c.eval_policies().is_err());
        c.allow_policy_override = true;
        assert_eq!(c.eval_policies().unwrap().len(), 2);
    }

    #[test]
    fn help_lists_defaults() {
        let h = RunConfig::key_help();
        for line in ["lambda", "mu", "alpha", "beam", "dropout"] {
            assert!(h.lines().any(|l| l.trim_start().starts_with(line)), "{line}");
        }
        assert_eq!(RunConfig::default().get("lambda").unwrap(), "0.5");
        assert_eq!(RunConfig::default().get("beam").unwrap(), "5");
        assert_eq!(RunConfig::default().get("dropout").unwrap(), "0.1");
    }
}
