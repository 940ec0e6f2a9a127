use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::corpus::{write_manifest, Corpus, ManifestEntry, Utterance};
use super::features::{write_features, FeatureSequence};
use super::vocab::{Vocab, RESERVED};
use crate::error::{Error, Result};

/// Parameters of the synthetic speech-translation task.
///
/// Every source token is rendered as a run of noisy copies of its embedding.
/// A run lasts between `frames_per_token.0` and `frames_per_token.1`
/// synthetic frames, each `frame_repeat` input frames long. Translations
/// relabel tokens through a fixed permutation and, when `reorder_window`
/// is at least 2, reverse each aligned window whose first token falls in
/// the swap class (even source index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    pub vocab_size: usize,
    pub frames_per_token: (usize, usize),
    pub frame_repeat: usize,
    pub feat_dim: usize,
    pub noise: f64,
    pub reorder_window: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            frames_per_token: (2, 5),
            frame_repeat: 8,
            feat_dim: 16,
            noise: 0.1,
            reorder_window: 2,
            min_len: 3,
            max_len: 8,
            seed: 1,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.frames_per_token;
        let bad = if self.vocab_size < 2 {
            Some("vocab_size must be at least 2")
        } else if lo == 0 || lo > hi {
            Some("frames_per_token must satisfy 1 <= lo <= hi")
        } else if self.frame_repeat == 0 || self.feat_dim == 0 {
            Some("frame_repeat and feat_dim must be positive")
        } else if self.min_len == 0 || self.min_len > self.max_len {
            Some("utterance length range must satisfy 1 <= min <= max")
        } else if !(self.noise >= 0.0 && self.noise.is_finite()) {
            Some("noise must be finite and non-negative")
        } else {
            None
        };
        bad.map_or(Ok(()), |m| Err(Error::Config(m.into())))
    }
}

/// A sampled instance of the task: embeddings and translation map.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    cfg: SyntheticTaskConfig,
    embeddings: Vec<Vec<f32>>,
    relabel: Vec<usize>,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
}

impl SyntheticTask {
    pub fn new(cfg: SyntheticTaskConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embeddings = (0..cfg.vocab_size)
            .map(|_| (0..cfg.feat_dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
            .collect();
        let mut relabel: Vec<usize> = (0..cfg.vocab_size).collect();
        relabel.shuffle(&mut rng);
        let src: Vec<String> = (0..cfg.vocab_size).map(|i| format!("s{i}")).collect();
        let tgt: Vec<String> = (0..cfg.vocab_size).map(|i| format!("t{i}")).collect();
        Ok(Self {
            src_vocab: Vocab::new(&src)?,
            tgt_vocab: Vocab::new(&tgt)?,
            cfg,
            embeddings,
            relabel,
        })
    }

    pub fn config(&self) -> &SyntheticTaskConfig {
        &self.cfg
    }

    pub fn src_vocab(&self) -> &Vocab {
        &self.src_vocab
    }

    pub fn tgt_vocab(&self) -> &Vocab {
        &self.tgt_vocab
    }

    /// Clean feature vector of a source token id.
    pub fn embedding(&self, src_id: usize) -> &[f32] {
        &self.embeddings[src_id - RESERVED.len()]
    }

    /// Reference translation of a source id sequence.
    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        let off = RESERVED.len();
        let mut out: Vec<usize> = src.iter().map(|&s| self.relabel[s - off] + off).collect();
        let w = self.cfg.reorder_window;
        if w >= 2 {
            for (chunk, sc) in out.chunks_mut(w).zip(src.chunks(w)) {
                if chunk.len() == w && (sc[0] - off).is_multiple_of(2) {
                    chunk.reverse();
                }
            }
        }
        out
    }

    /// `size` utterances, deterministic in the seed.
    pub fn generate(&self, size: usize) -> Result<Corpus> {
        if size == 0 {
            return Err(Error::invalid("corpus size must be at least 1"));
        }
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
        let off = RESERVED.len();
        let mut utterances = Vec::with_capacity(size);
        for u in 0..size {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut src: Vec<usize> = Vec::with_capacity(len);
            while src.len() < len {
                let tok = rng.gen_range(0..cfg.vocab_size) + off;
                if src.last() != Some(&tok) {
                    src.push(tok);
                }
            }
            let mut data = Vec::new();
            let (lo, hi) = cfg.frames_per_token;
            for &tok in &src {
                let frames = rng.gen_range(lo * cfg.frame_repeat..=hi * cfg.frame_repeat);
                let emb = self.embedding(tok);
                for _ in 0..frames {
                    for &e in emb {
                        let n: f64 = rng.sample(StandardNormal);
                        data.push(e + (cfg.noise * n) as f32);
                    }
                }
            }
            let frames = data.len() / cfg.feat_dim;
            utterances.push(Utterance {
                id: format!("syn{u:06}"),
                features: FeatureSequence::new(frames, cfg.feat_dim, data)?,
                translation: self.translate(&src),
                transcript: src,
            });
        }
        Ok(Corpus {
            utterances,
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
        })
    }
}

/// Materialises a corpus as feature files, a manifest and two vocab files.
/// Returns the manifest path.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let rel = PathBuf::from("features").join(format!("{}.rtfx", u.id));
        write_features(&dir.join(&rel), &u.features)?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            features: rel,
            transcript: corpus.src_vocab.decode(&u.transcript),
            translation: corpus.tgt_vocab.decode(&u.translation),
        });
    }
    corpus.src_vocab.save(&dir.join("src.vocab"))?;
    corpus.tgt_vocab.save(&dir.join("tgt.vocab"))?;
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
