use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use sha2::{Digest, Sha256};

use super::features::{read_features, FeatureSequence};
use super::vocab::Vocab;
use crate::error::{Error, Result};

/// One speech-translation triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureSequence,
    pub transcript: Vec<usize>,
    pub translation: Vec<usize>,
}

impl Utterance {
    pub fn validate(&self, min_frames: usize) -> Result<()> {
        if self.features.frames() < min_frames {
            return Err(Error::invalid(format!(
                "utterance {} has {} frames, needs at least {min_frames}",
                self.id,
                self.features.frames()
            )));
        }
        if self.transcript.is_empty() || self.translation.is_empty() {
            return Err(Error::invalid(format!("utterance {} has empty text", self.id)));
        }
        Ok(())
    }
}

/// Utterances together with the vocabularies their ids refer to.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

/// Manifest line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub transcript: String,
    pub translation: String,
}

/// Parses a manifest: `id \t feature path \t transcript \t translation`.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 4 tab-separated columns, found {}", cols.len()),
            });
        }
        entries.push(ManifestEntry {
            id: cols[0].to_string(),
            features: PathBuf::from(cols[1]),
            transcript: cols[2].to_string(),
            translation: cols[3].to_string(),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}",
            e.id,
            e.features.display(),
            normalize_space(&e.transcript),
            normalize_space(&e.translation)
        );
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn normalize_space(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Loads a manifest and its feature files. Relative feature paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path, src_vocab: &Vocab, tgt_vocab: &Vocab, cmvn: bool) -> Result<Corpus> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut unknown = 0;
    let mut utterances = Vec::new();
    for e in parse_manifest(path)? {
        let fpath = if e.features.is_absolute() { e.features.clone() } else { base.join(&e.features) };
        let mut features = read_features(&fpath)?;
        if cmvn {
            features.cmvn();
        }
        let (transcript, u1) = src_vocab.encode(&e.transcript);
        let (translation, u2) = tgt_vocab.encode(&e.translation);
        unknown += u1 + u2;
        utterances.push(Utterance { id: e.id, features, transcript, translation });
    }
    if unknown > 0 {
        warn!("{}: {unknown} tokens not in vocabulary, mapped to <unk>", path.display());
    }
    Ok(Corpus { utterances, src_vocab: src_vocab.clone(), tgt_vocab: tgt_vocab.clone() })
}

/// Groups utterance indices into length-bucketed batches whose padded size
/// (batch size × longest member) stays within `max_frames`.
pub fn make_batches(utterances: &[Utterance], max_frames: usize) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.sort_by_key(|&i| utterances[i].features.frames());
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        let len = utterances[i].features.frames();
        if len > max_frames {
            return Err(Error::invalid(format!(
                "utterance {} has {len} frames, more than max_frames {max_frames}",
                utterances[i].id
            )));
        }
        if (cur.len() + 1) * len > max_frames {
            batches.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

/// Deterministic hash bucket in `[0, 100)` of an utterance id.
pub fn id_bucket(id: &str) -> u32 {
    let h = Sha256::digest(id.as_bytes());
    u32::from_le_bytes([h[0], h[1], h[2], h[3]]) % 100
}

/// Splits off the validation share (ids hashing below `percent`).
pub fn split_validation(utterances: Vec<Utterance>, percent: u32) -> (Vec<Utterance>, Vec<Utterance>) {
    utterances.into_iter().partition(|u| id_bucket(&u.id) >= percent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, frames: usize) -> Utterance {
        Utterance {
            id: id.into(),
            features: FeatureSequence::new(frames, 1, vec![0.0; frames]).unwrap(),
            transcript: vec![3],
            translation: vec![3],
        }
    }

    #[test]
    fn packing_arithmetic() {
        let us: Vec<_> = (0..10).map(|i| utt(&i.to_string(), 100)).collect();
        let b = make_batches(&us, 400).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let b = make_batches(&[utt("a", 50), utt("b", 120)], 120).unwrap();
        assert_eq!(b, vec![vec![0], vec![1]]);
        assert!(make_batches(&[utt("a", 50)], 40).is_err());
    }

    #[test]
    fn validation_split_is_stable() {
        let us: Vec<_> = (0..400).map(|i| utt(&format!("u{i}"), 8)).collect();
        let (train, val) = split_validation(us.clone(), 5);
        assert_eq!(train.len() + val.len(), 400);
        assert!(!val.is_empty() && val.len() < 50);
        let (_, again) = split_validation(us, 5);
        assert_eq!(val, again);
    }
}
