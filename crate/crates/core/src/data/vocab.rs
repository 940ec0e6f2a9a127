use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
/// End of sequence; also the decoder's start symbol.
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "</s>", "<unk>"];

/// Word vocabulary with reserved pad, end-of-sequence and unknown ids.
/// The CTC blank is not part of the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary; ids of `tokens` start after the reserved ids.
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.to_string(), all.len()).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
            all.push(t.to_string());
        }
        Ok(Self { tokens: all, index })
    }

    /// Reads one token per line; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::new(&tokens).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Number of ids including the reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Whitespace-tokenises `text`; returns ids and the number of unknowns.
    pub fn encode(&self, text: &str) -> (Vec<usize>, usize) {
        let ids: Vec<usize> = text.split_whitespace().map(|t| self.id(t)).collect();
        let unk = ids.iter().filter(|&&i| i == UNK).count();
        (ids, unk)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_reserved() {
        let v = Vocab::new(&["a", "b"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.encode("a zzz b"), (vec![3, UNK, 4], 1));
        assert_eq!(v.decode(&[4, 3]), "b a");
        assert!(Vocab::new(&["a", "a"]).is_err());
    }
}
