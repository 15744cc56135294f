use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Content tokens kept per sequence; framed sequences are two longer.
pub const MAX_LEN: usize = 71;

/// Dense id ↔ surface mapping with the four reserved specials at ids 0-3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Config(format!(
                    "vocabulary line {} must be {special}",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Specials followed by every distinct surface in order of first
    /// appearance.
    pub fn build<I, S>(corpus: I) -> Result<Vocabulary>
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut molecules = 0usize;
        for mol in corpus {
            molecules += 1;
            for s in mol {
                let s = s.as_ref();
                if !index.contains_key(s) {
                    index.insert(s.to_string(), tokens.len() as u32);
                    tokens.push(s.to_string());
                }
            }
        }
        if molecules == 0 {
            return Err(Error::Empty("vocabulary corpus".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `surface`, or `<unk>`.
    pub fn id(&self, surface: &str) -> u32 {
        self.index.get(surface).copied().unwrap_or(UNK)
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids<S: AsRef<str>>(&self, surfaces: &[S]) -> Vec<u32> {
        surfaces.iter().map(|s| self.id(s.as_ref())).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocabulary> {
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text)
    }
}

/// `<sos>`, up to `max_len` content ids, `<eos>`, then padding to
/// `max_len + 2`.
pub fn frame_and_pad(ids: &[u32], max_len: usize) -> Vec<u32> {
    let keep = ids.len().min(max_len);
    let mut out = Vec::with_capacity(max_len + 2);
    out.push(SOS);
    out.extend_from_slice(&ids[..keep]);
    out.push(EOS);
    out.resize(max_len + 2, PAD);
    out
}

/// Content ids of a framed sequence: everything between the leading `<sos>`
/// and the first `<eos>` (or the end).
pub fn content(ids: &[u32]) -> &[u32] {
    let start = usize::from(ids.first() == Some(&SOS));
    let end = ids[start..]
        .iter()
        .position(|&t| t == EOS)
        .map_or(ids.len(), |p| start + p);
    &ids[start..end]
}

/// Framing invariant: leading `<sos>`, exactly one `<eos>`, only `<pad>`
/// after it.
pub fn is_framed(ids: &[u32]) -> bool {
    if ids.first() != Some(&SOS) {
        return false;
    }
    let Some(eos) = ids.iter().position(|&t| t == EOS) else {
        return false;
    };
    ids[1..eos].iter().all(|&t| t != SOS && t != PAD)
        && ids[eos + 1..].iter().all(|&t| t == PAD)
}
