//! Metadata serialisation, whitespace vocabulary and tokenisation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HtclError, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<bos>"];

/// Song metadata. Fields may be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDocument {
    pub title: String,
    pub artists: Vec<String>,
    pub lyrics: String,
}

/// `title: {title} | artists: {a1, a2, ...} | lyrics: {lyrics}`
pub fn serialize_metadata(doc: &TextDocument) -> String {
    format!(
        "title: {} | artists: {} | lyrics: {}",
        doc.title,
        doc.artists.join(", "),
        doc.lyrics
    )
}

/// Frequency-ranked whitespace vocabulary with reserved ids 0 (pad), 1 (unknown), 2 (begin).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a, I>(texts: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if vocab_size < RESERVED.len() {
            return Err(HtclError::config("text.vocab_size", "must be at least 3"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .take(vocab_size)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str, max_text_len: usize) -> TokenSequence {
        let ids = std::iter::once(BOS_ID)
            .chain(text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK_ID)))
            .take(max_text_len)
            .collect();
        TokenSequence { ids }
    }

    /// Line-delimited `token<TAB>id`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{t}\t{i}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let mut tokens: Vec<String> = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| HtclError::Data(format!("vocabulary line {} lacks a tab", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| HtclError::Data(format!("vocabulary line {} has a bad id", lineno + 1)))?;
            if id != tokens.len() {
                return Err(HtclError::Data(format!(
                    "vocabulary ids must be dense and ordered; line {} has id {id}",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED.map(String::from) {
            return Err(HtclError::Data("vocabulary lacks reserved tokens".into()));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Token ids starting with the begin token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn template() {
        let doc = TextDocument {
            title: "Song A".into(),
            artists: vec!["X".into()],
            lyrics: "la la".into(),
        };
        assert_eq!(serialize_metadata(&doc), "title: Song A | artists: X | lyrics: la la");
        assert_eq!(serialize_metadata(&TextDocument::default()), "title:  | artists:  | lyrics: ");
        let two = TextDocument {
            artists: vec!["X".into(), "Y".into()],
            ..Default::default()
        };
        assert!(serialize_metadata(&two).contains("artists: X, Y |"));
    }

    #[test]
    fn vocabulary_order() {
        let v = Vocabulary::build(["a a b"], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(3), Some("a"));
        assert_eq!(v.token(4), Some("b"));
        let v = Vocabulary::build([""], 10).unwrap();
        assert_eq!(v.len(), 3);
        let v = Vocabulary::build(["y x"], 10).unwrap();
        assert!(v.id("x").unwrap() < v.id("y").unwrap());
        assert!(matches!(Vocabulary::build(["a"], 2), Err(HtclError::Config { .. })));
    }

    #[test]
    fn tokenize_rules() {
        let v = Vocabulary::build(["a a b"], 5).unwrap();
        assert_eq!(v.tokenize("a b", 512).ids, vec![2, 3, 4]);
        assert_eq!(v.tokenize("z", 512).ids, vec![2, 1]);
        let long = vec!["a"; 600].join(" ");
        assert_eq!(v.tokenize(&long, 512).len(), 512);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let v = Vocabulary::build(["one two two three three three"], 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "<pad>\t0\n<unk>\t2\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }

    proptest! {
        #[test]
        fn sequences_respect_bounds(words in proptest::collection::vec("[a-e]{1,3}", 0..60), max_len in 1usize..40) {
            let corpus = words.join(" ");
            let v = Vocabulary::build([corpus.as_str()], 8).unwrap();
            let doc = TextDocument { title: corpus.clone(), artists: vec![], lyrics: corpus.clone() };
            let text = serialize_metadata(&doc);
            let a = v.tokenize(&text, max_len);
            prop_assert_eq!(&a, &v.tokenize(&text, max_len));
            prop_assert!(a.len() <= max_len);
            prop_assert!(a.ids.iter().all(|&id| (id as usize) < v.len()));
        }
    }
}
