use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids preceding the first character.
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Character inventory. Ids `0..4` are `<pad>`, `<s>`, `</s>`, `<unk>`;
/// characters follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if c == '\n' || c == '\r' {
                return Err(Error::usage("line breaks cannot be vocabulary characters"));
            }
            if index.insert(c, RESERVED + i).is_some() {
                return Err(Error::usage(format!("duplicate vocabulary character {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Sorted unique characters of the corpus.
    pub fn build<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<char> = transcripts.into_iter().flat_map(str::chars).collect();
        if set.is_empty() {
            return Err(Error::usage("cannot build a vocabulary from an empty corpus"));
        }
        Self::from_chars(set)
    }

    /// Total id count including reserved symbols.
    pub fn len(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Id of `c`, or `<unk>` when absent.
    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED).and_then(|i| self.chars.get(i).copied())
    }

    /// Detokenizes, dropping reserved symbols.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char_of(i)).collect()
    }

    pub fn symbol(&self, id: usize) -> String {
        match id {
            i if i < RESERVED => RESERVED_NAMES[i].to_string(),
            i => self.char_of(i).map(String::from).unwrap_or_else(|| format!("<{i}?>")),
        }
    }

    /// One character per line; reserved symbols are implicit.
    pub fn to_text(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Self::from_chars([]);
        }
        let mut chars = Vec::new();
        for (n, line) in body.split('\n').enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(Error::usage(format!("vocab line {} is not a single character: {line:?}", n + 1))),
            }
        }
        Self::from_chars(chars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_then_sorted_chars() {
        let v = Vocab::build(["ab", "ba"]).unwrap();
        assert_eq!(v.len(), RESERVED + 2);
        assert_eq!(v.id('a'), 4);
        assert_eq!(v.id('b'), 5);
        assert_eq!(v, Vocab::build(["ba", "ab"]).unwrap());
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let v = Vocab::build(["ab"]).unwrap();
        assert_eq!(v.encode("abz"), vec![4, 5, UNK]);
        assert_eq!(v.decode(&[BOS, 4, UNK, 5, EOS]), "ab");
    }

    #[test]
    fn text_round_trip_keeps_space() {
        let v = Vocab::build(["a b", "c"]).unwrap();
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id(' '), 4);
        assert!(Vocab::from_text("ab\n").is_err());
        assert!(Vocab::build([""]).is_err());
    }
}
