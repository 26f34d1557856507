//! Word and character error rates.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Substitutions, deletions and insertions of a minimal alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }

    fn add(&mut self, o: EditCounts) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. Among
/// equal-cost alignments the one with the most substitutions (fewest
/// deletions and insertions) is chosen; its counts are then unique, and
/// swapping the arguments exchanges deletions and insertions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // Each cell holds (edits, deletions + insertions), compared lexicographically.
    let mut prev: Vec<(usize, usize)> = (0..=m).map(|j| (j, j)).collect();
    let mut cur = vec![(0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, i);
        for j in 1..=m {
            let (e, g) = prev[j - 1];
            let diag = (e + usize::from(reference[i - 1] != hyp[j - 1]), g);
            let del = (prev[j].0 + 1, prev[j].1 + 1);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1 + 1);
            cur[j] = diag.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (edits, gaps) = prev[m];
    // del - ins = n - m and del + ins = gaps.
    let del = if n >= m { (gaps + (n - m)) / 2 } else { (gaps - (m - n)) / 2 };
    EditCounts {
        sub: edits - gaps,
        del,
        ins: gaps - del,
    }
}

/// Scores of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub words: EditCounts,
    pub ref_words: usize,
    pub chars: EditCounts,
    pub ref_chars: usize,
}

/// Corpus-level scores pooled over utterances: total errors over total
/// reference tokens. Words are whitespace-separated; characters include
/// spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScore>,
    pub words: EditCounts,
    pub ref_words: usize,
    pub chars: EditCounts,
    pub ref_chars: usize,
}

impl EvalReport {
    pub fn wer(&self) -> f64 {
        self.words.errors() as f64 / self.ref_words as f64
    }

    pub fn cer(&self) -> f64 {
        self.chars.errors() as f64 / self.ref_chars as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# id\tword_S\tword_D\tword_I\tword_N\tchar_S\tchar_D\tchar_I\tchar_N\n");
        let line = |out: &mut String, id: &str, w: &EditCounts, nw: usize, c: &EditCounts, nc: usize| {
            let _ = writeln!(
                out,
                "{id}\t{}\t{}\t{}\t{nw}\t{}\t{}\t{}\t{nc}",
                w.sub, w.del, w.ins, c.sub, c.del, c.ins
            );
        };
        for u in &self.utterances {
            line(&mut out, &u.id, &u.words, u.ref_words, &u.chars, u.ref_chars);
        }
        line(&mut out, "TOTAL", &self.words, self.ref_words, &self.chars, self.ref_chars);
        let _ = writeln!(out, "WER\t{:.6}", self.wer());
        let _ = writeln!(out, "CER\t{:.6}", self.cer());
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn score_utterance(id: &str, reference: &str, hyp: &str) -> UtteranceScore {
    let rw: Vec<&str> = reference.split_whitespace().collect();
    let hw: Vec<&str> = hyp.split_whitespace().collect();
    let rc: Vec<char> = reference.chars().collect();
    let hc: Vec<char> = hyp.chars().collect();
    UtteranceScore {
        id: id.to_string(),
        words: edit_distance(&rw, &hw),
        ref_words: rw.len(),
        chars: edit_distance(&rc, &hc),
        ref_chars: rc.len(),
    }
}

/// Scores hypotheses against references, both as `(id, text)` pairs. Every
/// reference needs exactly one hypothesis and vice versa.
pub fn evaluate(refs: &[(String, String)], hyps: &[(String, String)]) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for (id, text) in hyps {
        if by_id.insert(id, text).is_some() {
            return Err(Error::usage(format!("duplicate hypothesis for {id}")));
        }
    }
    let ref_ids: HashSet<&str> = refs.iter().map(|(id, _)| id.as_str()).collect();
    let missing: Vec<&str> = refs
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let mut extra: Vec<&str> = hyps.iter().map(|(id, _)| id.as_str()).filter(|id| !ref_ids.contains(id)).collect();
    extra.sort_unstable();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::usage(format!(
            "hypothesis ids do not match references; missing: [{}], unexpected: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let mut report = EvalReport {
        utterances: Vec::with_capacity(refs.len()),
        words: EditCounts::default(),
        ref_words: 0,
        chars: EditCounts::default(),
        ref_chars: 0,
    };
    for (id, text) in refs {
        let u = score_utterance(id, text, by_id[id.as_str()]);
        report.words.add(u.words);
        report.chars.add(u.chars);
        report.ref_words += u.ref_words;
        report.ref_chars += u.ref_chars;
        report.utterances.push(u);
    }
    if report.ref_words == 0 || report.ref_chars == 0 {
        return Err(Error::usage("references contain no words"));
    }
    Ok(report)
}

/// Reads `utt_id<TAB>text` lines; a missing text field is an empty hypothesis.
pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, hyp) = line.split_once('\t').unwrap_or((line, ""));
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::format(path, format!("line {}: empty utterance id", n + 1)));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::format(path, format!("line {}: duplicate id {id}", n + 1)));
        }
        out.push((id.to_string(), hyp.trim().to_string()));
    }
    Ok(out)
}

pub fn write_hypotheses(path: &Path, hyps: &[(String, String)]) -> Result<()> {
    let text: String = hyps.iter().map(|(id, h)| format!("{id}\t{h}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
