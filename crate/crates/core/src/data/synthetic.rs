use std::fs;
use std::path::{Path, PathBuf};

use super::{write_features, write_manifest, ManifestEntry, Utterance};
use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

/// Parameters of the toy corpus.
///
/// Each character owns a fixed random spectral template. An utterance renders
/// its transcript character by character, holding each template for a few
/// frames, then adds frame noise plus a per-recording channel offset and gain.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub utterances: usize,
    pub dev_utterances: usize,
    pub seed: u64,
    pub mel_bins: usize,
    pub alphabet: String,
    pub min_chars: usize,
    pub max_chars: usize,
    pub min_frames_per_char: usize,
    pub max_frames_per_char: usize,
    pub utterances_per_recording: usize,
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(utterances: usize, seed: u64) -> Self {
        Self {
            utterances,
            dev_utterances: (utterances / 5).max(1),
            seed,
            mel_bins: 40,
            alphabet: "abcdefghij".into(),
            min_chars: 14,
            max_chars: 20,
            min_frames_per_char: 5,
            max_frames_per_char: 6,
            utterances_per_recording: 5,
            noise: 0.25,
        }
    }

    fn transcript(&self, rng: &mut RngStream) -> String {
        let letters: Vec<char> = self.alphabet.chars().collect();
        let mut text = String::new();
        loop {
            let word_len = 2 + rng.below(4);
            let word: String = (0..word_len).map(|_| letters[rng.below(letters.len())]).collect();
            let len = text.chars().count();
            if !text.is_empty() && len + 3 > self.max_chars {
                break;
            }
            let needed = if text.is_empty() { word_len } else { word_len + 1 };
            if len + needed > self.max_chars {
                continue;
            }
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(&word);
            if text.chars().count() >= self.min_chars {
                break;
            }
        }
        text
    }

    /// Train and dev utterances, fully determined by the spec.
    pub fn generate(&self) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        if self.alphabet.is_empty() || self.max_chars < 2 || self.mel_bins == 0 {
            return Err(Error::config("synthetic corpus needs an alphabet, max_chars >= 2 and mel bins"));
        }
        let mut rng = RngStream::new(self.seed, streams::SYNTHETIC);
        let symbols: Vec<char> = self.alphabet.chars().chain([' ']).collect();
        let templates: Vec<Vec<f64>> = symbols
            .iter()
            .map(|&c| {
                let amp = if c == ' ' { 0.5 } else { 2.0 };
                (0..self.mel_bins).map(|_| amp * rng.normal()).collect()
            })
            .collect();
        let per_rec = self.utterances_per_recording.max(1);
        let total = self.utterances + self.dev_utterances;
        let mut channel: Option<(Vec<f64>, f64)> = None;
        let mut all = Vec::with_capacity(total);
        for n in 0..total {
            let dev = n >= self.utterances;
            let k = if dev { n - self.utterances } else { n };
            let rec = if dev {
                format!("devrec{:03}", k / per_rec)
            } else {
                format!("rec{:03}", k / per_rec)
            };
            if k % per_rec == 0 || channel.is_none() {
                let offset = (0..self.mel_bins).map(|_| rng.normal() - 3.0).collect();
                channel = Some((offset, rng.uniform_range(0.7, 1.3)));
            }
            let (offset, gain) = channel.as_ref().unwrap();
            let text = self.transcript(&mut rng);
            let mut data = Vec::new();
            for c in text.chars() {
                let t = &templates[symbols.iter().position(|&s| s == c).unwrap()];
                let hold = self.min_frames_per_char
                    + rng.below(self.max_frames_per_char - self.min_frames_per_char + 1);
                for _ in 0..hold {
                    for b in 0..self.mel_bins {
                        let v = offset[b] + gain * t[b] + self.noise * rng.normal();
                        data.push(v as f32 as f64);
                    }
                }
            }
            let frames = data.len() / self.mel_bins;
            all.push(Utterance {
                id: if dev { format!("dev{k:04}") } else { format!("utt{k:04}") },
                recording_id: rec,
                features: Tensor::new(vec![frames, self.mel_bins], data)?,
                transcript: text,
            });
        }
        let dev = all.split_off(self.utterances);
        Ok((all, dev))
    }
}

/// Writes `train.tsv`, `dev.tsv` and their feature files under `out_dir`.
/// Returns the two manifest paths.
pub fn make_synthetic(out_dir: &Path, spec: &SyntheticSpec) -> Result<(PathBuf, PathBuf)> {
    let feats = out_dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let (train, dev) = spec.generate()?;
    let mut paths = Vec::new();
    for (name, utts) in [("train.tsv", &train), ("dev.tsv", &dev)] {
        let mut entries = Vec::with_capacity(utts.len());
        for u in utts {
            let rel = PathBuf::from("feats").join(format!("{}.fbank", u.id));
            write_features(&out_dir.join(&rel), &u.features)?;
            entries.push(ManifestEntry {
                id: u.id.clone(),
                recording_id: u.recording_id.clone(),
                feature_path: rel,
                transcript: u.transcript.clone(),
            });
        }
        let path = out_dir.join(name);
        write_manifest(&path, &entries)?;
        paths.push(path);
    }
    Ok((paths[0].clone(), paths[1].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    #[test]
    fn deterministic_and_within_limits() {
        let spec = SyntheticSpec::new(12, 5);
        let (a, dev) = spec.generate().unwrap();
        let (b, _) = spec.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert_eq!(dev.len(), 2);
        for u in &a {
            let n = u.transcript.chars().count();
            assert!((2..=20).contains(&n), "{:?}", u.transcript);
            assert_eq!(u.mel_bins(), 40);
            assert!(u.frames() >= 4 * n && u.frames() <= 6 * n);
        }
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(6, 2);
        let (train, dev) = make_synthetic(dir.path(), &spec).unwrap();
        let loaded = load_manifest(&train).unwrap();
        assert_eq!(loaded, spec.generate().unwrap().0);
        assert_eq!(load_manifest(&dev).unwrap().len(), 1);
    }
}
