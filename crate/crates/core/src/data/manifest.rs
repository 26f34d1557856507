use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::features::read_features;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One manifest row, before its features are read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub recording_id: String,
    /// Resolved against the manifest's directory when relative.
    pub feature_path: PathBuf,
    pub transcript: String,
}

/// An utterance with its log-mel features `[frames, mel_bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub recording_id: String,
    pub features: Tensor,
    pub transcript: String,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn mel_bins(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Parses a manifest: UTF-8, tab separated `utt_id, recording_id,
/// feature_path, transcript`; `#` lines and blank lines are skipped.
/// Transcripts are lowercased.
pub fn read_manifest_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::format(
                path,
                format!("line {}: expected 4 tab-separated columns, found {}", n + 1, cols.len()),
            ));
        }
        let id = cols[0].to_string();
        if id.is_empty() {
            return Err(Error::format(path, format!("line {}: empty utterance id", n + 1)));
        }
        let transcript = cols[3].to_lowercase();
        if transcript.is_empty() {
            return Err(Error::data(id, "empty transcript"));
        }
        let feature_path = PathBuf::from(cols[2]);
        let feature_path = if feature_path.is_absolute() {
            feature_path
        } else {
            base.join(feature_path)
        };
        entries.push(ManifestEntry {
            id,
            recording_id: cols[1].to_string(),
            feature_path,
            transcript,
        });
    }
    Ok(entries)
}

/// Loads every utterance of a manifest in file order.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let entries = read_manifest_entries(path)?;
    if entries.is_empty() {
        warn!("manifest {} lists no utterances", path.display());
    }
    entries
        .into_iter()
        .map(|e| {
            let features = read_features(&e.feature_path).map_err(|err| Error::data(&e.id, err.to_string()))?;
            Ok(Utterance {
                id: e.id,
                recording_id: e.recording_id,
                features,
                transcript: e.transcript,
            })
        })
        .collect()
}

/// `(utt_id, transcript)` pairs of a manifest, without touching feature files.
pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(read_manifest_entries(path)?
        .into_iter()
        .map(|e| (e.id, e.transcript))
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from("# utt_id\trecording_id\tfeature_path\ttranscript\n");
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            e.recording_id,
            e.feature_path.display(),
            e.transcript
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_features;

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "# only a comment\n\n").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn rows_load_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["a", "b", "c"].iter().enumerate() {
            write_features(&dir.path().join(format!("{name}.fbank")), &Tensor::full(vec![i + 1, 2], 1.0)).unwrap();
        }
        let path = dir.path().join("m.tsv");
        fs::write(&path, "u3\tr\ta.fbank\tHello\nu1\tr\tb.fbank\tthere\nu2\ts\tc.fbank\tyou\n").unwrap();
        let utts = load_manifest(&path).unwrap();
        let ids: Vec<&str> = utts.iter().map(|u| u.id.as_str()).collect();
        assert_eq!(ids, ["u3", "u1", "u2"]);
        assert_eq!(utts[0].transcript, "hello");
        assert_eq!(utts[2].frames(), 3);
    }

    #[test]
    fn corrupt_feature_file_names_utterance() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.fbank"), b"FBANK1\0\0\x05\0\0\0\x02\0\0\0").unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "utt-7\tr\tbad.fbank\tabc\n").unwrap();
        match load_manifest(&path) {
            Err(Error::Data { id, .. }) => assert_eq!(id, "utt-7"),
            other => panic!("expected data error, got {other:?}"),
        }
        fs::write(&path, "utt-8\tr\tmissing.fbank\tabc\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Data { id, .. }) if id == "utt-8"));
    }

    #[test]
    fn malformed_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "u1\tr\tonly three\n").unwrap();
        assert!(matches!(read_manifest_entries(&path), Err(Error::Format { .. })));
    }
}
