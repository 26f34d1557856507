//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `STASRCKP`, `u32` version, `u64` update step,
//! `u32`-length-prefixed UTF-8 model config and vocabulary texts,
//! `u32` tensor count, then per tensor a `u32`-prefixed name, `u32` rank,
//! `u64` extents and the `f64` payload.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ModelConfig, TransformerModel};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STASRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model together with the vocabulary it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub vocab: Vocab,
    /// Number of optimizer updates applied.
    pub step: u64,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(model: &TransformerModel, vocab: &Vocab, step: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    put_str(&mut out, &model.config().to_text());
    put_str(&mut out, &vocab.to_text());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params().iter() {
        put_str(&mut out, p.name());
        let t = p.value();
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes atomically: the file is assembled under a temporary name and renamed.
pub fn save_checkpoint(path: &Path, model: &TransformerModel, vocab: &Vocab, step: u64) -> Result<()> {
    let bytes = encode_checkpoint(model, vocab, step);
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 text"))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64()?;
    let config = ModelConfig::from_text(&r.string()?)?;
    let vocab = Vocab::from_text(&r.string()?)?;
    if vocab.len() != config.vocab_size {
        return Err(Error::format(
            path,
            format!("vocabulary has {} symbols, config says {}", vocab.len(), config.vocab_size),
        ));
    }
    let mut model = TransformerModel::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::format(
            path,
            format!("{count} tensors stored, model has {}", model.params().len()),
        ));
    }
    for _ in 0..count {
        let name = r.string()?;
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::format(path, format!("unknown tensor {name}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != model.params().value(id).shape() {
            return Err(Error::format(path, format!("tensor {name} has shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("tensor {name} holds non-finite values")));
        }
        model.params_mut().set_value(id, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(Checkpoint { model, vocab, step })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (TransformerModel, Vocab) {
        let vocab = Vocab::from_chars("ab c".chars()).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 12,
            heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            mel_bins: 5,
            vocab_size: vocab.len(),
            ..ModelConfig::default()
        };
        (TransformerModel::new(cfg, 11).unwrap(), vocab)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let (model, vocab) = tiny();
        let bytes = encode_checkpoint(&model, &vocab, 42);
        let ck = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.vocab, vocab);
        assert_eq!(ck.model.config(), model.config());
        for (a, b) in ck.model.params().iter().zip(model.params().iter()) {
            assert_eq!(a.name(), b.name());
            let same = a.value().data().iter().zip(b.value().data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{}", a.name());
        }
        assert_eq!(encode_checkpoint(&ck.model, &ck.vocab, 42), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let (model, vocab) = tiny();
        let bytes = encode_checkpoint(&model, &vocab, 0);
        let p = Path::new("mem");
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, p), Err(Error::Format { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra, p), Err(Error::Format { .. })));
    }
}
