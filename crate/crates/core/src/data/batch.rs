use super::{Utterance, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

/// Padded group of utterances.
///
/// Features are `[batch, max_frames, mel_bins]` with zeros past each
/// utterance's length. Decoder inputs are `<s> c1 .. cn` and outputs
/// `c1 .. cn </s>`, both `[batch, max_target]` row-major and padded with `<pad>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub features: Tensor,
    pub frame_lens: Vec<usize>,
    pub target_in: Vec<usize>,
    pub target_out: Vec<usize>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn collate(utts: &[&Utterance], vocab: &Vocab) -> Result<Self> {
        let first = utts.first().ok_or_else(|| Error::usage("empty batch"))?;
        let bins = first.mel_bins();
        let max_frames = utts.iter().map(|u| u.frames()).max().unwrap();
        let encoded: Vec<Vec<usize>> = utts.iter().map(|u| vocab.encode(&u.transcript)).collect();
        let max_target = encoded.iter().map(|e| e.len() + 1).max().unwrap();

        let mut features = vec![0.0; utts.len() * max_frames * bins];
        let mut target_in = vec![PAD; utts.len() * max_target];
        let mut target_out = vec![PAD; utts.len() * max_target];
        for (b, (u, ids)) in utts.iter().zip(&encoded).enumerate() {
            if u.mel_bins() != bins {
                return Err(Error::data(&u.id, format!("{} mel bins, batch uses {bins}", u.mel_bins())));
            }
            if ids.is_empty() {
                return Err(Error::data(&u.id, "empty transcript"));
            }
            let off = b * max_frames * bins;
            features[off..off + u.features.len()].copy_from_slice(u.features.data());
            let row = b * max_target;
            target_in[row] = BOS;
            target_in[row + 1..row + 1 + ids.len()].copy_from_slice(ids);
            target_out[row..row + ids.len()].copy_from_slice(ids);
            target_out[row + ids.len()] = EOS;
        }
        Ok(Self {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            features: Tensor::new(vec![utts.len(), max_frames, bins], features)?,
            frame_lens: utts.iter().map(|u| u.frames()).collect(),
            target_in,
            target_out,
            target_lens: encoded.iter().map(|e| e.len() + 1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn max_target(&self) -> usize {
        self.target_in.len() / self.len()
    }

    /// Frames including padding.
    pub fn padded_frames(&self) -> usize {
        self.len() * self.max_frames()
    }

    /// Non-pad target symbols (characters plus one `</s>` per utterance).
    pub fn target_count(&self) -> usize {
        self.target_lens.iter().sum()
    }

    /// `true` at real frames, `[batch, max_frames]`.
    pub fn frame_mask(&self) -> Vec<bool> {
        let t = self.max_frames();
        self.frame_lens.iter().flat_map(|&n| (0..t).map(move |i| i < n)).collect()
    }

    /// `true` at real target positions, `[batch, max_target]`.
    pub fn target_mask(&self) -> Vec<bool> {
        let u = self.max_target();
        self.target_lens.iter().flat_map(|&n| (0..u).map(move |i| i < n)).collect()
    }
}

/// Groups utterance indices into length-bucketed batches whose padded frame
/// count stays within `frame_budget`, then shuffles batch order with `seed`.
pub fn plan_batches(frames: &[usize], frame_budget: usize, seed: u64) -> std::result::Result<Vec<Vec<usize>>, usize> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| (frames[i], i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        if frames[i] > frame_budget {
            return Err(i);
        }
        // Sorted ascending, so frames[i] is the new batch maximum.
        if !current.is_empty() && (current.len() + 1) * frames[i] > frame_budget {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    RngStream::new(seed, streams::SHUFFLE).shuffle(&mut batches);
    Ok(batches)
}

pub fn make_batches(dataset: &[Utterance], vocab: &Vocab, frame_budget: usize, seed: u64) -> Result<Vec<Batch>> {
    let frames: Vec<usize> = dataset.iter().map(Utterance::frames).collect();
    let plan = plan_batches(&frames, frame_budget, seed).map_err(|i| {
        Error::data(
            &dataset[i].id,
            format!("{} frames exceed the batch budget of {frame_budget}", frames[i]),
        )
    })?;
    plan.iter()
        .map(|idx| {
            let utts: Vec<&Utterance> = idx.iter().map(|&i| &dataset[i]).collect();
            Batch::collate(&utts, vocab)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(id: &str, frames: usize, text: &str) -> Utterance {
        Utterance {
            id: id.into(),
            recording_id: "r".into(),
            features: Tensor::full(vec![frames, 2], 1.0),
            transcript: text.into(),
        }
    }

    #[test]
    fn collate_pads_and_shifts_targets() {
        let a = utt("a", 3, "ab");
        let b = utt("b", 2, "b");
        let vocab = Vocab::build(["ab"]).unwrap();
        let batch = Batch::collate(&[&a, &b], &vocab).unwrap();
        assert_eq!(batch.features.shape(), &[2, 3, 2]);
        assert_eq!(&batch.features.data()[6..], &[1., 1., 1., 1., 0., 0.]);
        assert_eq!(batch.target_in, vec![BOS, 4, 5, BOS, 5, PAD]);
        assert_eq!(batch.target_out, vec![4, 5, EOS, 5, EOS, PAD]);
        assert_eq!(batch.target_mask(), vec![true, true, true, true, true, false]);
        assert_eq!(batch.frame_mask(), vec![true, true, true, true, true, false]);
        assert_eq!(batch.target_count(), 5);
    }

    #[test]
    fn budget_of_one_utterance_gives_singletons() {
        let data: Vec<Utterance> = (0..5).map(|i| utt(&format!("u{i}"), 10, "a")).collect();
        let vocab = Vocab::build(["a"]).unwrap();
        let batches = make_batches(&data, &vocab, 10, 3).unwrap();
        assert_eq!(batches.len(), 5);
        assert!(batches.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn equal_lengths_waste_nothing() {
        let data: Vec<Utterance> = (0..6).map(|i| utt(&format!("u{i}"), 7, "a")).collect();
        let vocab = Vocab::build(["a"]).unwrap();
        for b in make_batches(&data, &vocab, 21, 1).unwrap() {
            assert_eq!(b.padded_frames(), b.frame_lens.iter().sum::<usize>());
        }
    }

    #[test]
    fn oversized_utterance_named() {
        let data = vec![utt("short", 3, "a"), utt("long", 30, "a")];
        let vocab = Vocab::build(["a"]).unwrap();
        assert!(matches!(make_batches(&data, &vocab, 20, 0), Err(Error::Data { id, .. }) if id == "long"));
    }

    proptest! {
        #[test]
        fn batches_partition_the_dataset(
            frames in proptest::collection::vec(1usize..50, 1..60),
            extra in 0usize..100,
            seed in any::<u64>(),
        ) {
            let budget = frames.iter().copied().max().unwrap() + extra;
            let plan = plan_batches(&frames, budget, seed).unwrap();
            let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..frames.len()).collect::<Vec<_>>());
            for b in &plan {
                let max = b.iter().map(|&i| frames[i]).max().unwrap();
                prop_assert!(b.len() * max <= budget);
            }
            prop_assert_eq!(plan, plan_batches(&frames, budget, seed).unwrap());
        }
    }
}
