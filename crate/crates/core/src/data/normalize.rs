use std::collections::BTreeMap;

use super::Utterance;

/// Lower bound on the per-bin standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Mean/variance normalization per recording and per mel bin, with
/// statistics pooled over every frame of the recording's utterances.
pub fn normalize_per_recording(mut utterances: Vec<Utterance>) -> Vec<Utterance> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, u) in utterances.iter().enumerate() {
        groups.entry(u.recording_id.clone()).or_default().push(i);
    }
    for members in groups.values() {
        let bins = utterances[members[0]].mel_bins();
        let mut sum = vec![0.0; bins];
        let mut count = 0usize;
        for &i in members {
            for frame in utterances[i].features.data().chunks_exact(bins) {
                for (s, v) in sum.iter_mut().zip(frame) {
                    *s += v;
                }
            }
            count += utterances[i].frames();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; bins];
        for &i in members {
            for frame in utterances[i].features.data().chunks_exact(bins) {
                for ((s, v), m) in sq.iter_mut().zip(frame).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        for &i in members {
            for frame in utterances[i].features.data_mut().chunks_exact_mut(bins) {
                for ((v, m), s) in frame.iter_mut().zip(&mean).zip(&std) {
                    *v = (*v - m) / s;
                }
            }
        }
    }
    utterances
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn utt(id: &str, rec: &str, rows: usize, f: impl Fn(usize) -> f64) -> Utterance {
        Utterance {
            id: id.into(),
            recording_id: rec.into(),
            features: Tensor::new(vec![rows, 3], (0..rows * 3).map(f).collect()).unwrap(),
            transcript: "x".into(),
        }
    }

    #[test]
    fn single_frame_recording_becomes_zeros() {
        let out = normalize_per_recording(vec![utt("a", "r", 1, |i| i as f64 + 4.0)]);
        assert!(out[0].features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooled_moments_are_zero_and_one() {
        let out = normalize_per_recording(vec![
            utt("a", "r", 5, |i| ((i * 13) % 7) as f64),
            utt("b", "r", 3, |i| (i as f64).sin() * 4.0),
        ]);
        for bin in 0..3 {
            let vals: Vec<f64> = out
                .iter()
                .flat_map(|u| u.features.data().chunks_exact(3).map(move |f| f[bin]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
