use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitMode {
    /// Every speaker contributes `test_per_speaker` random samples to test.
    Overlapped { test_per_speaker: usize },
    /// The listed speakers form the test set and never appear in train.
    Unseen { held_out: Vec<usize> },
}

/// Indices into the sample list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions samples (given by their speaker ids) into train and test.
pub fn split_dataset(speakers: &[usize], mode: &SplitMode, seed: u64) -> Result<Split> {
    let present: BTreeSet<usize> = speakers.iter().copied().collect();
    match mode {
        SplitMode::Unseen { held_out } => {
            if held_out.is_empty() {
                return Err(Error::arg("unseen split needs at least one held-out speaker"));
            }
            if let Some(s) = held_out.iter().find(|s| !present.contains(s)) {
                return Err(Error::arg(format!("unknown speaker id {s}")));
            }
            let held: BTreeSet<usize> = held_out.iter().copied().collect();
            let (test, train) = (0..speakers.len()).partition(|&i| held.contains(&speakers[i]));
            Ok(Split { train, test })
        }
        SplitMode::Overlapped { test_per_speaker } => {
            let mut split = Split::default();
            for &s in &present {
                let mut idx: Vec<usize> = (0..speakers.len()).filter(|&i| speakers[i] == s).collect();
                if idx.len() <= *test_per_speaker {
                    return Err(Error::arg(format!(
                        "speaker {s} has {} samples, cannot hold out {test_per_speaker}",
                        idx.len()
                    )));
                }
                idx.shuffle(&mut stream(seed, &[0x5350_4c54, s as u64]));
                let (test, train) = idx.split_at(*test_per_speaker);
                split.test.extend_from_slice(test);
                split.train.extend_from_slice(train);
            }
            split.train.sort_unstable();
            split.test.sort_unstable();
            Ok(split)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speakers(n: usize, per: usize) -> Vec<usize> {
        (0..n).flat_map(|s| std::iter::repeat_n(s, per)).collect()
    }

    #[test]
    fn unseen_split_is_disjoint() {
        let spk = speakers(8, 10);
        let s = split_dataset(&spk, &SplitMode::Unseen { held_out: vec![1, 2] }, 0).unwrap();
        let train: BTreeSet<usize> = s.train.iter().map(|&i| spk[i]).collect();
        let test: BTreeSet<usize> = s.test.iter().map(|&i| spk[i]).collect();
        assert_eq!(train, [0, 3, 4, 5, 6, 7].into_iter().collect());
        assert_eq!(test, [1, 2].into_iter().collect());
    }

    #[test]
    fn overlapped_split_counts() {
        let spk = speakers(4, 100);
        let s = split_dataset(&spk, &SplitMode::Overlapped { test_per_speaker: 25 }, 3).unwrap();
        for sp in 0..4 {
            assert_eq!(s.test.iter().filter(|&&i| spk[i] == sp).count(), 25);
            assert_eq!(s.train.iter().filter(|&&i| spk[i] == sp).count(), 75);
        }
        let train: BTreeSet<usize> = s.train.iter().map(|&i| spk[i]).collect();
        let test: BTreeSet<usize> = s.test.iter().map(|&i| spk[i]).collect();
        assert_eq!(train, test);
    }

    #[test]
    fn argument_errors() {
        let spk = speakers(2, 5);
        assert!(matches!(
            split_dataset(&spk, &SplitMode::Unseen { held_out: vec![] }, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            split_dataset(&spk, &SplitMode::Unseen { held_out: vec![9] }, 0),
            Err(Error::Argument(_))
        ));
    }
}
