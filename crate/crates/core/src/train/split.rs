use rand::seq::SliceRandom;

use super::TrainError;
use crate::checksum::crc64;
use crate::rng::{stream_rng, Stream};

/// Anything that carries a class id.
pub trait Labeled {
    fn label(&self) -> usize;
}

impl Labeled for usize {
    fn label(&self) -> usize {
        *self
    }
}

impl<L: Labeled + ?Sized> Labeled for &L {
    fn label(&self) -> usize {
        (**self).label()
    }
}

/// Train/test membership as indices into the original collection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Fingerprint of the held-out subset (indices in split order).
    pub fn test_membership_hash(&self) -> u64 {
        let bytes: Vec<u8> = self
            .test
            .iter()
            .flat_map(|&i| (i as u64).to_le_bytes())
            .collect();
        crc64(&bytes)
    }
}

pub fn validate_fraction(train_fraction: f64) -> Result<(), TrainError> {
    if !(train_fraction.is_finite() && train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(TrainError::InvalidConfig(format!(
            "train fraction {train_fraction} must lie in (0, 1]"
        )));
    }
    Ok(())
}

fn train_count(n: usize, fraction: f64) -> usize {
    // the epsilon keeps products such as 0.29·100 from flooring to 28
    ((fraction * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Seeded shuffle, then the first ⌊fraction·n⌋ examples train and the rest
/// test. With `stratify`, the rule is applied within each class separately.
pub fn split_indices(
    labels: &[usize],
    train_fraction: f64,
    seed: u64,
    stratify: bool,
) -> Result<Split, TrainError> {
    validate_fraction(train_fraction)?;
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = stream_rng(seed, Stream::Split);
    if !stratify {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let test = order.split_off(train_count(labels.len(), train_fraction));
        return Ok(Split { train: order, test });
    }

    let classes = labels.iter().copied().max().unwrap() + 1;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let rest = members.split_off(train_count(members.len(), train_fraction));
        train.extend(members);
        test.extend(rest);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(Split { train, test })
}

/// [`split_indices`] applied to a collection, cloning members into each side.
pub fn split_dataset<E: Labeled + Clone>(
    examples: &[E],
    train_fraction: f64,
    seed: u64,
    stratify: bool,
) -> Result<(Vec<E>, Vec<E>), TrainError> {
    let labels: Vec<usize> = examples.iter().map(Labeled::label).collect();
    let split = split_indices(&labels, train_fraction, seed, stratify)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok((pick(&split.train), pick(&split.test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_examples() {
        let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
        let s = split_indices(&labels, 0.8, 1, false).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
    }

    #[test]
    fn full_corpus_arithmetic() {
        let labels = vec![0usize; 7023];
        let s = split_indices(&labels, 0.8, 9, false).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (5618, 1405));
    }

    #[test]
    fn seed_determines_membership_and_order() {
        let labels: Vec<usize> = (0..50).map(|i| i % 4).collect();
        let a = split_indices(&labels, 0.8, 5, false).unwrap();
        assert_eq!(a, split_indices(&labels, 0.8, 5, false).unwrap());
        assert_eq!(a.test_membership_hash(), split_indices(&labels, 0.8, 5, false).unwrap().test_membership_hash());
        assert_ne!(a, split_indices(&labels, 0.8, 6, false).unwrap());
    }

    #[test]
    fn stratified_split_keeps_class_ratios() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let s = split_indices(&labels, 0.8, 3, true).unwrap();
        for class in 0..4 {
            assert_eq!(s.test.iter().filter(|&&i| labels[i] == class).count(), 10);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(split_indices(&[], 0.8, 0, false), Err(TrainError::EmptyDataset)));
        for f in [0.0, -0.1, 1.1, f64::NAN] {
            assert!(matches!(split_indices(&[0, 1], f, 0, false), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn split_dataset_keeps_labels_attached() {
        #[derive(Clone, Debug, PartialEq)]
        struct Rec(usize, &'static str);
        impl Labeled for Rec {
            fn label(&self) -> usize {
                self.0
            }
        }
        let recs: Vec<Rec> = (0..10).map(|i| Rec(i % 2, if i % 2 == 0 { "even" } else { "odd" })).collect();
        let (train, test) = split_dataset(&recs, 0.8, 2, false).unwrap();
        for r in train.iter().chain(&test) {
            assert_eq!(r.1, if r.0 == 0 { "even" } else { "odd" });
        }
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_complete(
            labels in proptest::collection::vec(0usize..4, 1..300),
            fraction in 0.05f64..=1.0,
            seed in any::<u64>(),
            stratify in any::<bool>(),
        ) {
            let s = split_indices(&labels, fraction, seed, stratify).unwrap();
            prop_assert_eq!(s.train.len() + s.test.len(), labels.len());
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        }
    }
}
