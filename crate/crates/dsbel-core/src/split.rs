//! Stratified 70/30 + 80/20 dataset partitioning.

use crate::dataset::{Label, LabeledDataset};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Per class: shuffle, hold out floor(0.3 n) for test, then split the
/// remainder 80:20 with the validation share rounded half-up.
///
/// The floor on the test count is what reproduces the reference
/// (1741, 1032) / (745, 441) partition for class sizes (2486, 1473).
pub fn split_dataset(ds: &LabeledDataset, seed: u64) -> Result<SplitPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = SplitPlan {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for label in [Label::Benign, Label::Malware] {
        let mut idx: Vec<usize> = ds
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.label == label)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 5 {
            return Err(Error::Data(format!(
                "class {:?} has only {} items (need >= 5)",
                label,
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let test_n = (3 * n) / 10;
        let rem = n - test_n;
        let val_n = (2 * rem + 5) / 10; // round half-up of 0.2*rem
        plan.test.extend(&idx[..test_n]);
        plan.val.extend(&idx[test_n..test_n + val_n]);
        plan.train.extend(&idx[test_n + val_n..]);
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic_corpus;
    use crate::image::GrayImage;
    use crate::dataset::Item;
    use std::collections::BTreeSet;

    fn dummy_dataset(benign: usize, malware: usize) -> LabeledDataset {
        let img = GrayImage::new(1, 1, vec![0]).unwrap();
        let mut items = Vec::new();
        for i in 0..benign {
            items.push(Item {
                image: img.clone(),
                label: Label::Benign,
                source: format!("b{i}"),
            });
        }
        for i in 0..malware {
            items.push(Item {
                image: img.clone(),
                label: Label::Malware,
                source: format!("m{i}"),
            });
        }
        LabeledDataset { items }
    }

    #[test]
    fn reproduces_reference_partition() {
        let ds = dummy_dataset(2486, 1473);
        let plan = split_dataset(&ds, 0).unwrap();
        let count = |idx: &[usize], label: Label| {
            idx.iter().filter(|&&i| ds.items[i].label == label).count()
        };
        assert_eq!(count(&plan.test, Label::Benign), 745);
        assert_eq!(count(&plan.test, Label::Malware), 441);
        assert_eq!(
            count(&plan.train, Label::Benign) + count(&plan.val, Label::Benign),
            1741
        );
        assert_eq!(
            count(&plan.train, Label::Malware) + count(&plan.val, Label::Malware),
            1032
        );
    }

    #[test]
    fn ten_plus_ten_rule() {
        let ds = dummy_dataset(10, 10);
        let plan = split_dataset(&ds, 1).unwrap();
        let count = |idx: &[usize], label: Label| {
            idx.iter().filter(|&&i| ds.items[i].label == label).count()
        };
        assert_eq!(count(&plan.test, Label::Benign), 3);
        assert_eq!(count(&plan.test, Label::Malware), 3);
        assert_eq!(count(&plan.val, Label::Benign), 1);
        assert_eq!(count(&plan.val, Label::Malware), 1);
        assert_eq!(count(&plan.train, Label::Benign), 6);
    }

    #[test]
    fn same_seed_same_plan() {
        let ds = generate_synthetic_corpus(20, 8, 5);
        assert_eq!(split_dataset(&ds, 9).unwrap(), split_dataset(&ds, 9).unwrap());
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let ds = generate_synthetic_corpus(37, 8, 2);
        let plan = split_dataset(&ds, 4).unwrap();
        let mut all = BTreeSet::new();
        for idx in [&plan.train, &plan.val, &plan.test] {
            for &i in idx {
                assert!(all.insert(i), "index {i} appears twice");
            }
        }
        assert_eq!(all.len(), ds.len());
    }

    #[test]
    fn tiny_class_rejected() {
        let ds = dummy_dataset(10, 4);
        assert!(split_dataset(&ds, 0).is_err());
    }
}
