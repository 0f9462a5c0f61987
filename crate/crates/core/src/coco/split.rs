use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Result};

/// Random train/val partition. The train side gets `round(ratio * n)` ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratio: 0.7,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn train_count(&self, n: usize) -> usize {
        ((self.ratio * n as f64).round() as usize).min(n)
    }
}

/// Uniform random split. Both halves keep the relative order of `image_ids`.
pub fn split_dataset(image_ids: &[u64], spec: SplitSpec) -> Result<(Vec<u64>, Vec<u64>)> {
    if !(spec.ratio > 0.0 && spec.ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(spec.ratio));
    }
    if image_ids.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let mut seen = HashSet::with_capacity(image_ids.len());
    if let Some(&dup) = image_ids.iter().find(|&&id| !seen.insert(id)) {
        return Err(DatasetError::DuplicateId(dup));
    }

    let mut order: Vec<usize> = (0..image_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = spec.train_count(image_ids.len());
    let mut train_pos = order[..n_train].to_vec();
    let mut val_pos = order[n_train..].to_vec();
    train_pos.sort_unstable();
    val_pos.sort_unstable();
    Ok((
        train_pos.into_iter().map(|i| image_ids[i]).collect(),
        val_pos.into_iter().map(|i| image_ids[i]).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_of_111_images() {
        let ids: Vec<u64> = (1..=111).collect();
        let (train, val) = split_dataset(&ids, SplitSpec { ratio: 0.7, seed: 3 }).unwrap();
        assert_eq!((train.len(), val.len()), (78, 33));
    }

    #[test]
    fn deterministic_for_seed() {
        let ids: Vec<u64> = (1..=10).collect();
        let spec = SplitSpec { ratio: 0.7, seed: 42 };
        assert_eq!(split_dataset(&ids, spec).unwrap(), split_dataset(&ids, spec).unwrap());
    }

    #[test]
    fn single_id_goes_to_train() {
        let (train, val) = split_dataset(&[5], SplitSpec { ratio: 0.7, seed: 0 }).unwrap();
        assert_eq!(train, vec![5]);
        assert!(val.is_empty());
    }

    #[test]
    fn errors() {
        let spec = SplitSpec::default();
        assert!(matches!(split_dataset(&[], spec), Err(DatasetError::EmptyInput)));
        assert!(matches!(
            split_dataset(&[1, 2, 1], spec),
            Err(DatasetError::DuplicateId(1))
        ));
        assert!(matches!(
            split_dataset(&[1, 2], SplitSpec { ratio: 1.5, seed: 0 }),
            Err(DatasetError::InvalidRatio(_))
        ));
    }

    proptest! {
        #[test]
        fn partition_property(n in 1usize..=200, r in prop::sample::select(vec![0.5, 0.7, 0.9]), seed in any::<u64>()) {
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
            let (train, val) = split_dataset(&ids, SplitSpec { ratio: r, seed }).unwrap();
            prop_assert_eq!(train.len(), (r * n as f64).round() as usize);
            let mut all: Vec<u64> = train.iter().chain(&val).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, ids);
            let t: HashSet<_> = train.iter().collect();
            prop_assert!(val.iter().all(|v| !t.contains(v)));
        }
    }
}
