use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Train/validation/test partition of molecule ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    /// Checks that the three id lists are pairwise disjoint and duplicate-free.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (part, ids) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::invalid(format!(
                        "split `{}`: id `{id}` appears more than once (seen again in {part})",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles the validation ids of `original` and cuts them into `num_folds`
/// parts; fold `k` validates on part `k` and trains on the original training
/// ids plus the remaining parts. The first `len % num_folds` parts receive one
/// extra id. Test ids are carried over unchanged.
pub fn make_new_splits(original: &SplitSpec, num_folds: usize, seed: u64) -> Result<Vec<SplitSpec>> {
    original.validate()?;
    if num_folds == 0 {
        return Err(Error::invalid("number of folds must be at least 1"));
    }
    if num_folds > original.valid.len() {
        return Err(Error::invalid(format!(
            "{num_folds} folds requested but the validation set has only {} ids",
            original.valid.len()
        )));
    }
    let mut shuffled = original.valid.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = shuffled.len() / num_folds;
    let extra = shuffled.len() % num_folds;
    let mut parts = Vec::with_capacity(num_folds);
    let mut start = 0;
    for k in 0..num_folds {
        let size = base + usize::from(k < extra);
        parts.push(shuffled[start..start + size].to_vec());
        start += size;
    }

    Ok((0..num_folds)
        .map(|k| {
            let mut train = original.train.clone();
            for (j, part) in parts.iter().enumerate() {
                if j != k {
                    train.extend(part.iter().cloned());
                }
            }
            SplitSpec {
                name: format!("{}-fold{k}", original.name),
                train,
                valid: parts[k].clone(),
                test: original.test.clone(),
            }
        })
        .collect())
}
