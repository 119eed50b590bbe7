//! P×K mini-batch sampling.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};

/// Utterance indices grouped by class, classes in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    pub classes: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl ClassIndex {
    /// Groups `items` (utterance index, class id) by class.
    pub fn new(items: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (item, class) in items {
            map.entry(class).or_default().push(item);
        }
        let (classes, members) = map.into_iter().unzip();
        Self { classes, members }
    }

    pub fn num_items(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    /// Errors unless at least `p` classes have `k` or more utterances.
    pub fn check(&self, p: usize, k: usize) -> Result<()> {
        let eligible = self.members.iter().filter(|m| m.len() >= k).count();
        if eligible < p {
            bail!(Config, "need {} classes with at least {} utterances, corpus has {}", p, k, eligible);
        }
        Ok(())
    }
}

/// `P` distinct classes, then `K` distinct utterances of each, all without
/// replacement. Returns `(utterance index, class id)` grouped by class.
pub fn sample_batch<R: Rng>(index: &ClassIndex, p: usize, k: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    index.check(p, k)?;
    let eligible: Vec<usize> = (0..index.classes.len()).filter(|&c| index.members[c].len() >= k).collect();
    let mut out = Vec::with_capacity(p * k);
    for c in rand::seq::index::sample(rng, eligible.len(), p) {
        let class = eligible[c];
        let members = &index.members[class];
        for u in rand::seq::index::sample(rng, members.len(), k) {
            out.push((members[u], index.classes[class]));
        }
    }
    Ok(out)
}
