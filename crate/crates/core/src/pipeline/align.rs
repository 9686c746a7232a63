use std::collections::BTreeSet;

use super::{PairedLevel, PairedSets};
use crate::error::{Error, Result};

/// Aligned sets plus the number of passes the fixed-point loop took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignOutcome {
    pub sets: PairedSets,
    pub iterations: usize,
}

fn level_union(level: &PairedLevel) -> BTreeSet<String> {
    level
        .captions
        .iter()
        .flat_map(|c| c.images.iter().cloned())
        .collect()
}

/// Intersection over levels of each level's union of image sets.
pub fn common_images(sets: &PairedSets) -> BTreeSet<String> {
    let mut levels = sets.levels.iter();
    let Some(first) = levels.next() else {
        return BTreeSet::new();
    };
    levels.fold(level_union(first), |acc, l| {
        let u = level_union(l);
        acc.intersection(&u).cloned().collect()
    })
}

/// Union of every image set at every level.
pub fn union_images(sets: &PairedSets) -> BTreeSet<String> {
    sets.levels.iter().flat_map(level_union).collect()
}

/// Restricts every caption's set to the images shared by all levels, drops
/// captions that fall below `floor`, and repeats until the shared pool stops
/// shrinking. Levels are visited in ascending order and captions in index
/// order.
pub fn align(paired: &PairedSets, floor: usize) -> Result<AlignOutcome> {
    let mut sets = paired.clone();
    if let Some(l) = sets.levels.iter().find(|l| l.captions.is_empty()) {
        return Err(Error::AlignmentCollapsed(l.level));
    }
    let mut common = common_images(&sets);
    let mut iterations = 0;
    loop {
        iterations += 1;
        for level in &mut sets.levels {
            for c in &mut level.captions {
                c.images.retain(|id| common.contains(id));
            }
            level.captions.retain(|c| c.images.len() >= floor);
            if level.captions.is_empty() {
                return Err(Error::AlignmentCollapsed(level.level));
            }
        }
        let next = common_images(&sets);
        let done = next.len() == common.len();
        common = next;
        if done {
            break;
        }
    }
    Ok(AlignOutcome { sets, iterations })
}
