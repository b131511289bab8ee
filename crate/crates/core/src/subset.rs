use std::fmt;

use serde::{Deserialize, Serialize};

/// A sorted set of covariate indices naming one effect.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Subset(Vec<usize>);

impl Subset {
    pub fn new(mut items: Vec<usize>) -> Self {
        items.sort_unstable();
        items.dedup();
        Subset(items)
    }

    pub fn empty() -> Self {
        Subset(Vec::new())
    }

    pub fn single(i: usize) -> Self {
        Subset(vec![i])
    }

    pub fn pair(i: usize, j: usize) -> Self {
        Subset::new(vec![i, j])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn is_subset_of(&self, other: &[usize]) -> bool {
        self.0.iter().all(|i| other.contains(i))
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// All nonempty subsets of `items` with at most `max_size` elements, ordered by
/// size and then lexicographically.
pub fn subsets_up_to(items: &[usize], max_size: usize) -> Vec<Subset> {
    let mut sorted = items.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    let mut current = Vec::new();
    for size in 1..=max_size.min(sorted.len()) {
        combinations(&sorted, size, 0, &mut current, &mut out);
    }
    out
}

fn combinations(items: &[usize], size: usize, from: usize, current: &mut Vec<usize>, out: &mut Vec<Subset>) {
    if current.len() == size {
        out.push(Subset(current.clone()));
        return;
    }
    for k in from..items.len() {
        if items.len() - k < size - current.len() {
            break;
        }
        current.push(items[k]);
        combinations(items, size, k + 1, current, out);
        current.pop();
    }
}
