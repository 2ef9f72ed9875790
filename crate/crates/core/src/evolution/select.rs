use serde::{Deserialize, Serialize};

/// Which end of the fitness ranking survives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectOrder {
    /// Smallest fitness first.
    Min,
    /// Largest fitness first.
    Max,
}

/// Indices of the `keep` best entries of `fitness`, best first.
///
/// Parents never re-enter: only the offspring pool is ranked. Ties go to
/// the lower index, i.e. earlier parent then earlier mutation.
pub fn select_survivors(fitness: &[f64], keep: usize, order: SelectOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fitness.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = match order {
            SelectOrder::Min => fitness[a].total_cmp(&fitness[b]),
            SelectOrder::Max => fitness[b].total_cmp(&fitness[a]),
        };
        ord.then(a.cmp(&b))
    });
    idx.truncate(keep);
    idx
}
