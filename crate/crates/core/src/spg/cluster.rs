use crate::taskworld::Response;

use super::oracle::{EquivalenceOracle, OracleFailure};
use super::PolicySampleSet;

/// A partition of sample indices into equivalence groups, ordered by each
/// group's smallest member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterSet {
    pub groups: Vec<Vec<usize>>,
    /// Index into `groups` of the largest group; ties go to the earliest.
    pub largest: usize,
    pub n: usize,
}

impl ClusterSet {
    /// Build from groups; sorts members and groups into canonical order.
    pub fn from_groups(mut groups: Vec<Vec<usize>>) -> Self {
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.retain(|g| !g.is_empty());
        groups.sort_by_key(|g| g[0]);
        let n = groups.iter().map(Vec::len).sum();
        let mut largest = 0;
        for (i, g) in groups.iter().enumerate() {
            if g.len() > groups[largest].len() {
                largest = i;
            }
        }
        Self { groups, largest, n }
    }

    pub fn largest_group(&self) -> &[usize] {
        &self.groups[self.largest]
    }

    pub fn confidence(&self) -> f64 {
        self.largest_group().len() as f64 / self.n as f64
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Members outside the largest group, in index order.
    pub fn complement(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .groups
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != self.largest)
            .flat_map(|(_, g)| g.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Disjoint groups that cover `0..n` exactly once.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![false; self.n];
        for g in &self.groups {
            for &i in g {
                if i >= self.n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Greedy clustering: each response joins the first existing group whose
/// representative (its first member) is equivalent in both directions,
/// otherwise it opens a new group.
pub fn cluster(set: &PolicySampleSet, oracle: &dyn EquivalenceOracle) -> Result<ClusterSet, OracleFailure> {
    let ys = &set.responses;
    let mut groups: Vec<Vec<usize>> = Vec::new();
    'items: for (i, y) in ys.iter().enumerate() {
        for g in &mut groups {
            if oracle.equivalent(&set.instruction, &ys[g[0]].tokens, &y.tokens)? {
                g.push(i);
                continue 'items;
            }
        }
        groups.push(vec![i]);
    }
    Ok(ClusterSet::from_groups(groups))
}

/// Connected components of the all-pairs equivalence graph.
pub fn cluster_components(
    set: &PolicySampleSet,
    oracle: &dyn EquivalenceOracle,
) -> Result<ClusterSet, OracleFailure> {
    let ys: &[Response] = &set.responses;
    let n = ys.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if oracle.equivalent(&set.instruction, &ys[i].tokens, &ys[j].tokens)? {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = root(&mut parent, i);
        groups[r].push(i);
    }
    Ok(ClusterSet::from_groups(groups))
}
