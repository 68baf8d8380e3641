use crate::{Error, Result};

/// Bijection from cluster index to class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMapping {
    pub perm: Vec<usize>,
    pub agreement: u64,
}

impl ClassMapping {
    pub fn map(&self, cluster: usize) -> usize {
        self.perm[cluster]
    }
}

/// `table[o][c]` counts samples in cluster `o` carrying label `c`.
pub fn contingency(cluster_of: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if cluster_of.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: cluster_of.len(), found: labels.len() });
    }
    let mut table = vec![vec![0u64; classes]; classes];
    for (&o, &c) in cluster_of.iter().zip(labels) {
        if o >= classes {
            return Err(Error::LabelOutOfRange { label: o, classes });
        }
        if c >= classes {
            return Err(Error::LabelOutOfRange { label: c, classes });
        }
        table[o][c] += 1;
    }
    Ok(table)
}

/// Minimum-cost perfect assignment of a square cost matrix by shortest
/// augmenting paths with potentials, O(n^3). Returns `row -> column` and the cost.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> (Vec<usize>, i64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0);
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based: column 0 is the virtual start
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = INF;
            let mut col1 = 0usize;
            for col in 1..=n {
                if !used[col] {
                    let reduced = cost[r - 1][col - 1] - u[r] - v[col];
                    if reduced < minv[col] {
                        minv[col] = reduced;
                        way[col] = col0;
                    }
                    if minv[col] < delta {
                        delta = minv[col];
                        col1 = col;
                    }
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        assignment[row_of_col[col] - 1] = col - 1;
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    (assignment, total)
}

fn max_agreement(table: &[Vec<u64>], rows: &[usize], cols: &[usize]) -> i64 {
    let cost: Vec<Vec<i64>> = rows.iter().map(|&r| cols.iter().map(|&c| -(table[r][c] as i64)).collect()).collect();
    -min_cost_assignment(&cost).1
}

/// The permutation `perm` maximizing `sum_o table[o][perm[o]]`. Among optimal
/// permutations the lexicographically smallest is returned.
pub fn hungarian_max_agreement(table: &[Vec<u64>]) -> Result<ClassMapping> {
    let n = table.len();
    if let Some(row) = table.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!("contingency row of length {} in a {n}x{n} table", row.len())));
    }
    if table.iter().flatten().any(|&c| c > i64::MAX as u64 / (n.max(1) as u64 * 4)) {
        return Err(Error::OutOfRange("contingency count too large".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let best = max_agreement(table, &all, &all);
    // fix rows in order, each to the smallest column that keeps the optimum reachable
    let mut perm = Vec::with_capacity(n);
    let mut free: Vec<usize> = all.clone();
    let mut so_far = 0i64;
    for row in 0..n {
        let rest_rows: Vec<usize> = (row + 1..n).collect();
        let pick = free
            .iter()
            .position(|&c| {
                let rest_cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
                so_far + table[row][c] as i64 + max_agreement(table, &rest_rows, &rest_cols) == best
            })
            .expect("an optimal completion exists");
        let col = free.remove(pick);
        so_far += table[row][col] as i64;
        perm.push(col);
    }
    debug_assert_eq!(so_far, best);
    Ok(ClassMapping { perm, agreement: best as u64 })
}

/// Hungarian matching from a table of signed counts, rejecting negative entries.
pub fn hungarian_from_signed(table: &[Vec<i64>]) -> Result<ClassMapping> {
    if table.iter().flatten().any(|&c| c < 0) {
        return Err(Error::OutOfRange("negative contingency entry".into()));
    }
    let unsigned: Vec<Vec<u64>> = table.iter().map(|r| r.iter().map(|&c| c as u64).collect()).collect();
    hungarian_max_agreement(&unsigned)
}
