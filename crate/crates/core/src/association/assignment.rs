//! Maximum-weight bipartite matching on integer weights.
//!
//! Rectangular problems with missing edges are embedded in a square problem
//! where missing and padding edges weigh zero, then solved with the
//! shortest-augmenting-path Hungarian method in `O(n³)`.

/// Maximum-weight matching over non-negative integer weights. `None` entries
/// are missing edges and are never matched. Among optimal matchings the one
/// with the most present edges is returned. Result: for each row, the matched
/// column.
pub fn max_weight_matching(weights: &[Vec<Option<i64>>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.iter().map(|r| r.len()).max().unwrap_or(0);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    // secondary objective: one extra unit per present edge, scaled so it
    // never outweighs a unit of the primary objective
    let scale = n as i64 + 1;
    let mut w = vec![vec![0i64; n]; n];
    let mut max_w = 0i64;
    for (i, row) in weights.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if let Some(v) = e {
                assert!(*v >= 0, "matching weights must be non-negative");
                w[i][j] = v.checked_mul(scale).and_then(|x| x.checked_add(1)).expect("weight overflow");
                max_w = max_w.max(w[i][j]);
            }
        }
    }
    let cost: Vec<Vec<i64>> = w.iter().map(|r| r.iter().map(|x| max_w - x).collect()).collect();
    let assignment = hungarian_min_cost(&cost);
    (0..rows)
        .map(|i| {
            let j = assignment[i];
            (j < cols && weights[i].get(j).copied().flatten().is_some()).then_some(j)
        })
        .collect()
}

/// Minimum-cost perfect matching on a square matrix; returns the column for
/// each row.
fn hungarian_min_cost(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; column 0 is a virtual start
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}
