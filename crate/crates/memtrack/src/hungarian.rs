//! Minimum-cost bipartite assignment (Jonker-Volgenant style shortest
//! augmenting paths, O(n^3)). Handles rectangular matrices by matching
//! min(rows, cols) pairs. Scan order is fixed, so ties resolve toward the
//! lowest row index, then the lowest column index, deterministically.

/// Solve `cost` (rows x cols, row-major) for a minimum-total-cost one-to-one
/// assignment of size min(rows, cols). Returns (row, col) pairs sorted by
/// row. All costs must be finite.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols, "cost matrix shape mismatch");
    assert!(cost.iter().all(|c| c.is_finite()), "costs must be finite");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transposed = rows > cols;
    let (n, m, c) = if transposed {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = cost[i * cols + j];
            }
        }
        (cols, rows, t)
    } else {
        (rows, cols, cost.to_vec())
    };

    // Dual potentials and column->row ownership, 1-based virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut owner = vec![usize::MAX; m + 1];

    for i in 0..n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c[i0 * m + (j - 1)] - u[i0 + 1] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    if owner[j] != usize::MAX {
                        u[owner[j] + 1] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == usize::MAX {
                break;
            }
        }
        // Augment along the alternating path.
        while j0 != 0 {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        }
    }

    let mut pairs = Vec::with_capacity(n);
    for j in 1..=m {
        if owner[j] != usize::MAX {
            let (r, cidx) = if transposed {
                (j - 1, owner[j])
            } else {
                (owner[j], j - 1)
            };
            pairs.push((r, cidx));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Total cost of an assignment on `cost`.
pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
}

/// Exhaustive minimum assignment cost over all permutations; usable as an
/// independent oracle for small matrices (min(rows, cols) <= ~8).
pub fn brute_force_min_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn recurse(cost: &[f64], cols: usize, row: usize, rows: usize, used: &mut Vec<bool>, picked: usize, need: usize) -> f64 {
        if picked == need {
            return 0.0;
        }
        if row == rows {
            return f64::INFINITY;
        }
        // Option: skip this row entirely (only legal if enough rows remain).
        let remaining_rows = rows - row - 1;
        let mut best = if remaining_rows >= need - picked {
            recurse(cost, cols, row + 1, rows, used, picked, need)
        } else {
            f64::INFINITY
        };
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                let c = cost[row * cols + j]
                    + recurse(cost, cols, row + 1, rows, used, picked + 1, need);
                if c < best {
                    best = c;
                }
                used[j] = false;
            }
        }
        best
    }
    let need = rows.min(cols);
    let mut used = vec![false; cols];
    recurse(cost, cols, 0, rows, &mut used, 0, need)
}
