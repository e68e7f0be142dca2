//! Exact linear assignment for aligning pseudo-labels to ground-truth
//! classes: maximize the total matched count over injective mappings.
//!
//! The solver pads rectangular inputs to a square with zero-count dummies
//! and among all maximizing assignments returns the lexicographically
//! smallest one (rows in order, each taking the smallest feasible column),
//! so the output is deterministic under ties.

/// Minimum-cost square assignment, O(n³) shortest augmenting paths with
/// integer potentials. Returns (assigned column per row, total cost).
fn solve_min_square(cost: &[Vec<i64>]) -> (Vec<usize>, i64) {
    let n = cost.len();
    // 1-based potentials, standard formulation.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
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

    let mut assignment = vec![0usize; n];
    let mut total = 0i64;
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
            total += cost[p[j] - 1][j - 1];
        }
    }
    (assignment, total)
}

/// Optimal value of the assignment restricted to `rows` × `cols`
/// (index lists into the padded matrix).
fn solve_min_subset(cost: &[Vec<i64>], rows: &[usize], cols: &[usize]) -> i64 {
    if rows.is_empty() {
        return 0;
    }
    let sub: Vec<Vec<i64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
        .collect();
    solve_min_square(&sub).1
}

/// Maximum-count assignment of pseudo classes (rows) to ground-truth
/// classes (columns). Entry `counts[p][g]` is the number of points carrying
/// pseudo-label p and true label g. Pseudo classes matched to a padding
/// dummy come back as `None`.
pub fn hungarian_align(counts: &[Vec<u64>]) -> Vec<Option<usize>> {
    let k_pred = counts.len();
    if k_pred == 0 {
        return Vec::new();
    }
    let k_gt = counts[0].len();
    if k_gt == 0 {
        return vec![None; k_pred];
    }
    let dim = k_pred.max(k_gt);

    // Negate counts so minimization maximizes the match; dummies cost 0.
    let mut cost = vec![vec![0i64; dim]; dim];
    for (p, row) in counts.iter().enumerate() {
        assert_eq!(row.len(), k_gt, "ragged confusion matrix");
        for (g, &c) in row.iter().enumerate() {
            cost[p][g] = -(c as i64);
        }
    }

    let best_total = solve_min_square(&cost).1;

    // Fix rows greedily: row 0 takes the smallest column that still admits
    // an optimal completion, then row 1, and so on. This is exactly the
    // lexicographically smallest optimal assignment.
    let mut remaining_cols: Vec<usize> = (0..dim).collect();
    let mut fixed_cost = 0i64;
    let mut assignment = vec![0usize; dim];
    for row in 0..dim {
        let rest_rows: Vec<usize> = (row + 1..dim).collect();
        let mut chosen = None;
        for (ci, &col) in remaining_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = remaining_cols
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != ci)
                .map(|(_, &c)| c)
                .collect();
            let rest = solve_min_subset(&cost, &rest_rows, &rest_cols);
            if fixed_cost + cost[row][col] + rest == best_total {
                chosen = Some((ci, col));
                break;
            }
        }
        let (ci, col) = chosen.expect("an optimal completion always exists");
        fixed_cost += cost[row][col];
        assignment[row] = col;
        remaining_cols.remove(ci);
    }

    assignment
        .into_iter()
        .take(k_pred)
        .map(|col| (col < k_gt).then_some(col))
        .collect()
}

/// Exhaustive-search reference: enumerates permutations of the padded
/// square in lexicographic order and keeps the first maximizer. Usable for
/// dimensions up to about 8.
pub fn hungarian_align_brute_force(counts: &[Vec<u64>]) -> Vec<Option<usize>> {
    let k_pred = counts.len();
    if k_pred == 0 {
        return Vec::new();
    }
    let k_gt = counts[0].len();
    if k_gt == 0 {
        return vec![None; k_pred];
    }
    let dim = k_pred.max(k_gt);
    assert!(dim <= 9, "brute force limited to small matrices");

    let gain = |p: usize, g: usize| -> u64 {
        if p < k_pred && g < k_gt {
            counts[p][g]
        } else {
            0
        }
    };

    let mut best: Option<(u64, Vec<usize>)> = None;
    let mut perm = Vec::with_capacity(dim);
    let mut used = vec![false; dim];
    fn rec(
        dim: usize,
        perm: &mut Vec<usize>,
        used: &mut Vec<bool>,
        gain: &dyn Fn(usize, usize) -> u64,
        best: &mut Option<(u64, Vec<usize>)>,
    ) {
        if perm.len() == dim {
            let total: u64 = perm.iter().enumerate().map(|(p, &g)| gain(p, g)).sum();
            // Strict improvement keeps the first (lexicographically
            // smallest) maximizer.
            if best.as_ref().map_or(true, |(t, _)| total > *t) {
                *best = Some((total, perm.clone()));
            }
            return;
        }
        for g in 0..dim {
            if !used[g] {
                used[g] = true;
                perm.push(g);
                rec(dim, perm, used, gain, best);
                perm.pop();
                used[g] = false;
            }
        }
    }
    rec(dim, &mut perm, &mut used, &gain, &mut best);

    best.unwrap()
        .1
        .into_iter()
        .take(k_pred)
        .map(|g| (g < k_gt).then_some(g))
        .collect()
}
