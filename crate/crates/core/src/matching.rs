//! Distance-constrained one-to-one point matching.

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    // 1-based potentials and column owners; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
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
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

pub fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// One-to-one matching of `pred` to `gt` restricted to pairs within `radius`.
///
/// Maximises the number of matched pairs, then minimises their total
/// Euclidean distance; among equal-cost optima the lower prediction index
/// wins. Returns `(pred index, gt index)` sorted by prediction index.
pub fn match_points(pred: &[(f64, f64)], gt: &[(f64, f64)], radius: f64) -> Vec<(usize, usize)> {
    if pred.is_empty() || gt.is_empty() {
        return Vec::new();
    }
    // Any out-of-radius pair costs more than every feasible total, so the
    // optimum first maximises the count.
    let k = pred.len().min(gt.len()) as f64;
    let big = (k + 1.0) * (radius + 1.0) * 4.0;
    let tie = radius.max(1.0) * 1e-10 / (pred.len() as f64);
    let pair_cost = |p: usize, g: usize| {
        let d = distance(pred[p], gt[g]);
        if d <= radius {
            d + tie * p as f64
        } else {
            big
        }
    };
    let transposed = pred.len() > gt.len();
    let (rows, cols) = if transposed { (gt.len(), pred.len()) } else { (pred.len(), gt.len()) };
    let cost: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| if transposed { pair_cost(c, r) } else { pair_cost(r, c) })
                .collect()
        })
        .collect();
    let assign = hungarian(&cost);
    let mut out: Vec<(usize, usize)> = assign
        .into_iter()
        .enumerate()
        .map(|(r, c)| if transposed { (c, r) } else { (r, c) })
        .filter(|&(p, g)| distance(pred[p], gt[g]) <= radius)
        .collect();
    out.sort_unstable();
    out
}

/// Sum of Euclidean distances over a matching.
pub fn matching_cost(pred: &[(f64, f64)], gt: &[(f64, f64)], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(p, g)| distance(pred[p], gt[g])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_assignment() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&cost);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn exact_points_match_with_zero_cost() {
        let p = [(1.0, 2.0), (5.0, 5.0), (9.0, 1.0)];
        let m = match_points(&p, &p, 2.0);
        assert_eq!(m, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(matching_cost(&p, &p, &m), 0.0);
    }

    #[test]
    fn equidistant_tie_goes_to_lower_index() {
        let gt = [(5.0, 5.0)];
        let pred = [(7.0, 5.0), (3.0, 5.0)];
        assert_eq!(match_points(&pred, &gt, 6.0), vec![(0, 0)]);
        let pred = [(5.0, 3.0), (5.0, 7.0), (3.0, 5.0)];
        assert_eq!(match_points(&pred, &gt, 6.0), vec![(0, 0)]);
    }

    #[test]
    fn radius_excludes_far_pairs() {
        let gt = [(0.0, 0.0), (100.0, 0.0)];
        let pred = [(1.0, 0.0), (50.0, 0.0)];
        assert_eq!(match_points(&pred, &gt, 6.0), vec![(0, 0)]);
    }

    #[test]
    fn count_beats_distance() {
        // Greedy nearest would pair p0-g1 and strand g0.
        let gt = [(0.0, 0.0), (4.0, 0.0)];
        let pred = [(3.0, 0.0), (8.0, 0.0)];
        let m = match_points(&pred, &gt, 4.5);
        assert_eq!(m, vec![(0, 0), (1, 1)]);
    }
}
