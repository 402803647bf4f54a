//! Size/accuracy Pareto frontier: smaller is better for size, larger for accuracy.

/// Indices of the non-dominated points, ordered by size then input order.
///
/// A point is dominated when another has size `<=` and accuracy `>=` with at
/// least one strict. Exact duplicates do not dominate each other. Points with a
/// NaN coordinate are ignored.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len())
        .filter(|&i| !points[i].0.is_nan() && !points[i].1.is_nan())
        .collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let size = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == size {
            j += 1;
        }
        let group = &order[i..j];
        let top = group.iter().map(|&g| points[g].1).fold(f64::NEG_INFINITY, f64::max);
        if top > best {
            keep.extend(group.iter().copied().filter(|&g| points[g].1 == top));
            best = top;
        }
        i = j;
    }
    keep
}

/// Reference O(n²) check used by tests and callers that want certainty.
pub fn is_dominated(points: &[(f64, f64)], i: usize) -> bool {
    let (s, a) = points[i];
    points
        .iter()
        .enumerate()
        .any(|(j, &(s2, a2))| j != i && s2 <= s && a2 >= a && (s2 < s || a2 > a))
}
