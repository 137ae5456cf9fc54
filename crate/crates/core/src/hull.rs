//! Planar quickhull.
//!
//! Only strict vertices are reported: points lying on a hull edge and later
//! copies of a duplicated point are excluded.

pub type Point = [f64; 2];

/// Twice the signed area of `(a, b, p)`; positive when `p` is left of `a → b`.
#[inline]
pub fn cross(a: Point, b: Point, p: Point) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Indices of the strict hull vertices, in counter-clockwise order starting
/// from the lowest-x point.
///
/// All-identical input yields one index; collinear input yields the two
/// extremes.
pub fn quickhull(points: &[Point]) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let lex = |i: usize| (points[i][0], points[i][1]);
    let mut lo = 0;
    let mut hi = 0;
    for i in 1..points.len() {
        if lex(i) < lex(lo) {
            lo = i;
        }
        if lex(i) > lex(hi) {
            hi = i;
        }
    }
    if points[lo] == points[hi] {
        return vec![lo];
    }
    let all: Vec<usize> = (0..points.len()).collect();
    let mut hull = vec![lo];
    // Below the lo → hi line going right, then above it coming back.
    let lower = outside(points, &all, hi, lo);
    expand(points, &lower, lo, hi, &mut hull);
    hull.push(hi);
    let upper = outside(points, &all, lo, hi);
    expand(points, &upper, hi, lo, &mut hull);
    hull
}

/// Candidates strictly right of `a → b`, i.e. strictly left of `b → a`.
fn outside(points: &[Point], candidates: &[usize], a: usize, b: usize) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&i| cross(points[a], points[b], points[i]) > 0.0)
        .collect()
}

/// Appends the vertices strictly between `a` and `b` (exclusive), walking the
/// side of `a → b` occupied by `candidates`.
fn expand(points: &[Point], candidates: &[usize], a: usize, b: usize, hull: &mut Vec<usize>) {
    if candidates.is_empty() {
        return;
    }
    // `candidates` lie strictly left of `b → a`. Ties in distance are broken
    // by position along `a → b`, so the pick is extreme, hence a vertex.
    let along = |i: usize| (points[i][0] - points[a][0]) * (points[b][0] - points[a][0])
        + (points[i][1] - points[a][1]) * (points[b][1] - points[a][1]);
    let key = |i: usize| (cross(points[b], points[a], points[i]), along(i));
    let mut far = candidates[0];
    let mut best = key(far);
    for &i in &candidates[1..] {
        let k = key(i);
        if k.0 > best.0 || (k.0 == best.0 && (k.1 > best.1 || (k.1 == best.1 && i < far))) {
            far = i;
            best = k;
        }
    }
    let left = outside(points, candidates, far, a);
    expand(points, &left, a, far, hull);
    hull.push(far);
    let right = outside(points, candidates, b, far);
    expand(points, &right, far, b, hull);
}

/// Hull vertex indices in ascending order.
pub fn hull_vertex_set(points: &[Point]) -> Vec<usize> {
    let mut v = quickhull(points);
    v.sort_unstable();
    v
}
