//! Non-learned geometric kernels: furthest point sampling, ball query,
//! neighborhood grouping, Chamfer distance, and the folding grid.
//!
//! Everything here is a pure function with canonical tie-breaking, so the
//! encoder built on top is a function of the point *set* rather than the
//! point order. Distance comparisons use squared distances throughout
//! (`d² ≤ r²` for radius tests); tests and oracles use the same predicate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed-radius neighborhood: `centroid` indexes the centroid array the
/// query ran with, `neighbors` index the source cloud. Exactly K entries,
/// padded by repeating the first qualifying neighbor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub centroid: usize,
    pub neighbors: Vec<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ChamferMode {
    /// Both directional sums, unnormalized.
    Sum,
    /// Each directional sum divided by its own set size; comparable across
    /// point counts, used by the training loss.
    Mean,
}

#[derive(Clone, Debug)]
pub struct ChamferResult {
    pub value: f64,
    /// For each point of `a`, the index of its nearest neighbor in `b`.
    pub nn_ab: Vec<u32>,
    /// For each point of `b`, the index of its nearest neighbor in `a`.
    pub nn_ba: Vec<u32>,
}

/// G×G lattice over [−0.5, 0.5]², row-major with the first axis slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldingGrid {
    pub side: usize,
    pub points: Vec<[f64; 2]>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn lex_less(a: &[f64; 3], b: &[f64; 3]) -> bool {
    (a[0], a[1], a[2]) < (b[0], b[1], b[2])
}

/// Furthest point sampling with canonical seeding and tie-breaks.
///
/// Starts from the lexicographically smallest point and greedily picks the
/// point maximizing the squared distance to the selected set. Ties break by
/// lexicographically smaller coordinates, then lower index, so the output
/// is invariant to input permutation for points in general position.
/// Incremental min-distance bookkeeping keeps this O(N·k).
pub fn fps(points: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!(
            "fps: k = {k} outside [1, {n}]"
        )));
    }
    let mut start = 0usize;
    for (i, p) in points.iter().enumerate().skip(1) {
        if lex_less(p, &points[start]) {
            start = i;
        }
    }
    let mut selected = Vec::with_capacity(k);
    selected.push(start);
    let mut chosen = vec![false; n];
    chosen[start] = true;
    let mut min_d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[start])).collect();

    while selected.len() < k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(j) => {
                    if min_d2[i] > min_d2[j]
                        || (min_d2[i] == min_d2[j] && lex_less(&points[i], &points[j]))
                    {
                        best = Some(i);
                    }
                }
            }
        }
        let pick = best.expect("k ≤ n leaves an unselected point");
        chosen[pick] = true;
        selected.push(pick);
        for i in 0..n {
            let d = dist2(&points[i], &points[pick]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(selected)
}

/// Fixed-radius neighbor search: for each centroid, the first `k` source
/// points in ascending index order with `d² ≤ r²`; fewer than `k` hits pad
/// by repeating the first hit. A centroid with no source point in radius is
/// an error — callers draw centroids from the source set (FPS subsets),
/// where the centroid itself always qualifies at distance 0.
pub fn ball_query(
    source: &[[f64; 3]],
    centroids: &[[f64; 3]],
    r: f64,
    k: usize,
) -> Result<Vec<Neighborhood>> {
    if r <= 0.0 || k == 0 {
        return Err(Error::Contract(format!(
            "ball_query: need r > 0 and k ≥ 1, got r = {r}, k = {k}"
        )));
    }
    let r2 = r * r;
    let mut out = Vec::with_capacity(centroids.len());
    for (ci, c) in centroids.iter().enumerate() {
        let mut neighbors = Vec::with_capacity(k);
        for (i, p) in source.iter().enumerate() {
            if dist2(p, c) <= r2 {
                neighbors.push(i);
                if neighbors.len() == k {
                    break;
                }
            }
        }
        match neighbors.first().copied() {
            None => {
                return Err(Error::Degenerate(format!(
                    "ball_query: centroid {ci} has no source point within r = {r}"
                )))
            }
            Some(first) => {
                while neighbors.len() < k {
                    neighbors.push(first);
                }
            }
        }
        out.push(Neighborhood {
            centroid: ci,
            neighbors,
        });
    }
    Ok(out)
}

/// Groups neighborhoods into `[S, K, 3+C]`: per neighbor, relative
/// coordinates (neighbor − centroid) concatenated with the neighbor's
/// feature vector. `feats: None` is the C = 0 first level.
pub fn group_relative(
    source: &[[f64; 3]],
    feats: Option<&Tensor>,
    centroids: &[[f64; 3]],
    hoods: &[Neighborhood],
) -> Result<Tensor> {
    let c = match feats {
        None => 0,
        Some(f) => {
            if f.rank() != 2 || f.shape[0] != source.len() {
                return Err(Error::Contract(format!(
                    "group_relative: features {:?} misaligned with {} source points",
                    f.shape,
                    source.len()
                )));
            }
            f.shape[1]
        }
    };
    let s = hoods.len();
    let k = hoods.first().map_or(0, |h| h.neighbors.len());
    let mut data = Vec::with_capacity(s * k * (3 + c));
    for hood in hoods {
        if hood.neighbors.len() != k {
            return Err(Error::Contract("group_relative: ragged neighborhoods".into()));
        }
        let cen = centroids
            .get(hood.centroid)
            .ok_or_else(|| Error::Contract("group_relative: centroid out of range".into()))?;
        for &ni in &hood.neighbors {
            let p = source
                .get(ni)
                .ok_or_else(|| Error::Contract("group_relative: neighbor out of range".into()))?;
            data.push(p[0] - cen[0]);
            data.push(p[1] - cen[1]);
            data.push(p[2] - cen[2]);
            if let Some(f) = feats {
                data.extend_from_slice(f.row(ni));
            }
        }
    }
    Tensor::new(vec![s, k, 3 + c], data)
}

/// Brute-force nearest neighbors of each `from` point in `to`.
/// Ties by squared distance go to the lowest index.
fn nn_brute(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<u32> {
    from.iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_d = dist2(p, &to[0]);
            for (i, q) in to.iter().enumerate().skip(1) {
                let d = dist2(p, q);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Uniform spatial hash grid over a fixed point set, supporting exact
/// nearest-neighbor queries via expanding shell search. Cell size is the
/// bounding-box extent divided by ∛n, approximating the mean spacing of
/// surface-sampled clouds closely enough for the shells to stay small.
struct NnGrid<'a> {
    pts: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    bins: Vec<Vec<u32>>,
}

impl<'a> NnGrid<'a> {
    fn build(pts: &'a [[f64; 3]]) -> Self {
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
        let m = (pts.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / m } else { 1.0 };
        let mut dims = [1usize; 3];
        for a in 0..3 {
            dims[a] = ((hi[a] - lo[a]) / cell).floor() as usize + 1;
        }
        let mut grid = NnGrid {
            pts,
            origin: lo,
            cell,
            dims,
            bins: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
        };
        for (i, p) in pts.iter().enumerate() {
            let slot = grid.flat(grid.cell_of(p));
            grid.bins[slot].push(i as u32);
        }
        grid
    }

    fn cell_of(&self, p: &[f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = (f.max(0.0) as usize).min(self.dims[a] - 1);
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Exact nearest neighbor of `q`, lowest index on distance ties.
    fn nearest(&self, q: &[f64; 3]) -> u32 {
        let cq = self.cell_of(q);
        let mut best_d = f64::INFINITY;
        let mut best_i = u32::MAX;
        let max_ring = self.dims[0].max(self.dims[1]).max(self.dims[2]);
        for ring in 0..=max_ring {
            if ring >= 2 {
                // Any cell at Chebyshev ring R is at least (R−1)·cell away.
                let bound = (ring as f64 - 1.0) * self.cell;
                if best_d <= bound * bound {
                    break;
                }
            }
            self.for_shell_cells(cq, ring, |bin| {
                for &i in bin {
                    let d = dist2(q, &self.pts[i as usize]);
                    if d < best_d || (d == best_d && i < best_i) {
                        best_d = d;
                        best_i = i;
                    }
                }
            });
        }
        debug_assert!(best_i != u32::MAX);
        best_i
    }

    fn for_shell_cells(&self, c: [usize; 3], ring: usize, mut f: impl FnMut(&[u32])) {
        let r = ring as isize;
        let lo = |a: usize| (c[a] as isize - r).max(0);
        let hi = |a: usize| (c[a] as isize + r).min(self.dims[a] as isize - 1);
        for x in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for z in lo(2)..=hi(2) {
                    let on_shell = (x - c[0] as isize).abs() == r
                        || (y - c[1] as isize).abs() == r
                        || (z - c[2] as isize).abs() == r;
                    if on_shell {
                        let bin = &self.bins[self.flat([x as usize, y as usize, z as usize])];
                        if !bin.is_empty() {
                            f(bin);
                        }
                    }
                }
            }
        }
    }
}

fn nn_grid(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<u32> {
    let grid = NnGrid::build(to);
    from.iter().map(|p| grid.nearest(p)).collect()
}

fn chamfer_from_maps(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    mode: ChamferMode,
    nn_ab: Vec<u32>,
    nn_ba: Vec<u32>,
) -> ChamferResult {
    let sum_ab: f64 = a
        .iter()
        .zip(&nn_ab)
        .map(|(p, &j)| dist2(p, &b[j as usize]).sqrt())
        .sum();
    let sum_ba: f64 = b
        .iter()
        .zip(&nn_ba)
        .map(|(q, &j)| dist2(q, &a[j as usize]).sqrt())
        .sum();
    let value = match mode {
        ChamferMode::Sum => sum_ab + sum_ba,
        ChamferMode::Mean => sum_ab / a.len() as f64 + sum_ba / b.len() as f64,
    };
    ChamferResult { value, nn_ab, nn_ba }
}

fn check_nonempty(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("chamfer: empty point set".into()));
    }
    Ok(())
}

/// Unsquared-L2 Chamfer distance (both directions) with nearest-neighbor
/// index maps; grid-accelerated and exactly equal to [`chamfer_brute`].
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]], mode: ChamferMode) -> Result<ChamferResult> {
    check_nonempty(a, b)?;
    Ok(chamfer_from_maps(a, b, mode, nn_grid(a, b), nn_grid(b, a)))
}

/// O(A·B) reference implementation, kept as the oracle and for benchmarks.
pub fn chamfer_brute(a: &[[f64; 3]], b: &[[f64; 3]], mode: ChamferMode) -> Result<ChamferResult> {
    check_nonempty(a, b)?;
    Ok(chamfer_from_maps(a, b, mode, nn_brute(a, b), nn_brute(b, a)))
}

/// Uniform G×G lattice spanning [−0.5, 0.5]² inclusive.
///
/// Coordinates are (2t − (G−1)) / (2(G−1)): integer numerators over one
/// denominator, so negation symmetry (reversing either axis) is exact in
/// floating point.
pub fn folding_grid(g: usize) -> Result<FoldingGrid> {
    if g < 2 {
        return Err(Error::Contract(format!("folding_grid: side {g} < 2")));
    }
    let coord = |t: usize| (2.0 * t as f64 - (g - 1) as f64) / (2.0 * (g - 1) as f64);
    let mut points = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            points.push([coord(i), coord(j)]);
        }
    }
    Ok(FoldingGrid { side: g, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    /// O(N²·k) reference: recomputes min distances from scratch each round.
    fn fps_brute(points: &[[f64; 3]], k: usize) -> Vec<usize> {
        let n = points.len();
        let mut start = 0;
        for i in 1..n {
            if lex_less(&points[i], &points[start]) {
                start = i;
            }
        }
        let mut sel = vec![start];
        while sel.len() < k {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..n {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| dist2(&points[i], &points[s]))
                    .fold(f64::INFINITY, f64::min);
                best = match best {
                    None => Some((i, d)),
                    Some((j, dj)) => {
                        if d > dj || (d == dj && lex_less(&points[i], &points[j])) {
                            Some((i, d))
                        } else {
                            Some((j, dj))
                        }
                    }
                };
            }
            sel.push(best.unwrap().0);
        }
        sel
    }

    #[test]
    fn fps_hand_case_on_a_line() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.4, 0.0, 0.0],
            [2.0, 0.0, 0.0],
        ];
        assert_eq!(fps(&pts, 3).unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn fps_k_equals_n_starts_at_lexicographic_minimum() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 5.0, 0.0], [0.0, 0.0, 0.0]];
        let sel = fps(&pts, 3).unwrap();
        assert_eq!(sel[0], 1);
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn fps_rejects_k_out_of_range() {
        let pts = [[0.0; 3]];
        assert!(fps(&pts, 0).is_err());
        assert!(fps(&pts, 2).is_err());
    }

    #[test]
    fn fps_matches_brute_force_on_random_clouds() {
        let mut rng = crate::rng::seeded_rng(11, crate::rng::Stream::Bench, 0);
        for _ in 0..25 {
            let n = rng.gen_range(2..64);
            let k = rng.gen_range(1..=n);
            let pts = random_cloud(&mut rng, n);
            assert_eq!(fps(&pts, k).unwrap(), fps_brute(&pts, k));
        }
    }

    #[test]
    fn fps_is_permutation_invariant_in_general_position() {
        let mut rng = crate::rng::seeded_rng(12, crate::rng::Stream::Bench, 0);
        let pts = random_cloud(&mut rng, 40);
        let sel: Vec<[f64; 3]> = fps(&pts, 10).unwrap().iter().map(|&i| pts[i]).collect();
        let mut perm = pts.clone();
        perm.reverse();
        let sel_p: Vec<[f64; 3]> = fps(&perm, 10).unwrap().iter().map(|&i| perm[i]).collect();
        assert_eq!(sel, sel_p);
    }

    #[test]
    fn ball_query_pads_isolated_centroid_with_itself() {
        let source = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let hoods = ball_query(&source, &[[10.0, 0.0, 0.0]], 0.5, 4).unwrap();
        assert_eq!(hoods[0].neighbors, vec![1, 1, 1, 1]);
    }

    #[test]
    fn ball_query_takes_first_k_by_ascending_index() {
        let source = [
            [0.1, 0.0, 0.0],
            [0.0, 0.1, 0.0],
            [0.0, 0.0, 0.1],
            [0.05, 0.05, 0.0],
        ];
        let hoods = ball_query(&source, &[[0.0, 0.0, 0.0]], 1.0, 2).unwrap();
        assert_eq!(hoods[0].neighbors, vec![0, 1]);
    }

    #[test]
    fn ball_query_matches_brute_force_filter() {
        let mut rng = crate::rng::seeded_rng(13, crate::rng::Stream::Bench, 0);
        for _ in 0..25 {
            let n = rng.gen_range(4..128);
            let pts = random_cloud(&mut rng, n);
            let r = rng.gen_range(0.2..1.0);
            let k = rng.gen_range(1..12);
            let centroids: Vec<[f64; 3]> = pts.iter().take(8).copied().collect();
            let hoods = ball_query(&pts, &centroids, r, k).unwrap();
            for (ci, hood) in hoods.iter().enumerate() {
                let q: Vec<usize> = (0..n)
                    .filter(|&i| dist2(&pts[i], &centroids[ci]) <= r * r)
                    .take(k)
                    .collect();
                let mut want = q.clone();
                while want.len() < k {
                    want.push(q[0]);
                }
                assert_eq!(hood.neighbors, want);
                for &i in &hood.neighbors {
                    assert!(dist2(&pts[i], &centroids[ci]) <= r * r);
                }
            }
        }
    }

    #[test]
    fn group_relative_is_translation_invariant_and_zero_at_centroid() {
        let src = [[0.5, 0.5, 0.5], [1.0, 0.5, 0.5]];
        let hoods = ball_query(&src, &src, 1.0, 2).unwrap();
        let g1 = group_relative(&src, None, &src, &hoods).unwrap();
        assert_eq!(g1.shape, vec![2, 2, 3]);
        assert_eq!(&g1.data[0..3], &[0.0, 0.0, 0.0]);
        let moved: Vec<[f64; 3]> = src.iter().map(|p| [p[0] + 3.0, p[1] - 2.0, p[2]]).collect();
        let hoods2 = ball_query(&moved, &moved, 1.0, 2).unwrap();
        let g2 = group_relative(&moved, None, &moved, &hoods2).unwrap();
        assert_eq!(g1.data, g2.data);
    }

    #[test]
    fn chamfer_hand_case() {
        let a = [[0.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let sum = chamfer(&a, &b, ChamferMode::Sum).unwrap();
        assert!((sum.value - 3.0).abs() < 1e-12);
        let mean = chamfer(&a, &b, ChamferMode::Mean).unwrap();
        assert!((mean.value - 2.0).abs() < 1e-12);
        assert_eq!(sum.nn_ab, vec![0]);
        assert_eq!(sum.nn_ba, vec![0, 0]);
    }

    #[test]
    fn chamfer_of_identical_sets_is_zero_with_identity_maps() {
        let mut rng = crate::rng::seeded_rng(14, crate::rng::Stream::Bench, 0);
        let a = random_cloud(&mut rng, 60);
        let res = chamfer(&a, &a, ChamferMode::Sum).unwrap();
        assert_eq!(res.value, 0.0);
        let identity: Vec<u32> = (0..60).collect();
        assert_eq!(res.nn_ab, identity);
        assert_eq!(res.nn_ba, identity);
    }

    #[test]
    fn chamfer_is_symmetric_in_its_arguments() {
        let mut rng = crate::rng::seeded_rng(15, crate::rng::Stream::Bench, 0);
        let a = random_cloud(&mut rng, 33);
        let b = random_cloud(&mut rng, 71);
        for mode in [ChamferMode::Sum, ChamferMode::Mean] {
            let ab = chamfer(&a, &b, mode).unwrap().value;
            let ba = chamfer(&b, &a, mode).unwrap().value;
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn accelerated_chamfer_matches_brute_force() {
        let mut rng = crate::rng::seeded_rng(16, crate::rng::Stream::Bench, 0);
        for _ in 0..20 {
            let na = rng.gen_range(1..200);
            let nb = rng.gen_range(1..200);
            let a = random_cloud(&mut rng, na);
            let b = random_cloud(&mut rng, nb);
            let fast = chamfer(&a, &b, ChamferMode::Sum).unwrap();
            let slow = chamfer_brute(&a, &b, ChamferMode::Sum).unwrap();
            assert!((fast.value - slow.value).abs() < 1e-12);
            assert_eq!(fast.nn_ab, slow.nn_ab);
            assert_eq!(fast.nn_ba, slow.nn_ba);
        }
    }

    #[test]
    fn chamfer_handles_degenerate_coplanar_and_duplicate_clouds() {
        let a: Vec<[f64; 3]> = (0..50).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let mut b = a.clone();
        b.extend_from_slice(&a); // duplicates: ties must pick lowest index
        let fast = chamfer(&a, &b, ChamferMode::Mean).unwrap();
        let slow = chamfer_brute(&a, &b, ChamferMode::Mean).unwrap();
        assert_eq!(fast.value, slow.value);
        assert_eq!(fast.nn_ab, slow.nn_ab);
        assert_eq!(fast.nn_ba, slow.nn_ba);
    }

    #[test]
    fn chamfer_rejects_empty_sets() {
        let a = [[0.0; 3]];
        assert!(chamfer(&a, &[], ChamferMode::Sum).is_err());
        assert!(chamfer(&[], &a, ChamferMode::Sum).is_err());
    }

    #[test]
    fn folding_grid_examples_and_symmetry() {
        let g2 = folding_grid(2).unwrap();
        assert_eq!(
            g2.points,
            vec![[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]]
        );
        let g32 = folding_grid(32).unwrap();
        assert_eq!(g32.points.len(), 1024);
        // Negation symmetry is exact: reversing an axis index negates it.
        let g = folding_grid(16).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let p = g.points[i * 16 + j];
                let q = g.points[(15 - i) * 16 + j];
                assert_eq!(p[0], -q[0]);
                assert_eq!(p[1], q[1]);
            }
        }
        for p in &g.points {
            assert!(p[0] >= -0.5 && p[0] <= 0.5 && p[1] >= -0.5 && p[1] <= 0.5);
        }
        assert!(folding_grid(1).is_err());
    }
}
