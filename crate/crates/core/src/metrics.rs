//! Evaluation of an abstraction against its reference shape: Chamfer and Earth
//! Mover's distances between scanned surface points, Voxel-IoU of the interiors,
//! the overlap rate of the primitives and the primitive count.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::Abstraction;
use crate::grid::TsdfGrid;
use crate::kdtree::KdTree;
use crate::superquadric::{Prepared, Superquadric};

/// Points compared by the Chamfer distance.
pub const DEFAULT_SCAN_POINTS: usize = 10_000;
/// Points per side of the exact assignment behind the Earth Mover's distance.
pub const EMD_POINTS: usize = 1024;

/// A cubic sampling lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub resolution: usize,
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
}

impl Lattice {
    pub fn of(grid: &TsdfGrid) -> Self {
        Self {
            resolution: grid.resolution,
            origin: grid.origin,
            voxel_size: grid.voxel_size,
        }
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.resolution == 0
    }

    #[inline]
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin + Vector3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    /// Inclusive index range covering the world box `[lo, hi]`, if it meets the lattice.
    fn index_range(&self, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<([usize; 3], [usize; 3])> {
        let n = self.resolution as f64;
        let mut a = [0usize; 3];
        let mut b = [0usize; 3];
        for k in 0..3 {
            let l = ((lo[k] - self.origin[k]) / self.voxel_size).ceil().max(0.0);
            let h = ((hi[k] - self.origin[k]) / self.voxel_size).floor().min(n - 1.0);
            if l > h {
                return None;
            }
            a[k] = l as usize;
            b[k] = h as usize;
        }
        Some((a, b))
    }
}

/// Number of primitives whose interior (`srdf < 0`) contains each lattice point.
pub fn coverage_counts(primitives: &[Superquadric], lattice: &Lattice) -> Vec<u16> {
    let n = lattice.resolution;
    let mut counts = vec![0u16; lattice.len()];
    for sq in primitives {
        let bb = sq.world_aabb(0.0);
        let Some((lo, hi)) = lattice.index_range(&bb.min, &bb.max) else {
            continue;
        };
        let prep = Prepared::new(sq);
        counts
            .par_chunks_mut(n * n)
            .enumerate()
            .filter(|(z, _)| (lo[2]..=hi[2]).contains(z))
            .for_each(|(z, slab)| {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        if prep.srdf(&lattice.center(x, y, z)) < 0.0 {
                            slab[x + n * y] = slab[x + n * y].saturating_add(1);
                        }
                    }
                }
            });
    }
    counts
}

/// Interior IoU between the reference grid and the union of the primitives on
/// the reference lattice.
pub fn voxel_iou(reference: &TsdfGrid, primitives: &[Superquadric]) -> f64 {
    let counts = coverage_counts(primitives, &Lattice::of(reference));
    iou_from_counts(reference, &counts)
}

fn iou_from_counts(reference: &TsdfGrid, counts: &[u16]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (v, c) in reference.values.iter().zip(counts) {
        let a = *v < 0.0;
        let b = *c > 0;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean number of primitives covering each covered lattice point; `None` when
/// no point is covered.
pub fn overlap_rate(primitives: &[Superquadric], lattice: &Lattice) -> Option<f64> {
    overlap_from_counts(&coverage_counts(primitives, lattice))
}

fn overlap_from_counts(counts: &[u16]) -> Option<f64> {
    let (total, covered) = counts
        .iter()
        .filter(|&&c| c > 0)
        .fold((0u64, 0u64), |(t, k), &c| (t + c as u64, k + 1));
    (covered > 0).then(|| total as f64 / covered as f64)
}

/// Symmetric mean nearest-neighbor distance.
pub fn chamfer(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> f64 {
    if p.is_empty() || q.is_empty() {
        return f64::NAN;
    }
    0.5 * (mean_nearest(p, q) + mean_nearest(q, p))
}

fn mean_nearest(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let tree = KdTree::new(to);
    let d: Vec<f64> = from.par_iter().map(|x| tree.nearest(x).unwrap().1.sqrt()).collect();
    d.iter().sum::<f64>() / from.len() as f64
}

/// Mean matched distance of the optimal one-to-one assignment between seeded
/// subsamples of at most [`EMD_POINTS`] points from each set.
pub fn emd(p: &[Vector3<f64>], q: &[Vector3<f64>], seed: u64) -> f64 {
    let m = EMD_POINTS.min(p.len()).min(q.len());
    if m == 0 {
        return f64::NAN;
    }
    let a = subsample(p, m, seed);
    let b = subsample(q, m, seed.wrapping_add(1));
    let cost: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| (x - y).norm())).collect();
    let assignment = min_cost_assignment(&cost, m, m);
    assignment.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum::<f64>() / m as f64
}

/// Optimal assignment of `rows` to distinct columns (`rows <= cols`) for a
/// row-major cost matrix, by shortest augmenting paths with potentials.
/// Returns the column of every row.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols && cost.len() == rows * cols);
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut row_of = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; rows];
    for j in 1..=cols {
        if row_of[j] > 0 {
            out[row_of[j] - 1] = j - 1;
        }
    }
    out
}

/// `m` points chosen uniformly without replacement, in input order.
pub fn subsample(points: &[Vector3<f64>], m: usize, seed: u64) -> Vec<Vector3<f64>> {
    if m >= points.len() {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, points.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// First inward crossings of `field` along every lattice row in the six axis
/// directions. `locate(a, b, fa, fb)` places the surface on the segment between
/// the outside sample `a` and the inside sample `b`.
fn scan_field<F>(field: &[f32], lattice: &Lattice, locate: F) -> Vec<Vector3<f64>>
where
    F: Fn(&Vector3<f64>, &Vector3<f64>, f64, f64) -> Vector3<f64> + Sync,
{
    let n = lattice.resolution;
    let idx = |c: [usize; 3]| c[0] + n * (c[1] + n * c[2]);
    let rows: Vec<(usize, usize, usize)> = (0..3).flat_map(|ax| (0..n * n).map(move |r| (ax, r % n, r / n))).collect();
    let hits: Vec<Vec<Vector3<f64>>> = rows
        .par_iter()
        .map(|&(ax, u, v)| {
            let (ua, va) = ((ax + 1) % 3, (ax + 2) % 3);
            let at = |s: usize| {
                let mut c = [0usize; 3];
                c[ax] = s;
                c[ua] = u;
                c[va] = v;
                c
            };
            let mut out = Vec::new();
            let forward = (1..n).find(|&s| field[idx(at(s - 1))] >= 0.0 && field[idx(at(s))] < 0.0);
            if let Some(s) = forward {
                let (a, b) = (at(s - 1), at(s));
                out.push(locate(
                    &lattice.center(a[0], a[1], a[2]),
                    &lattice.center(b[0], b[1], b[2]),
                    field[idx(a)] as f64,
                    field[idx(b)] as f64,
                ));
            }
            let backward = (0..n - 1).rev().find(|&s| field[idx(at(s + 1))] >= 0.0 && field[idx(at(s))] < 0.0);
            if let Some(s) = backward {
                let (a, b) = (at(s + 1), at(s));
                out.push(locate(
                    &lattice.center(a[0], a[1], a[2]),
                    &lattice.center(b[0], b[1], b[2]),
                    field[idx(a)] as f64,
                    field[idx(b)] as f64,
                ));
            }
            out
        })
        .collect();
    hits.into_iter().flatten().collect()
}

fn linear_zero(a: &Vector3<f64>, b: &Vector3<f64>, fa: f64, fb: f64) -> Vector3<f64> {
    let t = if fa - fb > 0.0 { fa / (fa - fb) } else { 0.5 };
    a + (b - a) * t.clamp(0.0, 1.0)
}

/// Surface points of the reference grid seen by axis-aligned scans, subsampled
/// to at most `n` with `seed`.
pub fn scan_points_grid(grid: &TsdfGrid, n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let pts = scan_field(&grid.values, &Lattice::of(grid), linear_zero);
    subsample(&pts, n, seed)
}

/// Minimum radial distance over `primitives` at every lattice point, with
/// far points set to one voxel.
pub fn union_field(primitives: &[Superquadric], lattice: &Lattice) -> Vec<f32> {
    let n = lattice.resolution;
    let h = lattice.voxel_size;
    let mut field = vec![h as f32; lattice.len()];
    for sq in primitives {
        let bb = sq.world_aabb(2.0 * h);
        let Some((lo, hi)) = lattice.index_range(&bb.min, &bb.max) else {
            continue;
        };
        let prep = Prepared::new(sq);
        field
            .par_chunks_mut(n * n)
            .enumerate()
            .filter(|(z, _)| (lo[2]..=hi[2]).contains(z))
            .for_each(|(z, slab)| {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let d = prep.srdf(&lattice.center(x, y, z)).clamp(-h, h) as f32;
                        let cell = &mut slab[x + n * y];
                        *cell = cell.min(d);
                    }
                }
            });
    }
    field
}

/// Surface points of the primitive union seen by axis-aligned scans on
/// `lattice`, refined by bisection, subsampled to at most `n` with `seed`.
pub fn scan_points_primitives(primitives: &[Superquadric], lattice: &Lattice, n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let field = union_field(primitives, lattice);
    let preps: Vec<Prepared> = primitives.iter().map(Prepared::new).collect();
    let union = |p: &Vector3<f64>| preps.iter().map(|s| s.srdf(p)).fold(f64::INFINITY, f64::min);
    let pts = scan_field(&field, lattice, |a, b, _, _| {
        let (mut out, mut inn) = (*a, *b);
        for _ in 0..30 {
            let mid = (out + inn) * 0.5;
            if union(&mid) < 0.0 {
                inn = mid;
            } else {
                out = mid;
            }
        }
        (out + inn) * 0.5
    });
    subsample(&pts, n, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub scan_points: usize,
    pub seed: u64,
    /// Skip the Earth Mover's distance (it dominates evaluation time).
    pub skip_emd: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            scan_points: DEFAULT_SCAN_POINTS,
            seed: 0,
            skip_emd: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    /// `NaN` (serialized as `null`) when skipped.
    pub emd: f64,
    pub voxel_iou: f64,
    /// `NaN` (serialized as `null`) when no primitive covers any voxel.
    pub overlap_rate: f64,
    pub overlap_defined: bool,
    pub n_primitives: usize,
    pub reference_points: usize,
    pub abstraction_points: usize,
    pub emd_points: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "cd,emd,voxel_iou,overlap_rate,n_primitives,reference_points,abstraction_points,emd_points,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.cd,
            self.emd,
            self.voxel_iou,
            self.overlap_rate,
            self.n_primitives,
            self.reference_points,
            self.abstraction_points,
            self.emd_points,
            self.seed
        )
    }
}

/// All metrics of `primitives` against `reference`, on the reference lattice.
pub fn evaluate(reference: &TsdfGrid, primitives: &[Superquadric], opts: &EvalOptions) -> MetricReport {
    let lattice = Lattice::of(reference);
    let counts = coverage_counts(primitives, &lattice);
    let overlap = overlap_from_counts(&counts);
    let p = scan_points_grid(reference, opts.scan_points, opts.seed);
    let q = scan_points_primitives(primitives, &lattice, opts.scan_points, opts.seed.wrapping_add(2));
    let (emd_value, emd_points) = if opts.skip_emd {
        (f64::NAN, 0)
    } else {
        (emd(&p, &q, opts.seed), EMD_POINTS.min(p.len()).min(q.len()))
    };
    MetricReport {
        cd: chamfer(&p, &q),
        emd: emd_value,
        voxel_iou: iou_from_counts(reference, &counts),
        overlap_rate: overlap.unwrap_or(f64::NAN),
        overlap_defined: overlap.is_some(),
        n_primitives: primitives.len(),
        reference_points: p.len(),
        abstraction_points: q.len(),
        emd_points,
        seed: opts.seed,
    }
}

/// [`evaluate`] for an abstraction.
pub fn evaluate_abstraction(reference: &TsdfGrid, abstraction: &Abstraction, opts: &EvalOptions) -> MetricReport {
    evaluate(reference, &abstraction.superquadrics(), opts)
}
