//! Structure-aware volumetric decomposition.
//!
//! Candidate cutting planes are the axis-aligned slices where the cross-section
//! area bends sharply or the number of cross-section pieces changes. The
//! interior is cut along the best planes, each cell is split into connected
//! pieces, and adjacent pieces are merged back when the cut runs through smooth,
//! convex material.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::config::DecompConfig;
use crate::grid::{label_components, signed_distance_from_mask, TsdfGrid};
use crate::hull::{merged_hull, voxel_hull, ConvexHull};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecompError {
    #[error("partitions {0} and {1} share no interface")]
    NotAdjacent(u32, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A cut between slices `index` and `index + 1` along `axis`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePlane {
    pub axis: Axis,
    pub index: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub id: u32,
    /// Sorted grid indices.
    pub voxels: Vec<u32>,
    /// Hull of the member voxel cubes, in voxel units. `None` for flat sets.
    pub hull: Option<ConvexHull>,
    /// Adjacent partitions and the face-adjacent voxel pairs `(own, theirs)`.
    pub neighbors: BTreeMap<u32, Vec<(u32, u32)>>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Hull volume in voxel units; flat sets fall back to their voxel count.
    pub fn hull_volume(&self) -> f64 {
        self.hull.as_ref().map_or(self.voxels.len() as f64, |h| h.volume())
    }
}

/// Interior voxel count of each slice along `axis`.
pub fn slice_area_profile(grid: &TsdfGrid, axis: Axis) -> Vec<usize> {
    let n = grid.resolution;
    let mut a = vec![0usize; n];
    for (i, v) in grid.values.iter().enumerate() {
        if *v < 0.0 {
            a[coord(i, n, axis)] += 1;
        }
    }
    a
}

#[inline]
fn coord(i: usize, n: usize, axis: Axis) -> usize {
    match axis {
        Axis::X => i % n,
        Axis::Y => (i / n) % n,
        Axis::Z => i / (n * n),
    }
}

/// Window-3 second-order difference of the area profile; zero where the window
/// leaves the array.
pub fn second_order_difference(a: &[f64], i: usize) -> f64 {
    if i < 3 || i + 3 >= a.len() {
        return 0.0;
    }
    let outer: f64 = (1..=3).map(|j| a[i - j] + a[i + j]).sum();
    outer - 2.0 * (a[i - 1] + a[i] + a[i + 1])
}

/// Number of 4-connected interior pieces in every slice along `axis`.
pub fn slice_component_counts(grid: &TsdfGrid, axis: Axis) -> Vec<usize> {
    let n = grid.resolution;
    (0..n)
        .into_par_iter()
        .map(|s| {
            let mask: Vec<bool> = (0..n * n)
                .map(|k| grid.values[slice_voxel(n, axis, s, k % n, k / n)] < 0.0)
                .collect();
            count_components_2d(&mask, n)
        })
        .collect()
}

/// Grid index of in-slice coordinates `(u, v)` on slice `s`.
#[inline]
fn slice_voxel(n: usize, axis: Axis, s: usize, u: usize, v: usize) -> usize {
    let (x, y, z) = match axis {
        Axis::X => (s, u, v),
        Axis::Y => (u, s, v),
        Axis::Z => (u, v, s),
    };
    x + n * (y + n * z)
}

fn count_components_2d(mask: &[bool], n: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(k) = queue.pop_front() {
            let (u, v) = (k % n, k / n);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if u > 0 {
                visit(k - 1);
            }
            if u + 1 < n {
                visit(k + 1);
            }
            if v > 0 {
                visit(k - n);
            }
            if v + 1 < n {
                visit(k + n);
            }
        }
    }
    count
}

/// `|N_i - N_{i-1}|` for slice `i` along `axis`, zero for the first slice.
pub fn component_variation(grid: &TsdfGrid, axis: Axis, i: usize) -> usize {
    if i == 0 {
        return 0;
    }
    let counts = slice_component_counts(grid, axis);
    counts[i].abs_diff(counts[i - 1])
}

/// Divides by the largest absolute value; an all-zero input stays zero.
fn normalize_max_abs(v: &[f64]) -> Vec<f64> {
    let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if m == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x.abs() / m).collect()
}

/// Saliency score of every slice along `axis`.
pub fn saliency_scores(grid: &TsdfGrid, axis: Axis, alpha: f64) -> Vec<f64> {
    let area: Vec<f64> = slice_area_profile(grid, axis).into_iter().map(|a| a as f64).collect();
    let m: Vec<f64> = (0..area.len()).map(|i| second_order_difference(&area, i)).collect();
    let counts = slice_component_counts(grid, axis);
    let dn: Vec<f64> = (0..counts.len())
        .map(|i| if i == 0 { 0.0 } else { counts[i].abs_diff(counts[i - 1]) as f64 })
        .collect();
    let m = normalize_max_abs(&m);
    let dn = normalize_max_abs(&dn);
    m.iter().zip(&dn).map(|(m, d)| alpha * m + (1.0 - alpha) * d).collect()
}

/// Greedy highest-score planes with a minimum spacing per axis. Only positive
/// scores are candidates; equal scores prefer the lower index.
pub fn select_planes(grid: &TsdfGrid, config: &DecompConfig) -> Vec<SlicePlane> {
    let mut candidates: Vec<SlicePlane> = Axis::ALL
        .iter()
        .flat_map(|&axis| {
            saliency_scores(grid, axis, config.alpha)
                .into_iter()
                .enumerate()
                .filter(|(_, s)| *s > 0.0)
                .map(move |(index, score)| SlicePlane { axis, index, score })
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.axis.cmp(&b.axis))
            .then(a.index.cmp(&b.index))
    });
    let h = grid.voxel_size;
    let too_close = |a: &SlicePlane, b: &SlicePlane| {
        a.axis == b.axis && (a.index.abs_diff(b.index) as f64) * h < config.min_spacing * (1.0 - 1e-9)
    };
    let mut chosen: Vec<SlicePlane> = Vec::new();
    for c in candidates {
        let quota_full = if config.planes_global {
            chosen.len() >= config.k
        } else {
            chosen.iter().filter(|p| p.axis == c.axis).count() >= config.k
        };
        if quota_full {
            if config.planes_global {
                break;
            }
            continue;
        }
        if chosen.iter().any(|p| too_close(p, &c)) {
            continue;
        }
        chosen.push(c);
    }
    chosen.sort_by(|a, b| a.axis.cmp(&b.axis).then(a.index.cmp(&b.index)));
    chosen
}

/// Cuts the interior along `planes` and splits every cell into 6-connected
/// pieces. Partition ids follow the smallest member index.
pub fn split(grid: &TsdfGrid, planes: &[SlicePlane]) -> Vec<Partition> {
    let n = grid.resolution;
    // Cell coordinate along each axis: number of planes strictly below.
    let cell_of: Vec<Vec<u16>> = Axis::ALL
        .iter()
        .map(|&axis| {
            let mut cuts: Vec<usize> = planes.iter().filter(|p| p.axis == axis).map(|p| p.index).collect();
            cuts.sort_unstable();
            (0..n).map(|s| cuts.iter().filter(|&&c| c < s).count() as u16).collect()
        })
        .collect();
    let cell_key = |i: usize| -> (u16, u16, u16) {
        (
            cell_of[0][i % n],
            cell_of[1][(i / n) % n],
            cell_of[2][i / (n * n)],
        )
    };
    let mut cells: BTreeMap<(u16, u16, u16), Vec<usize>> = BTreeMap::new();
    for i in 0..grid.len() {
        if grid.values[i] < 0.0 {
            cells.entry(cell_key(i)).or_default().push(i);
        }
    }
    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut mask = vec![false; grid.len()];
    for members in cells.values() {
        for &i in members {
            mask[i] = true;
        }
        groups.extend(components_of_members(&mut mask, members, n));
    }
    groups.sort_by_key(|g| g[0]);
    let mut parts: Vec<Partition> = groups
        .into_par_iter()
        .enumerate()
        .map(|(id, voxels)| Partition {
            id: id as u32,
            hull: voxel_hull(&voxels, n),
            voxels,
            neighbors: BTreeMap::new(),
        })
        .collect();
    link_neighbors(&mut parts, n);
    parts
}

/// Flood fill restricted to `members`, clearing `mask` as voxels are visited.
fn components_of_members(mask: &mut [bool], members: &[usize], n: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let nn = n * n;
    for &start in members {
        if !mask[start] {
            continue;
        }
        mask[start] = false;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i as u32);
            let (x, y, z) = (i % n, (i / n) % n, i / nn);
            let nbrs = [
                (x > 0, i.wrapping_sub(1)),
                (x + 1 < n, i + 1),
                (y > 0, i.wrapping_sub(n)),
                (y + 1 < n, i + n),
                (z > 0, i.wrapping_sub(nn)),
                (z + 1 < n, i + nn),
            ];
            for (ok, j) in nbrs {
                if ok && mask[j] {
                    mask[j] = false;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Recomputes every partition's neighbor interfaces from scratch.
fn link_neighbors(parts: &mut [Partition], n: usize) {
    let nn = n * n;
    let mut owner = vec![u32::MAX; nn * n];
    for p in parts.iter() {
        for &v in &p.voxels {
            owner[v as usize] = p.id;
        }
    }
    for p in parts.iter_mut() {
        p.neighbors.clear();
        for &v in &p.voxels {
            let i = v as usize;
            let (x, y, z) = (i % n, (i / n) % n, i / nn);
            let forward = [(x + 1 < n, i + 1), (y + 1 < n, i + n), (z + 1 < n, i + nn)];
            let backward = [(x > 0, i.wrapping_sub(1)), (y > 0, i.wrapping_sub(n)), (z > 0, i.wrapping_sub(nn))];
            for (ok, j) in forward.into_iter().chain(backward) {
                if !ok {
                    continue;
                }
                let q = owner[j];
                if q != u32::MAX && q != p.id {
                    p.neighbors.entry(q).or_default().push((v, j as u32));
                }
            }
        }
        for pairs in p.neighbors.values_mut() {
            pairs.sort_unstable();
        }
    }
}

/// Field whose curvature is measured: the unclamped distance when known,
/// otherwise a distance transform of the interior.
pub fn curvature_source(grid: &TsdfGrid) -> Vec<f32> {
    match &grid.raw_sdf {
        Some(raw) => raw.clone(),
        None => signed_distance_from_mask(&grid.interior_mask(), grid.resolution, grid.voxel_size),
    }
}

/// Mean curvature `0.5 div(grad phi / |grad phi|)` at voxel `i` by central
/// differences, clamping the stencil to the lattice.
pub fn mean_curvature(field: &[f32], n: usize, h: f64, i: usize) -> f64 {
    let (x, y, z) = (i % n, (i / n) % n, i / (n * n));
    let at = |x: isize, y: isize, z: isize| -> f64 {
        let c = |v: isize| v.clamp(0, n as isize - 1) as usize;
        field[c(x) + n * (c(y) + n * c(z))] as f64
    };
    let normal = |x: isize, y: isize, z: isize| -> Vector3<f64> {
        let g = Vector3::new(
            at(x + 1, y, z) - at(x - 1, y, z),
            at(x, y + 1, z) - at(x, y - 1, z),
            at(x, y, z + 1) - at(x, y, z - 1),
        );
        let len = g.norm();
        if len > 0.0 {
            g / len
        } else {
            Vector3::zeros()
        }
    };
    let (x, y, z) = (x as isize, y as isize, z as isize);
    let div = (normal(x + 1, y, z).x - normal(x - 1, y, z).x)
        + (normal(x, y + 1, z).y - normal(x, y - 1, z).y)
        + (normal(x, y, z + 1).z - normal(x, y, z - 1).z);
    0.25 * div / h
}

/// `1 - mean |H1 - H2| / h_max` over the interface, clamped to `[0, 1]`.
pub fn curvature_continuity(
    field: &[f32],
    n: usize,
    h: f64,
    h_max: f64,
    p1: &Partition,
    p2: &Partition,
) -> Result<f64, DecompError> {
    let pairs = p1
        .neighbors
        .get(&p2.id)
        .filter(|g| !g.is_empty())
        .ok_or(DecompError::NotAdjacent(p1.id, p2.id))?;
    let total: f64 = pairs
        .iter()
        .map(|&(a, b)| (mean_curvature(field, n, h, a as usize) - mean_curvature(field, n, h, b as usize)).abs())
        .sum();
    Ok((1.0 - total / pairs.len() as f64 / h_max).clamp(0.0, 1.0))
}

/// `(|C1| + |C2|) / Vol(CH(C1 u C2))`, clamped to at most one.
pub fn volumetric_iou(p1: &Partition, p2: &Partition) -> f64 {
    let union = match (&p1.hull, &p2.hull) {
        (Some(a), Some(b)) => merged_hull(a, b),
        (Some(a), None) => merged_hull(a, a),
        (None, Some(b)) => merged_hull(b, b),
        (None, None) => None,
    };
    let count = (p1.len() + p2.len()) as f64;
    let hull_volume = union.map_or(count, |h| h.volume()).max(count);
    (count / hull_volume).min(1.0)
}

/// Merge score `beta S_curv + gamma S_vol`.
pub fn merge_score(
    field: &[f32],
    grid: &TsdfGrid,
    config: &DecompConfig,
    p1: &Partition,
    p2: &Partition,
) -> Result<f64, DecompError> {
    let h_max = config.h_max.unwrap_or(1.0 / grid.voxel_size);
    let s_curv = curvature_continuity(field, grid.resolution, grid.voxel_size, h_max, p1, p2)?;
    Ok(config.beta * s_curv + config.gamma * volumetric_iou(p1, p2))
}

/// Repeatedly merges the adjacent pair with the highest score above `tau_m`.
/// Merged partitions keep the lower id.
pub fn adaptive_merge(partitions: Vec<Partition>, grid: &TsdfGrid, config: &DecompConfig) -> Vec<Partition> {
    let field = curvature_source(grid);
    let mut parts: BTreeMap<u32, Partition> = partitions.into_iter().map(|p| (p.id, p)).collect();
    let pair_score = |parts: &BTreeMap<u32, Partition>, a: u32, b: u32| {
        merge_score(&field, grid, config, &parts[&a], &parts[&b]).unwrap_or(f64::NEG_INFINITY)
    };
    let mut scores: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let pairs: Vec<(u32, u32)> = parts
        .values()
        .flat_map(|p| p.neighbors.keys().filter(move |&&q| q > p.id).map(move |&q| (p.id, q)))
        .collect();
    let computed: Vec<f64> = pairs.par_iter().map(|&(a, b)| pair_score(&parts, a, b)).collect();
    scores.extend(pairs.into_iter().zip(computed));

    loop {
        let mut best: Option<((u32, u32), f64)> = None;
        for (&pair, &s) in &scores {
            if s > config.tau_m && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((pair, s));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let pb = parts.remove(&b).unwrap();
        let pa = parts.get_mut(&a).unwrap();
        pa.voxels.extend_from_slice(&pb.voxels);
        pa.voxels.sort_unstable();
        pa.hull = match (pa.hull.take(), &pb.hull) {
            (Some(x), Some(y)) => merged_hull(&x, y),
            (Some(x), None) => Some(x),
            (None, y) => y.clone(),
        };
        pa.neighbors.remove(&b);
        for (q, pairs) in pb.neighbors {
            if q != a {
                pa.neighbors.entry(q).or_default().extend(pairs);
            }
        }
        for pairs in pa.neighbors.values_mut() {
            pairs.sort_unstable();
        }
        // Re-point neighbors of the absorbed partition.
        let touched: Vec<u32> = parts[&a].neighbors.keys().copied().collect();
        for &q in &touched {
            let other = parts.get_mut(&q).unwrap();
            let mut pairs = other.neighbors.remove(&b).unwrap_or_default();
            pairs.extend(other.neighbors.remove(&a).unwrap_or_default());
            pairs.sort_unstable();
            other.neighbors.insert(a, pairs);
        }
        scores.retain(|&(x, y), _| x != a && x != b && y != a && y != b);
        let fresh: Vec<f64> = touched.par_iter().map(|&q| pair_score(&parts, a.min(q), a.max(q))).collect();
        for (q, s) in touched.into_iter().zip(fresh) {
            scores.insert((a.min(q), a.max(q)), s);
        }
    }
    parts.into_values().collect()
}

/// Plane selection, splitting and merging.
pub fn decompose(grid: &TsdfGrid, config: &DecompConfig) -> Vec<Partition> {
    let planes = select_planes(grid, config);
    adaptive_merge(split(grid, &planes), grid, config)
}

/// Per-voxel labels: `0` outside, partition position + 1 inside.
pub fn partition_labels(partitions: &[Partition], len: usize) -> Vec<u16> {
    let mut labels = vec![0u16; len];
    for (k, p) in partitions.iter().enumerate() {
        let label = u16::try_from(k + 1).unwrap_or(u16::MAX);
        for &v in &p.voxels {
            labels[v as usize] = label;
        }
    }
    labels
}

/// Connected interior pieces as single partitions (no cutting).
pub fn components_as_partitions(grid: &TsdfGrid) -> Vec<Partition> {
    let mut parts: Vec<Partition> = label_components(&grid.interior_mask(), grid.resolution)
        .into_iter()
        .map(|c| Partition {
            id: 0,
            hull: voxel_hull(&c.voxel_indices, grid.resolution),
            voxels: c.voxel_indices,
            neighbors: BTreeMap::new(),
        })
        .collect();
    parts.sort_by_key(|p| p.voxels[0]);
    for (k, p) in parts.iter_mut().enumerate() {
        p.id = k as u32;
    }
    parts
}
